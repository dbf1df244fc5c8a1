//! Multivariate Gaussians and the closed-form rectified-flow oracle.

use diffcore::RngStream;
use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Full-covariance Gaussian with cached Cholesky factor and inverse.
#[derive(Debug, Clone)]
pub struct MvGaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    inv: DMatrix<f64>,
    log_det: f64,
}

impl MvGaussian {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(invalid(format!("covariance must be {d}x{d}")));
        }
        let cov = DMatrix::from_row_slice(d, d, &cov);
        Self::from_parts(DVector::from_vec(mean), cov)
    }

    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::from_parts(DVector::from_vec(mean), DMatrix::identity(d, d) * var)
    }

    fn from_parts(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| invalid("covariance is not positive definite"))?;
        let l = chol.l();
        let log_det = 2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let inv = chol.inverse();
        Ok(Self {
            mean,
            cov,
            chol: l,
            inv,
            log_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    /// Row-major covariance.
    pub fn cov(&self) -> Vec<f64> {
        self.cov.transpose().as_slice().to_vec()
    }

    pub fn mahalanobis_sq(&self, x: &[f64]) -> f64 {
        let d = DVector::from_column_slice(x) - &self.mean;
        (d.transpose() * &self.inv * &d)[(0, 0)]
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det + self.mahalanobis_sq(x))
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let z = DVector::from_vec(rng.gaussian(self.dim()));
        (&self.mean + &self.chol * z).as_slice().to_vec()
    }
}

/// Closed-form marginals, velocity and score for `x_t = (1-t) x0 + t eps`
/// with `x0 ~ N(mu0, Sigma0)` and `eps ~ N(0, I)`.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    data: MvGaussian,
}

/// Marginal law at one time.
#[derive(Debug, Clone)]
pub struct Marginal {
    pub mean: Vec<f64>,
    /// Row-major covariance.
    pub cov: Vec<f64>,
}

impl GaussianOracle {
    pub fn new(data: MvGaussian) -> Self {
        Self { data }
    }

    pub fn data(&self) -> &MvGaussian {
        &self.data
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    fn marginal_mats(&self, t: f64) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim();
        let m = &self.data.mean * (1.0 - t);
        let c = &self.data.cov * (1.0 - t).powi(2) + DMatrix::identity(d, d) * (t * t);
        (m, c)
    }

    pub fn marginal(&self, t: f64) -> Marginal {
        let (m, c) = self.marginal_mats(t);
        Marginal {
            mean: m.as_slice().to_vec(),
            cov: c.transpose().as_slice().to_vec(),
        }
    }

    /// `E[eps - x0 | x_t = x]` for each row of `x` (B x D).
    pub fn velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        let d = self.dim();
        let (m, c) = self.marginal_mats(t);
        let cinv = c.try_inverse().expect("marginal covariance is positive definite");
        let cross = DMatrix::identity(d, d) * t - &self.data.cov * (1.0 - t);
        let gain = cross * cinv;
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(d) {
            let dx = DVector::from_column_slice(row) - &m;
            let v = &gain * dx - &self.data.mean;
            out.extend_from_slice(v.as_slice());
        }
        out
    }

    /// `grad log q_t(x)` for each row of `x`.
    pub fn score(&self, x: &[f64], t: f64) -> Vec<f64> {
        let d = self.dim();
        let (m, c) = self.marginal_mats(t);
        let cinv = c.try_inverse().expect("marginal covariance is positive definite");
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(d) {
            let dx = DVector::from_column_slice(row) - &m;
            out.extend_from_slice((-(&cinv * dx)).as_slice());
        }
        out
    }
}

/// Sample mean and row-major covariance (population normalization) of rows.
pub fn moments(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows.first().map_or(0, Vec::len);
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n;
        }
    }
    let mut cov = vec![0.0; d * d];
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (r[i] - mean[i]) * (r[j] - mean[j]) / n;
            }
        }
    }
    (mean, cov)
}

/// Largest absolute elementwise difference.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_data_at_half_time() {
        let o = GaussianOracle::new(MvGaussian::isotropic(vec![0.0, 0.0], 1.0).unwrap());
        let m = o.marginal(0.5);
        assert_eq!(m.mean, vec![0.0, 0.0]);
        assert!(max_abs_diff(&m.cov, &[0.5, 0.0, 0.0, 0.5]) < 1e-15);
        // score = -x / ((1-t)^2 + t^2) = -2x
        let s = o.score(&[0.3, -1.1], 0.5);
        assert!(max_abs_diff(&s, &[-0.6, 2.2]) < 1e-12);
    }

    #[test]
    fn pure_noise_endpoint() {
        let data = MvGaussian::new(vec![2.0, -1.0], vec![0.5, 0.2, 0.2, 0.3]).unwrap();
        let m = GaussianOracle::new(data).marginal(1.0);
        assert_eq!(m.mean, vec![0.0, 0.0]);
        assert!(max_abs_diff(&m.cov, &[1.0, 0.0, 0.0, 1.0]) < 1e-15);
    }

    #[test]
    fn velocity_and_score_satisfy_the_interpolation_identity() {
        // score = -(x + (1-t) v) / t for the rectified-flow interpolation
        let data = MvGaussian::new(vec![1.0, -0.5], vec![0.5, 0.2, 0.2, 0.3]).unwrap();
        let o = GaussianOracle::new(data);
        for &t in &[0.1, 0.37, 0.8] {
            let x = [0.4, -0.9];
            let v = o.velocity(&x, t);
            let s = o.score(&x, t);
            for i in 0..2 {
                let via_v = -(x[i] + (1.0 - t) * v[i]) / t;
                assert!((via_v - s[i]).abs() < 1e-10, "t={t}");
            }
        }
    }

    #[test]
    fn unit_gaussian_peak_density() {
        let g = MvGaussian::isotropic(vec![1.0, 1.0], 1.0).unwrap();
        assert!((g.log_density(&[1.0, 1.0]) + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_indefinite_covariance() {
        assert!(MvGaussian::new(vec![0.0, 0.0], vec![1.0, 2.0, 2.0, 1.0]).is_err());
    }
}
