#![allow(dead_code)]

use diffcore::{ParamStore, RngStream};

/// Relative error `|fd - an| / max(|fd|, |an|)` (vector norms) between the
/// analytic gradient and central differences of `f` over `coords`
/// coordinates picked at random.
pub fn fd_rel_error(
    params: &ParamStore,
    analytic: &[f64],
    coords: usize,
    h: f64,
    seed: u64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let n = params.numel();
    let mut rng = RngStream::new(seed, 0);
    let (mut diff, mut a_norm, mut f_norm) = (0.0, 0.0, 0.0);
    for _ in 0..coords {
        let i = rng.below(n);
        let mut p = params.clone();
        p.nudge(i, h);
        let up = f(&p);
        p.nudge(i, -2.0 * h);
        let down = f(&p);
        let fd = (up - down) / (2.0 * h);
        diff += (fd - analytic[i]).powi(2);
        a_norm += analytic[i].powi(2);
        f_norm += fd * fd;
    }
    diff.sqrt() / a_norm.sqrt().max(f_norm.sqrt()).max(1e-300)
}

/// Flat row-major samples of width `d` as separate rows.
pub fn rows(flat: &[f64], d: usize) -> Vec<Vec<f64>> {
    flat.chunks(d).map(<[f64]>::to_vec).collect()
}
