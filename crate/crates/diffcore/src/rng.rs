use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Deterministic random stream keyed by `(seed, stream id)`.
///
/// The stream id is derived from `(stage tag, group id, member id)`, and the
/// generator is ChaCha8 with that id as its stream word, so independent tasks
/// draw from disjoint counter ranges regardless of scheduling order.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    id: u64,
    rng: ChaCha8Rng,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    // FNV-1a
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl RngStream {
    pub fn new(seed: u64, id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id);
        Self { seed, id, rng }
    }

    /// Stream for one logical task of a stage.
    pub fn derive(seed: u64, stage: &str, group: u64, member: u64) -> Self {
        let id = splitmix(splitmix(splitmix(tag_hash(stage)) ^ group) ^ member.rotate_left(32));
        Self::new(seed, id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// `n` standard normal draws (empty for `n == 0`).
    pub fn gaussian(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.rng.sample(StandardNormal)).collect()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Index drawn from unnormalized nonnegative weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_id_same_sequence() {
        let a = RngStream::derive(7, "rlhf", 3, 1).gaussian(64);
        let b = RngStream::derive(7, "rlhf", 3, 1).gaussian(64);
        assert_eq!(a, b);
    }

    #[test]
    fn members_are_separated() {
        let a = RngStream::derive(7, "rlhf", 3, 1).gaussian(16);
        let b = RngStream::derive(7, "rlhf", 3, 2).gaussian(16);
        let c = RngStream::derive(7, "pe", 3, 1).gaussian(16);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn empty_draw() {
        assert!(RngStream::new(1, 1).gaussian(0).is_empty());
    }

    #[test]
    fn million_draws_have_unit_moments() {
        let xs = RngStream::derive(42, "moments", 0, 0).gaussian(1_000_000);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        // standard error of the mean is 1e-3, so 0.01 is a 10-sigma bound
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn categorical_respects_zero_weights() {
        let mut r = RngStream::new(3, 9);
        for _ in 0..1000 {
            assert_eq!(r.categorical(&[0.0, 1.0, 0.0]), 1);
        }
    }
}
