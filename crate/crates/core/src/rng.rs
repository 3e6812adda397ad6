//! Small deterministic xorshift64* generator with Box–Muller normals.
//!
//! Used both for the Trojan's CDMA code generator and for every other
//! reproducible random draw in the crate (noise, mode schedules, EM restarts),
//! so results are bit-identical across platforms.

/// Replacement state for a zero seed; xorshift has a fixed point at zero.
pub const ZERO_SEED_REMAP: u64 = 0x9E37_79B9_7F4A_7C15;

const XORSHIFT_MULT: u64 = 2_685_821_657_736_338_717;

#[derive(Debug, Clone)]
pub struct Prng {
    state: u64,
    cached_gaussian: Option<f64>,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        let state = if seed == 0 { ZERO_SEED_REMAP } else { seed };
        Prng {
            state,
            cached_gaussian: None,
        }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(XORSHIFT_MULT)
    }

    /// Uniform in [0, 1) from the top 53 bits of the output.
    #[inline]
    pub fn uniform01(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..n`. `n` must be nonzero.
    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        let i = (self.uniform01() * n as f64) as usize;
        i.min(n - 1)
    }

    /// Standard normal via Box–Muller; the second value of each pair is cached.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(g) = self.cached_gaussian.take() {
            return g;
        }
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform01();
        let u2 = self.uniform01();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_gaussian = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds several integers into one seed. Order matters.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6A09_E667_F3BC_C909u64, |acc, &p| splitmix64(acc ^ p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_seed_is_remapped() {
        let a = Prng::new(0);
        let b = Prng::new(ZERO_SEED_REMAP);
        assert_eq!(a.state(), b.state());
    }

    #[test]
    fn matches_reference_xorshift64star() {
        // Hand-stepped reference for seed 1.
        let mut x: u64 = 1;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        let expected = x.wrapping_mul(2685821657736338717);
        let mut rng = Prng::new(1);
        assert_eq!(rng.next_u64(), expected);
        assert_eq!(expected, 5180492295206395165);
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = Prng::new(42);
        for _ in 0..10_000 {
            let u = rng.uniform01();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = Prng::new(7);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn derive_seed_is_order_sensitive() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_eq!(derive_seed(&[5, 9, 3]), derive_seed(&[5, 9, 3]));
    }
}
