//! Seeded RNG helpers. All randomness in the crate flows through ChaCha8
//! streams created from explicit u64 seeds so every run is reproducible.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG used everywhere in this crate.
pub type Prng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Prng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent substream from a base seed and a stream index.
/// SplitMix64-style mixing keeps nearby indices uncorrelated.
pub fn substream(seed: u64, stream: u64) -> Prng {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

pub fn uniform(rng: &mut Prng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

/// Standard normal sample via Box-Muller.
pub fn normal(rng: &mut Prng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut Prng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substreams_are_reproducible_and_distinct() {
        let a: Vec<f64> = {
            let mut r = substream(7, 0);
            (0..4).map(|_| uniform(&mut r, 0.0, 1.0)).collect()
        };
        let a2: Vec<f64> = {
            let mut r = substream(7, 0);
            (0..4).map(|_| uniform(&mut r, 0.0, 1.0)).collect()
        };
        let b: Vec<f64> = {
            let mut r = substream(7, 1);
            (0..4).map(|_| uniform(&mut r, 0.0, 1.0)).collect()
        };
        assert_eq!(a, a2);
        assert_ne!(a, b);
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut r = seeded(11);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| normal(&mut r)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
