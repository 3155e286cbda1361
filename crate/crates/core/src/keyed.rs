//! Counter-based randomness: every draw is a pure function of a key.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one key.
pub fn key(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243F_6A88_85A3_08D3, |acc, &p| mix64(acc ^ mix64(p)))
}

/// FNV-1a over bytes; stable across platforms and releases.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn uniform(k: u64) -> f64 {
    ChaCha8Rng::seed_from_u64(k).random::<f64>()
}

pub fn standard_normal(k: u64) -> f64 {
    ChaCha8Rng::seed_from_u64(k).sample(StandardNormal)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_is_order_sensitive() {
        assert_ne!(key(&[1, 2]), key(&[2, 1]));
        assert_eq!(key(&[1, 2, 3]), key(&[1, 2, 3]));
    }

    #[test]
    fn uniform_is_roughly_uniform() {
        let n = 20_000;
        let mean: f64 = (0..n).map(|i| uniform(key(&[7, i]))).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }

    #[test]
    fn normal_moments() {
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|i| standard_normal(key(&[9, i]))).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.03, "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }
}
