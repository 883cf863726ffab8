//! Deterministic random-number plumbing.
//!
//! Every random decision in the pipeline draws from a ChaCha8 stream seeded
//! by mixing a base seed with a stream tag and an index. Sub-seeds derive
//! per-item (per image, per step), never per-worker, so results do not
//! depend on thread count or call interleaving. All bounded sampling is
//! hand-rolled on top of `next_u64` so the byte stream alone fixes the
//! outcome.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Stream tags keeping distinct uses of the same base seed decorrelated.
pub mod stream {
    pub const DATA_IMAGE: u64 = 0x01;
    pub const MASK: u64 = 0x02;
    pub const PARAM_INIT: u64 = 0x03;
    pub const BATCH_ORDER: u64 = 0x04;
    pub const MIXUP: u64 = 0x05;
    pub const KMEANS: u64 = 0x06;
    pub const HEAD_INIT: u64 = 0x07;
    pub const RANDOM_BUFFER: u64 = 0x08;
}

/// SplitMix64 finalizer; decorrelates nearby seeds.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mix a base seed, a stream tag, and an item index into one sub-seed.
pub fn mix_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ stream.rotate_left(32)) ^ index)
}

/// ChaCha8 generator for a (base, stream, index) triple.
pub fn rng_for(base: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(base, stream, index))
}

/// Uniform f64 in [0, 1) with 53 bits of precision.
pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform integer in [0, n) by rejection sampling. Panics if n == 0.
pub fn below(rng: &mut ChaCha8Rng, n: u64) -> u64 {
    assert!(n > 0, "below() requires n > 0");
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return v % n;
        }
    }
}

/// Standard normal via Box-Muller. Consumes two uniforms per pair; the
/// second value of each pair is discarded for a stateless call shape.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // u1 in (0, 1] so the log is finite.
    let u1 = 1.0 - uniform(rng);
    let u2 = uniform(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, (i + 1) as u64) as usize;
        items.swap(i, j);
    }
}

/// Random permutation of 0..n.
pub fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(rng, &mut idx);
    idx
}

/// Sample `m` distinct indices from 0..n, returned sorted ascending.
/// Partial Fisher-Yates, so cost is O(n) regardless of m.
pub fn sample_without_replacement(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<usize> {
    assert!(m <= n, "cannot sample {m} of {n}");
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = i + below(rng, (n - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(m);
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_seed_separates_streams() {
        let a = mix_seed(7, stream::MASK, 0);
        let b = mix_seed(7, stream::DATA_IMAGE, 0);
        let c = mix_seed(7, stream::MASK, 1);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_range_and_determinism() {
        let mut r1 = rng_for(3, stream::MIXUP, 0);
        let mut r2 = rng_for(3, stream::MIXUP, 0);
        for _ in 0..1000 {
            let x = uniform(&mut r1);
            assert!((0.0..1.0).contains(&x));
            assert_eq!(x, uniform(&mut r2));
        }
    }

    #[test]
    fn below_is_in_range() {
        let mut rng = rng_for(11, stream::BATCH_ORDER, 4);
        for n in [1u64, 2, 3, 7, 100, 1 << 40] {
            for _ in 0..100 {
                assert!(below(&mut rng, n) < n);
            }
        }
    }

    #[test]
    fn sample_without_replacement_is_sorted_and_distinct() {
        let mut rng = rng_for(5, stream::MASK, 9);
        let s = sample_without_replacement(&mut rng, 16, 12);
        assert_eq!(s.len(), 12);
        for w in s.windows(2) {
            assert!(w[0] < w[1]);
        }
        assert!(s.iter().all(|&i| i < 16));
    }

    #[test]
    fn standard_normal_moments() {
        let mut rng = rng_for(1, stream::PARAM_INIT, 0);
        let n = 200_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let x = standard_normal(&mut rng);
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }
}
