//! Deterministic, stream-keyed randomness.
//!
//! Every random decision in the pipeline draws from a ChaCha8 stream whose
//! key is a SHA-256 hash of (root seed, domain tag, context parts). Streams
//! are therefore independent of evaluation order and identical across
//! machines, which is what makes datasets and checkpoints reproducible.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// A seeded stream for one (seed, tag, parts...) context.
pub fn stream(seed: u64, tag: &str, parts: &[&str]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([0xfe]);
    h.update(tag.as_bytes());
    for p in parts {
        h.update([0xff]);
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Uniform f64 in [lo, hi).
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Uniform integer in [0, n) by rejection, bias-free.
pub fn below(rng: &mut ChaCha8Rng, n: u64) -> u64 {
    assert!(n > 0);
    let zone = u64::MAX - (u64::MAX - n + 1) % n;
    loop {
        let v = rng.next_u64();
        if v <= zone {
            return v % n;
        }
    }
}

/// Standard normal via Box-Muller.
pub fn normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    let u1: f64 = loop {
        let v = rng.gen::<f64>();
        if v > 0.0 {
            break v;
        }
    };
    let u2: f64 = rng.gen();
    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    mean + sd * z
}

/// First `k` elements of a Fisher-Yates shuffle of `items`: a uniform sample
/// without replacement, in draw order.
pub fn sample_without_replacement<T: Copy>(
    rng: &mut ChaCha8Rng,
    items: &[T],
    k: usize,
) -> Vec<T> {
    let mut pool: Vec<T> = items.to_vec();
    let k = k.min(pool.len());
    for i in 0..k {
        let j = i + below(rng, (pool.len() - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}
