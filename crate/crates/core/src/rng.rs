//! Seed handling. All randomness in the toolkit flows from one global seed
//! through named substreams, so that e.g. the data shuffle is unaffected by
//! how many samples the trainer later draws.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// The rng used throughout the crate.
pub type Prng = ChaCha12Rng;

/// FNV-1a over the label bytes, mixed with the seed. Stable across builds,
/// unlike `DefaultHasher`.
fn mix(seed: u64, label: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^= seed;
    h = h.wrapping_mul(0x0000_0100_0000_01b3);
    h ^= index;
    h.wrapping_mul(0x0000_0100_0000_01b3)
}

/// Derived seed for a named substream.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    mix(seed, label, 0)
}

/// Derive a named substream from a global seed.
pub fn substream(seed: u64, label: &str) -> Prng {
    Prng::seed_from_u64(mix(seed, label, 0))
}

/// Derive an indexed substream, e.g. one per sampling order or per eval run.
pub fn substream_indexed(seed: u64, label: &str, index: u64) -> Prng {
    Prng::seed_from_u64(mix(seed, label, index))
}

/// Standard-normal matrix draw.
pub fn randn(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// Uniform matrix draw on [lo, hi).
pub fn rand_uniform(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}
