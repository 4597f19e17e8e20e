//! Seeded random streams.
//!
//! Every stochastic component draws from a ChaCha8 stream keyed on a
//! `(seed, stream)` pair, so results never depend on evaluation order or on
//! which other components consumed randomness before.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha8Rng;

/// Independent stream `stream` of the generator keyed on `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a named child seed from a parent seed.
pub fn derive_seed(parent: u64, name: &str) -> u64 {
    // FNV-1a over the name, then mixed with the parent.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(parent ^ mix64(h))
}

/// Row-major i.i.d. Gaussian matrix; row `r` is drawn from stream `r`.
pub fn gaussian_matrix(rows: usize, cols: usize, std: f64, seed: u64) -> Array2<f64> {
    let mut out = Array2::zeros((rows, cols));
    for (r, mut row) in out.outer_iter_mut().enumerate() {
        let mut rng = stream_rng(seed, r as u64);
        for v in row.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = std * z;
        }
    }
    out
}

/// Uniform `U(-bound, bound)` matrix, used for layer initialization.
pub fn uniform_matrix(rows: usize, cols: usize, bound: f64, seed: u64) -> Array2<f64> {
    use rand::Rng;
    let mut out = Array2::zeros((rows, cols));
    for (r, mut row) in out.outer_iter_mut().enumerate() {
        let mut rng = stream_rng(seed, r as u64);
        for v in row.iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
    }
    out
}
