//! Deterministic RNG substreams.
//!
//! Every random draw in the workspace comes from a ChaCha8 stream keyed by
//! `sha256(master_seed || label || index)`. Streams are independent of each
//! other and of evaluation order, which is what lets parallel maps hand one
//! substream to each item and still produce bit-identical output serially.

use crate::elem::Elem;
use ndarray::ArrayD;
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// Derive the ChaCha key for `(seed, label, index)`.
pub fn substream_key(seed: u64, label: &str, index: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([0u8]);
    h.update(label.as_bytes());
    h.update([0u8]);
    h.update(index.to_le_bytes());
    h.finalize().into()
}

/// A fresh RNG for one labeled substream.
pub fn substream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(substream_key(seed, label, index))
}

/// Standard normal draw as f64 (so f32 and f64 graphs consume the same
/// stream), converted to the requested element type.
pub fn normal<E: Elem>(rng: &mut ChaCha8Rng) -> E {
    let v: f64 = StandardNormal.sample(rng);
    E::from_f64(v)
}

/// Array of i.i.d. standard normals.
pub fn normal_array<E: Elem>(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<E> {
    let n: usize = shape.iter().product();
    let data: Vec<E> = (0..n).map(|_| normal::<E>(rng)).collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).expect("shape/product mismatch")
}

/// Uniform in [0, 1).
pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    rng.random::<f64>()
}

/// Uniform integer in [0, n).
pub fn uniform_usize(rng: &mut ChaCha8Rng, n: usize) -> usize {
    assert!(n > 0, "uniform_usize over empty range");
    rng.random_range(0..n)
}
