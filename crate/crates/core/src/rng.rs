//! Seedable, splittable randomness.
//!
//! Every stochastic operation in this crate takes an explicit ChaCha stream,
//! so any experiment replays exactly from its seed. Independent streams are
//! derived from a run seed either by index ([`substream`]) or by a stable
//! label hash ([`named_stream`]); chains, examples, and training phases each
//! get their own stream.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

pub type Stream = ChaCha8Rng;

pub fn seeded(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream `index` of the generator family identified by `seed`.
pub fn substream(seed: u64, index: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Stream selected by a stable label, for separating phases of a run
/// ("sampling", "init", ...) without coordinating indices.
pub fn named_stream(seed: u64, label: &str) -> Stream {
    substream(seed, fnv1a(label.as_bytes()))
}

/// FNV-1a; hand-rolled so stream ids never depend on std hasher internals.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Tensor of iid N(0, 1) draws.
pub fn normal_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| standard_normal(rng)).collect();
    Tensor::new(shape.to_vec(), values).expect("normal draws are finite")
}

/// Tensor of iid uniform draws on [lo, hi).
pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), values).expect("uniform draws are finite")
}
