//! Criterion benchmarks for `relsync-core`; see `benches/`. This library only
//! holds the fixtures they share.

pub use relsync_core::{ArrayModel, Designer, Loop, Mat, SynthParams, ThresholdSearch, Vector};

use relsync_core::scenario::{gen_random, Topology};

/// Certified ring array with `q` agents of dimension `n` and scalar couplings.
pub fn ring_model(q: usize, n: usize, seed: u64) -> ArrayModel {
    let spec = gen_random(q, n, Topology::Ring, 1, 1, 0.8, seed).expect("generator certifies");
    ArrayModel::new(spec).expect("valid spec")
}

/// Dense test matrix with entries in `[-1, 1]`, scaled to Frobenius norm `norm`.
pub fn dense(dim: usize, norm: f64) -> Mat {
    let m = Mat::from_fn(dim, dim, |i, j| {
        (((i * 31 + j * 17) % 23) as f64 / 11.0) - 1.0
    });
    let f = m.norm();
    m * (norm / f)
}

/// Deterministic non-synchronized initial state.
pub fn spread_state(dim: usize) -> Vector {
    Vector::from_fn(dim, |i, _| ((i * 7 + 3) % 5) as f64 - 2.0)
}
