//! Shared fixtures for the criterion benchmarks.

use relvox_core::net::{build, NetworkParams, NetworkSpec};
use relvox_core::Tensor;

/// Deterministic pseudo-random volumes in [0, 1] for a spec.
pub fn fixture_volumes(spec: &NetworkSpec, salt: u64) -> Vec<Tensor<f32>> {
    let [d, h, w] = spec.input_extents;
    (0..spec.paths)
        .map(|p| {
            Tensor::from_fn(vec![1, d, h, w], |i| {
                let x = (i as u64)
                    .wrapping_mul(6_364_136_223_846_793_005)
                    .wrapping_add(salt + p as u64);
                ((x >> 33) % 10_000) as f32 / 10_000.0
            })
        })
        .collect()
}

pub fn fixture_net(spec: &NetworkSpec) -> NetworkParams<f32> {
    build(spec, 7).expect("valid spec")
}
