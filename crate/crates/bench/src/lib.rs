//! Fixtures shared by the benchmarks.

use sadepth_core::data::{generate_synthetic, SyntheticScene, SyntheticSequence, TrainingTriplet};
use sadepth_core::{Shape, Tensor};

/// Deterministic smooth texture of shape `[n, c, h, w]`.
pub fn texture(n: usize, c: usize, h: usize, w: usize, phase: f64) -> Tensor {
    Tensor::from_fn(Shape::new(n, c, h, w), |b, ch, y, x| {
        0.5 + 0.4 * ((x as f64 + phase) * 0.31 + y as f64 * 0.17 + (b + ch) as f64).sin()
    })
}

/// The default synthetic scene at desk resolution.
pub fn desk_sequence() -> SyntheticSequence {
    generate_synthetic(&SyntheticScene::default()).expect("default scene is valid")
}

/// Consecutive frame triplets centred on `centres`.
pub fn triplets(seq: &SyntheticSequence, centres: &[usize]) -> Vec<TrainingTriplet> {
    centres
        .iter()
        .map(|&i| TrainingTriplet {
            frames: [seq.frames[i - 1].clone(), seq.frames[i].clone(), seq.frames[i + 1].clone()],
            intrinsics: seq.intrinsics,
            sequence: "bench".into(),
            index: i,
        })
        .collect()
}
