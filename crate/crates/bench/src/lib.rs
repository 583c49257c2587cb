//! Shared fixtures for the criterion benchmarks.

use locc_core::geom::PreprocessMode;
use locc_core::model::{Model, ModelConfig};
use locc_core::synth::{synthetic_intrinsics, synthetic_scan};
use locc_core::CodecConfig;

pub fn bench_model() -> Model {
    Model::new(ModelConfig::tiny(), 0).expect("tiny model")
}

pub fn bench_frame(points: usize) -> Vec<[f64; 3]> {
    let intr = synthetic_intrinsics(16);
    synthetic_scan(1, points, &intr)
}

pub fn bench_config(stages: u16) -> CodecConfig {
    let mut cfg = CodecConfig::new(10, PreprocessMode::Cartesian);
    cfg.stages = stages;
    cfg.window = 256;
    cfg
}
