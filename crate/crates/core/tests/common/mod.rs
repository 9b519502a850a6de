#![allow(dead_code)]

pub mod metric_oracle;

use mca_core::config::{TrainConfig, Variant};
use mca_core::synth::{generate_split, Sample, SceneSpec};

/// Small geometry that trains in well under a second per epoch.
pub fn tiny_config(variant: Variant, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        variant,
        seed,
        batch_size: 4,
        epochs: 2,
        bottleneck: 4,
        ..Default::default()
    };
    cfg.encoder.image_size = 32;
    cfg.encoder.patch_size = 8;
    cfg.encoder.embed_dim = 16;
    cfg.encoder.num_layers = 2;
    cfg.encoder.num_heads = 2;
    cfg.encoder.mlp_ratio = 2;
    cfg
}

pub fn tiny_data(n_train: usize, n_test: usize, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let spec = SceneSpec {
        image_size: 32,
        base_freq: 4,
        ..Default::default()
    };
    generate_split(&spec, n_train, n_test, seed).unwrap()
}

pub fn assert_close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
}
