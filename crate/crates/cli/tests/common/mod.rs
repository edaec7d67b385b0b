#![allow(dead_code)]

use std::path::{Path, PathBuf};

use pvse_core::artifact::save_model;
use pvse_core::dataset::{generate_synthetic, load_dataset, SynthSpec};
use pvse_core::embedding::{FrequencyScope, ModelParams, ModelShape};
use pvse_core::loss::LossConfig;
use pvse_core::train::{train, TrainConfig};

pub fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        images: 48,
        parts: 4,
        tags_per_part: 3,
        abstract_tags: 2,
        sigma: 0.1,
        seed,
        grid_rows: 4,
        grid_cols: 4,
        feature_dim: 8,
        height: 16,
        width: 16,
    }
}

/// Small synthetic dataset and a briefly trained model under `root`.
pub fn fixture(root: &Path) -> (PathBuf, PathBuf) {
    let data_dir = root.join("data");
    let model_dir = root.join("model");
    generate_synthetic(&small_spec(3), &data_dir).unwrap();
    let data = load_dataset(&data_dir).unwrap();
    let dims = data.feature_dims();
    let init = ModelParams::init(
        data.scheme().clone(),
        data.vocab().clone(),
        ModelShape {
            embed_dim: 16,
            feature_dim: dims.dim,
            grid_rows: dims.rows,
            grid_cols: dims.cols,
        },
        FrequencyScope::Dataset,
        0,
    )
    .unwrap();
    let samples = data.training_samples(init.vocab()).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let out = train(&samples, init, &cfg, &LossConfig::default()).unwrap();
    save_model(&out.params, &model_dir).unwrap();
    (data_dir, model_dir)
}
