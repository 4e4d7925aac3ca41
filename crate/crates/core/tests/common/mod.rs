#![allow(dead_code)]

use drfuse::cli::{DatasetSection, ExperimentConfig};
use drfuse::data::SyntheticConfig;
use drfuse::eval::EvalConfig;
use drfuse::{ModelConfig, TrainConfig};

pub fn small_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        ffn_width: 32,
        conv_channels: vec![4, 8],
        ..ModelConfig::default()
    }
}

pub fn quick_training(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        max_epochs: epochs,
        ..TrainConfig::default()
    }
}

/// A quick experiment on generated data.
pub fn experiment(syn: SyntheticConfig, epochs: usize) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSection {
            synthetic: Some(syn),
            ..DatasetSection::default()
        },
        model: small_model(),
        training: quick_training(epochs),
        eval: EvalConfig {
            bootstrap_iters: 200,
            ..EvalConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

pub fn smoke_experiment(epochs: usize) -> ExperimentConfig {
    experiment(SyntheticConfig::smoke(), epochs)
}
