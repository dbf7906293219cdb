//! The two shipped configurations. `configs/*.toml` in the repository root
//! mirror these values; a CLI test keeps them in sync.

use crate::model::{EncoderConfig, ModelConfig, NerConfig, ReConfig};
use crate::train::TrainConfig;

/// Published hyperparameters at full width.
pub fn paper_faithful() -> (ModelConfig, TrainConfig) {
    (ModelConfig::default(), TrainConfig::default())
}

/// Small encoder and a larger learning rate, for laptop-scale runs.
pub fn desk_scale() -> (ModelConfig, TrainConfig) {
    let model = ModelConfig {
        encoder: EncoderConfig {
            n_layers: 1,
            n_heads: 2,
            model_dim: 32,
            feedforward_dim: 64,
            dropout_rate: 0.1,
            ..EncoderConfig::default()
        },
        ner: NerConfig {
            rnn_layers: 2,
            rnn_hidden_dim: 32,
            ffnn_hidden_dim: 32,
            ..NerConfig::default()
        },
        re: ReConfig {
            hidden_dim: 64,
            ..ReConfig::default()
        },
    };
    let train = TrainConfig {
        learning_rate: 1e-3,
        max_epochs: 40,
        ..TrainConfig::default()
    };
    (model, train)
}
