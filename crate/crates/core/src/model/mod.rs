//! Effect-prediction encoder-decoder: network, losses, training and
//! checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
pub mod matrix;
pub mod network;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{Precision, Scalar};

pub use loss::{mse_loss, nll_loss, nt_xent_loss, total_loss};
pub use matrix::Matrix;
pub use network::{Batch, DropoutMasks, EffectModel, HeadMode, LossParts, Mode, Params};
pub use train::{train_epochs, Optimizer, OptimizerKind, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_width: usize,
    /// Linear layers per encoder (the last one is the tanh code layer);
    /// ReLU layers in the decoder.
    pub hidden_layers: usize,
    pub object_code_bits: usize,
    pub action_code_bits: usize,
    pub dropout_rate: f64,
    /// NT-Xent temperature.
    pub temperature: f64,
    /// λ in `λ (head + NT-Xent)`.
    pub loss_coefficient: f64,
    /// Feed binarized codes to the decoder with a straight-through gradient.
    pub straight_through: bool,
    pub batch_norm_momentum: f64,
    pub precision: Precision,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_width: 128,
            hidden_layers: 4,
            object_code_bits: 2,
            action_code_bits: 3,
            dropout_rate: 0.1,
            temperature: 0.5,
            loss_coefficient: 0.01,
            straight_through: false,
            batch_norm_momentum: 0.1,
            precision: Precision::F32,
            train: TrainConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden_width == 0 || self.hidden_layers == 0 {
            return fail("model.hidden_width and model.hidden_layers must be >= 1".into());
        }
        if self.object_code_bits == 0 || self.action_code_bits == 0 {
            return fail("model code widths must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("model.dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("model.temperature must be > 0, got {}", self.temperature));
        }
        if !(self.loss_coefficient > 0.0 && self.loss_coefficient.is_finite()) {
            return fail(format!(
                "model.loss_coefficient must be > 0, got {}",
                self.loss_coefficient
            ));
        }
        if !(0.0..=1.0).contains(&self.batch_norm_momentum) {
            return fail("model.batch_norm_momentum must be in [0, 1]".into());
        }
        self.train.validate()
    }

    /// Width of the concatenated `[z_o, z_a]`.
    pub fn code_width(&self) -> usize {
        self.object_code_bits + self.action_code_bits
    }
}

/// Encoder output, each component in `(-1, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub(crate) fn from_scalars<T: Scalar>(row: &[T]) -> Self {
        Self {
            values: row.iter().map(|v| v.to_f64_lossy()).collect(),
        }
    }
}

/// Three independent Gaussians over the displacement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectDist {
    pub mean: [f64; 3],
    /// Already clamped to the supported range.
    pub log_var: [f64; 3],
}

impl EffectDist {
    pub fn variance(&self) -> [f64; 3] {
        self.log_var.map(f64::exp)
    }
}
