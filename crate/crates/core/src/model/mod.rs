//! Encoder-decoder transformer forecaster with pluggable positional embeddings.

mod batch;
mod checkpoint;
mod forecaster;
mod layers;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ncde::{ControlPath, DEFAULT_SUBSTEPS};
use crate::pe::{PeMethod, PeMethodConfig};

pub use batch::ForecastBatch;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forecaster::{Forecaster, PeLayer};
pub use layers::{
    causal_mask, cross_attention, decoder_forward, encoder_forward, self_attention, token_input, DecoderLayer,
    EncoderLayer, FeedForward, LayerNorm, Linear, MultiHeadAttention, TokenEmbedding, LAYER_NORM_EPS,
};
pub use train::{
    evaluate, masked_mae, masked_mse, mse_loss, ncde_pe_train_single_epoch, train, EarlyStopping, EpochLog,
    NcdeEpochLog, StopDecision, TrainConfig, TrainingLog,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NcdeTrainMode {
    /// One joint pass, then frozen and served from a table.
    SingleEpoch,
    /// Integrated and trained in every step.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NcdeConfig {
    pub train_mode: NcdeTrainMode,
    pub substeps: usize,
    pub path: ControlPath,
    /// Table grid step in relative time; a quarter of the median gap when unset.
    pub table_resolution: Option<f64>,
}

impl Default for NcdeConfig {
    fn default() -> Self {
        Self { train_mode: NcdeTrainMode::SingleEpoch, substeps: DEFAULT_SUBSTEPS, path: ControlPath::TimeOnly, table_resolution: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub feedforward_width: usize,
    pub label_len: usize,
    pub dropout_rate: f64,
    /// `None` builds a model without positional information.
    pub pe: Option<PeMethodConfig>,
    #[serde(default)]
    pub ncde: NcdeConfig,
}

impl ModelConfig {
    /// Desk-scale defaults for a lookback of `n_past` steps.
    pub fn desk(pe: Option<PeMethodConfig>, n_past: usize) -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            encoder_depth: 2,
            decoder_depth: 1,
            feedforward_width: 64,
            label_len: n_past / 2,
            dropout_rate: 0.05,
            pe,
            ncde: NcdeConfig::default(),
        }
    }

    pub fn pe_method(&self) -> Option<PeMethod> {
        self.pe.as_ref().map(|p| p.method)
    }

    pub fn validate(&self, n_past: usize) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!("{} heads do not divide d_model {}", self.n_heads, self.d_model)));
        }
        if self.feedforward_width == 0 {
            return Err(Error::InvalidConfig("feedforward_width must be positive".into()));
        }
        if self.label_len > n_past {
            return Err(Error::InvalidConfig(format!("label_len {} exceeds lookback {n_past}", self.label_len)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if let Some(pe) = &self.pe {
            if pe.d_model != self.d_model {
                return Err(Error::InvalidConfig(format!("pe d_model {} differs from model d_model {}", pe.d_model, self.d_model)));
            }
            pe.validate()?;
        }
        if self.ncde.substeps == 0 {
            return Err(Error::InvalidConfig("ncde substeps must be positive".into()));
        }
        if self.ncde.table_resolution.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::InvalidConfig("ncde table_resolution must be positive".into()));
        }
        if self.pe_method() == Some(PeMethod::Ncde)
            && self.ncde.train_mode == NcdeTrainMode::SingleEpoch
            && self.ncde.path != ControlPath::TimeOnly
        {
            return Err(Error::InvalidConfig("single_epoch ncde needs the time_only control path".into()));
        }
        Ok(())
    }
}
