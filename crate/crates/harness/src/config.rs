use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use irrcast::data::{SynthKind, SynthParams};
use irrcast::model::{ModelConfig, NcdeConfig, TrainConfig};
use irrcast::pe::{PeMethod, PeMethodConfig};
use serde::{Deserialize, Serialize};

/// Where the series comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic {
        generator: SynthKind,
        length: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        params: SynthParams,
    },
    Csv {
        path: PathBuf,
    },
}

impl DatasetSpec {
    pub fn name(&self) -> String {
        match self {
            DatasetSpec::Synthetic { generator, .. } => generator.to_string(),
            DatasetSpec::Csv { path } => path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        }
    }
}

/// A positional embedding to sweep. Fields left unset are derived from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PeSpec {
    Name(PeMethod),
    Full {
        method: PeMethod,
        #[serde(default)]
        grid_resolution: Option<f64>,
        #[serde(default)]
        max_len: Option<usize>,
        #[serde(default)]
        time_scale: Option<f64>,
    },
}

impl PeSpec {
    pub fn method(&self) -> PeMethod {
        match self {
            PeSpec::Name(m) | PeSpec::Full { method: m, .. } => *m,
        }
    }

    /// Resolves the embedding for `d_model`, filling required fields from
    /// the observed median gap (seconds) and longest window (in gaps).
    pub fn resolve(&self, d_model: usize, window_len: usize, median_gap: f64, max_span_gaps: usize) -> PeMethodConfig {
        let (method, grid, max_len, scale) = match *self {
            PeSpec::Name(m) => (m, None, None, None),
            PeSpec::Full { method, grid_resolution, max_len, time_scale } => (method, grid_resolution, max_len, time_scale),
        };
        let mut cfg = PeMethodConfig::with_defaults(method, d_model, window_len, median_gap, 1.0 / median_gap);
        if method.needs_grid() {
            let res = grid.unwrap_or(median_gap);
            cfg.grid_resolution = Some(res);
            cfg.max_len = Some(max_len.unwrap_or(((max_span_gaps as f64 * median_gap) / res).ceil() as usize + 1));
        } else if method.needs_max_len() {
            cfg.max_len = Some(max_len.unwrap_or(window_len));
        }
        if method.needs_time_scale() {
            cfg.time_scale = Some(scale.unwrap_or(1.0 / median_gap));
        }
        cfg
    }
}

/// Architecture shared by every swept embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub feedforward_width: usize,
    /// Half the lookback when unset.
    pub label_len: Option<usize>,
    pub dropout_rate: f64,
    pub ncde: NcdeConfig,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let m = ModelConfig::desk(None, 2);
        Self {
            d_model: m.d_model,
            n_heads: m.n_heads,
            encoder_depth: m.encoder_depth,
            decoder_depth: m.decoder_depth,
            feedforward_width: m.feedforward_width,
            label_len: None,
            dropout_rate: m.dropout_rate,
            ncde: NcdeConfig::default(),
        }
    }
}

impl ModelSettings {
    pub fn model_config(&self, pe: Option<PeMethodConfig>, n_past: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            encoder_depth: self.encoder_depth,
            decoder_depth: self.decoder_depth,
            feedforward_width: self.feedforward_width,
            label_len: self.label_len.unwrap_or(n_past / 2),
            dropout_rate: self.dropout_rate,
            pe,
            ncde: self.ncde.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// Lookback length N.
    pub n_past: usize,
    /// Prediction lengths M to sweep.
    pub prediction_lengths: Vec<usize>,
    pub missing_rates: Vec<f64>,
    pub pe_methods: Vec<PeSpec>,
    pub seeds: Vec<u64>,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub stride: usize,
    pub model: ModelSettings,
    pub training: TrainConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::Synthetic {
                generator: SynthKind::SineMixture,
                length: 2000,
                seed: 0,
                params: SynthParams::default(),
            },
            n_past: 48,
            prediction_lengths: vec![24, 48],
            missing_rates: vec![0.0, 0.2, 0.4, 0.6],
            pe_methods: vec![
                PeSpec::Name(PeMethod::Ctlpe),
                PeSpec::Name(PeMethod::SimpleOverlap),
                PeSpec::Name(PeMethod::IrrSinusoidal),
            ],
            seeds: vec![0, 1, 2],
            split: [0.7, 0.1, 0.2],
            stride: 1,
            model: ModelSettings::default(),
            training: TrainConfig::default(),
            output_dir: PathBuf::from("irrcast-out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds must be nonempty");
        }
        if let Some(r) = self.missing_rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            bail!("missing rate {r} outside [0, 1)");
        }
        if self.n_past == 0 || self.prediction_lengths.iter().any(|&m| m == 0) {
            bail!("window lengths must be positive");
        }
        if self.stride == 0 {
            bail!("stride must be positive");
        }
        if self.pe_methods.is_empty() {
            bail!("pe_methods must be nonempty");
        }
        let probe = self.model.model_config(None, self.n_past);
        probe.validate(self.n_past)?;
        Ok(())
    }
}
