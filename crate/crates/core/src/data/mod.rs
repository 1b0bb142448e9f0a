//! Series ingestion, irregularization, windowing and instance normalization.

mod features;
mod revin;
mod series;
mod synth;
mod window;

pub use features::{epoch_seconds, from_epoch_seconds, time_features, TimeFeatureVector, TIME_FEATURE_DIM};
pub use revin::{revin_apply, revin_denormalize, revin_normalize, RevinStats, REVIN_EPS};
pub use series::{drop_random, load_csv, split_chronological, IrregularSeries, Standardizer, TIMESTAMP_FORMAT};
pub use synth::{synth_generate, SynthKind, SynthParams};
pub use window::{make_windows, Observation, WindowPair};
