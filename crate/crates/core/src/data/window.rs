use chrono::NaiveDateTime;

use super::features::{epoch_seconds, time_features, TimeFeatureVector};
use super::series::IrregularSeries;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub timestamp: NaiveDateTime,
    pub features: TimeFeatureVector,
    pub values: Vec<Option<f64>>,
}

/// A lookback window of N observations followed by a target window of M.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub past: Vec<Observation>,
    pub future: Vec<Observation>,
    /// `target_mask[j][v]` is true when future value `v` at step `j` is observed.
    pub target_mask: Vec<Vec<bool>>,
}

impl WindowPair {
    /// Every observation in time order, past then future.
    pub fn all(&self) -> impl Iterator<Item = &Observation> {
        self.past.iter().chain(&self.future)
    }

    pub fn relative_times(&self) -> Vec<f64> {
        self.all().map(|o| o.features.relative_time).collect()
    }

    /// Seconds elapsed since the first past observation.
    pub fn elapsed_seconds(&self) -> Vec<f64> {
        let t0 = epoch_seconds(self.past[0].timestamp);
        self.all().map(|o| epoch_seconds(o.timestamp) - t0).collect()
    }

    pub fn features(&self) -> Vec<TimeFeatureVector> {
        self.all().map(|o| o.features).collect()
    }

    pub fn span_seconds(&self) -> f64 {
        epoch_seconds(self.future.last().unwrap().timestamp) - epoch_seconds(self.past[0].timestamp)
    }
}

/// Slides a window of `n_past + n_future` observations over `series` with
/// the given stride. Time features carry relative time over the combined span.
pub fn make_windows(
    series: &IrregularSeries,
    n_past: usize,
    n_future: usize,
    stride: usize,
) -> Result<Vec<WindowPair>> {
    if n_past == 0 || n_future == 0 || stride == 0 {
        return Err(Error::InvalidConfig("window lengths and stride must be positive".into()));
    }
    let total = n_past + n_future;
    if total > series.len() {
        return Err(Error::SeriesTooShort { needed: total, available: series.len() });
    }
    let ts = series.timestamps();
    let vals = series.values();
    let mut out = Vec::with_capacity((series.len() - total) / stride + 1);
    let mut start = 0;
    while start + total <= series.len() {
        let span = (ts[start], ts[start + total - 1]);
        let obs = (start..start + total)
            .map(|i| {
                Ok(Observation {
                    timestamp: ts[i],
                    features: time_features(ts[i], span)?,
                    values: vals[i].clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let future = obs[n_past..].to_vec();
        let target_mask = future.iter().map(|o| o.values.iter().map(Option::is_some).collect()).collect();
        out.push(WindowPair { past: obs[..n_past].to_vec(), future, target_mask });
        start += stride;
    }
    Ok(out)
}
