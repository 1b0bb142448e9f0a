use std::path::Path;

use chrono::NaiveDateTime;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::features::epoch_seconds;
use crate::error::{Error, Result};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// Timestamped multivariate observations; any entry may be missing.
#[derive(Debug, Clone, PartialEq)]
pub struct IrregularSeries {
    timestamps: Vec<NaiveDateTime>,
    values: Vec<Vec<Option<f64>>>,
    variable_names: Vec<String>,
}

impl IrregularSeries {
    pub fn new(
        timestamps: Vec<NaiveDateTime>,
        values: Vec<Vec<Option<f64>>>,
        variable_names: Vec<String>,
    ) -> Result<Self> {
        if timestamps.len() != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} timestamps but {} value rows",
                timestamps.len(),
                values.len()
            )));
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::NonMonotonicTimestamps { index: i + 1 });
        }
        if let Some(row) = values.iter().find(|r| r.len() != variable_names.len()) {
            return Err(Error::ShapeMismatch(format!(
                "row with {} values for {} variables",
                row.len(),
                variable_names.len()
            )));
        }
        Ok(Self { timestamps, values, variable_names })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_vars(&self) -> usize {
        self.variable_names.len()
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn values(&self) -> &[Vec<Option<f64>>] {
        &self.values
    }

    pub fn variable_names(&self) -> &[String] {
        &self.variable_names
    }

    pub fn epoch_seconds(&self) -> Vec<f64> {
        self.timestamps.iter().map(|&t| epoch_seconds(t)).collect()
    }

    /// Contiguous sub-series `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            timestamps: self.timestamps[start..end].to_vec(),
            values: self.values[start..end].to_vec(),
            variable_names: self.variable_names.clone(),
        }
    }

    /// Median spacing between consecutive observations, in seconds.
    pub fn median_gap_seconds(&self) -> Option<f64> {
        let secs = self.epoch_seconds();
        let mut gaps: Vec<f64> = secs.windows(2).map(|w| w[1] - w[0]).collect();
        if gaps.is_empty() {
            return None;
        }
        gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mid = gaps.len() / 2;
        Some(if gaps.len() % 2 == 0 { 0.5 * (gaps[mid - 1] + gaps[mid]) } else { gaps[mid] })
    }

    /// Smallest spacing between consecutive observations, in seconds.
    pub fn min_gap_seconds(&self) -> Option<f64> {
        self.epoch_seconds().windows(2).map(|w| w[1] - w[0]).reduce(f64::min)
    }

    /// Applies `f(variable, value)` to every observed entry.
    pub fn map_values(&self, f: impl Fn(usize, f64) -> f64) -> Self {
        let values = self
            .values
            .iter()
            .map(|row| row.iter().enumerate().map(|(v, x)| x.map(|x| f(v, x))).collect())
            .collect();
        Self { timestamps: self.timestamps.clone(), values, variable_names: self.variable_names.clone() }
    }
}

/// Reads a CSV whose first column `date` holds `YYYY-MM-DD HH:MM:SS`
/// timestamps and whose remaining columns are numeric; empty cells are nulls.
/// Rows are sorted by timestamp; repeated timestamps are rejected.
pub fn load_csv(path: impl AsRef<Path>) -> Result<IrregularSeries> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() || headers.get(0).map(str::trim) != Some("date") {
        return Err(Error::Parse { row: 1, message: "first column must be named `date`".into() });
    }
    let names: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
    let mut rows: Vec<(NaiveDateTime, Vec<Option<f64>>)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // header is row 1
        let row = i + 2;
        let record = record.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        if record.len() != names.len() + 1 {
            return Err(Error::Parse {
                row,
                message: format!("expected {} fields, found {}", names.len() + 1, record.len()),
            });
        }
        let ts = NaiveDateTime::parse_from_str(record[0].trim(), TIMESTAMP_FORMAT)
            .map_err(|e| Error::Parse { row, message: format!("timestamp `{}`: {e}", &record[0]) })?;
        let mut vals = Vec::with_capacity(names.len());
        for field in record.iter().skip(1) {
            let field = field.trim();
            if field.is_empty() {
                vals.push(None);
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|_| Error::Parse { row, message: format!("not a number: `{field}`") })?;
                vals.push(Some(v));
            }
        }
        rows.push((ts, vals));
    }
    rows.sort_by_key(|(t, _)| *t);
    let (timestamps, values) = rows.into_iter().unzip();
    IrregularSeries::new(timestamps, values, names)
}

/// Removes `⌊rate·len⌋` whole observations uniformly at random, never the
/// first or last one.
pub fn drop_random(series: &IrregularSeries, missing_rate: f64, seed: u64) -> Result<IrregularSeries> {
    if !(0.0..1.0).contains(&missing_rate) {
        return Err(Error::RateOutOfRange(missing_rate));
    }
    let n = series.len();
    if n < 2 {
        return Err(Error::SeriesTooShort { needed: 2, available: n });
    }
    let interior = n - 2;
    let count = ((missing_rate * n as f64).floor() as usize).min(interior);
    if count == 0 {
        return Ok(series.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drop = vec![false; n];
    for k in rand::seq::index::sample(&mut rng, interior, count) {
        drop[k + 1] = true;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| !drop[i]).collect();
    Ok(IrregularSeries {
        timestamps: keep.iter().map(|&i| series.timestamps[i]).collect(),
        values: keep.iter().map(|&i| series.values[i].clone()).collect(),
        variable_names: series.variable_names.clone(),
    })
}

/// Contiguous train/validation/test split by observation count.
pub fn split_chronological(
    series: &IrregularSeries,
    fractions: [f64; 3],
) -> Result<(IrregularSeries, IrregularSeries, IrregularSeries)> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::BadFractions(format!("{fractions:?} outside [0, 1]")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::BadFractions(format!("{fractions:?} sum to {total}")));
    }
    let n = series.len();
    let a = ((fractions[0] * n as f64).round() as usize).min(n);
    let b = (((fractions[0] + fractions[1]) * n as f64).round() as usize).clamp(a, n);
    Ok((series.slice(0, a), series.slice(a, b), series.slice(b, n)))
}

/// Per-variable affine standardization fitted on observed entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(series: &IrregularSeries) -> Result<Self> {
        let l = series.n_vars();
        let mut mean = vec![0.0; l];
        let mut std = vec![0.0; l];
        for v in 0..l {
            let obs: Vec<f64> = series.values.iter().filter_map(|r| r[v]).collect();
            if obs.is_empty() {
                return Err(Error::AllNullVariable(v));
            }
            let m = obs.iter().sum::<f64>() / obs.len() as f64;
            let var = obs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / obs.len() as f64;
            mean[v] = m;
            std[v] = var.sqrt().max(1e-8);
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, series: &IrregularSeries) -> IrregularSeries {
        series.map_values(|v, x| (x - self.mean[v]) / self.std[v])
    }
}
