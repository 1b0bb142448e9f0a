use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use anyhow::Context;
use irrcast::data::{
    drop_random, load_csv, make_windows, split_chronological, synth_generate, IrregularSeries, Standardizer, WindowPair,
};
use irrcast::model::{evaluate, Forecaster, TrainingLog};
use irrcast::pe::PeMethod;
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSpec, ExperimentConfig, PeSpec};

pub const RESULTS_FILE: &str = "results.csv";

/// One evaluated sweep cell. Failed cells carry `error` and no metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub pe_method: PeMethod,
    pub missing_rate: f64,
    pub prediction_length: usize,
    pub seed: u64,
    pub split: String,
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    pub wall_time_seconds: f64,
    pub error: Option<String>,
}

impl ResultRow {
    pub fn key(&self) -> CellKey {
        CellKey { pe_method: self.pe_method, missing_rate: self.missing_rate, prediction_length: self.prediction_length, seed: self.seed }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Identity of a sweep cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellKey {
    pub pe_method: PeMethod,
    pub missing_rate: f64,
    pub prediction_length: usize,
    pub seed: u64,
}

/// Per-epoch training record of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub pe_method: PeMethod,
    pub missing_rate: f64,
    pub prediction_length: usize,
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutput {
    pub rows: Vec<ResultRow>,
    pub curves: Vec<CurvePoint>,
}

/// Windows of one irregularized, standardized series.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<WindowPair>,
    pub val: Vec<WindowPair>,
    pub test: Vec<WindowPair>,
    pub n_vars: usize,
    /// Median gap of the series before dropping, in seconds.
    pub median_gap: f64,
    /// Longest window span measured in median gaps.
    pub max_span_gaps: usize,
}

pub fn load_series(spec: &DatasetSpec) -> anyhow::Result<IrregularSeries> {
    Ok(match spec {
        DatasetSpec::Synthetic { generator, length, seed, params } => synth_generate(*generator, params, *length, *seed)?,
        DatasetSpec::Csv { path } => load_csv(path).with_context(|| format!("loading {}", path.display()))?,
    })
}

/// Irregularizes, splits, standardizes on the training split and windows.
pub fn prepare(
    series: &IrregularSeries,
    config: &ExperimentConfig,
    missing_rate: f64,
    horizon: usize,
    seed: u64,
) -> anyhow::Result<PreparedData> {
    let median_gap = series.median_gap_seconds().context("series needs at least two observations")?;
    let dropped = drop_random(series, missing_rate, seed)?;
    let (train, val, test) = split_chronological(&dropped, config.split)?;
    let scaler = Standardizer::fit(&train)?;
    let window = |s: &IrregularSeries| make_windows(&scaler.apply(s), config.n_past, horizon, config.stride);
    let train = window(&train).context("train split")?;
    let val = window(&val).unwrap_or_default();
    let test = window(&test).context("test split")?;
    let max_span = train.iter().chain(&val).chain(&test).map(|w| w.span_seconds()).fold(0.0, f64::max);
    Ok(PreparedData {
        n_vars: series.n_vars(),
        train,
        val,
        test,
        median_gap,
        max_span_gaps: (max_span / median_gap).ceil() as usize,
    })
}

/// Builds the model for `pe` over prepared data.
pub fn build_model(config: &ExperimentConfig, data: &PreparedData, pe: &PeSpec, horizon: usize, seed: u64) -> anyhow::Result<Forecaster> {
    let pe_cfg = pe.resolve(config.model.d_model, config.n_past + horizon, data.median_gap, data.max_span_gaps);
    let model_cfg = config.model.model_config(Some(pe_cfg), config.n_past);
    Ok(Forecaster::new(model_cfg, data.n_vars, config.n_past, seed)?)
}

/// Trains and tests one cell, returning the test metrics and the training log.
pub fn run_cell(
    series: &IrregularSeries,
    config: &ExperimentConfig,
    pe: &PeSpec,
    missing_rate: f64,
    horizon: usize,
    seed: u64,
) -> anyhow::Result<((f64, f64), TrainingLog)> {
    let data = prepare(series, config, missing_rate, horizon, seed)?;
    let mut model = build_model(config, &data, pe, horizon, seed)?;
    let training = irrcast::model::TrainConfig { seed, ..config.training.clone() };
    let log = irrcast::model::train(&mut model, &data.train, &data.val, &training)?;
    let metrics = evaluate(&model, &data.test, config.training.batch_size)?;
    Ok((metrics, log))
}

/// Every cell in canonical order: method, then missing rate, length and seed.
pub fn cells(config: &ExperimentConfig) -> Vec<(usize, CellKey)> {
    let mut out = Vec::new();
    for (i, pe) in config.pe_methods.iter().enumerate() {
        for &missing_rate in &config.missing_rates {
            for &prediction_length in &config.prediction_lengths {
                for &seed in &config.seeds {
                    out.push((i, CellKey { pe_method: pe.method(), missing_rate, prediction_length, seed }));
                }
            }
        }
    }
    out
}

fn same_cell(a: &CellKey, b: &CellKey) -> bool {
    a.pe_method == b.pe_method
        && a.missing_rate.to_bits() == b.missing_rate.to_bits()
        && a.prediction_length == b.prediction_length
        && a.seed == b.seed
}

pub fn read_results(path: &Path) -> anyhow::Result<Vec<ResultRow>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = reader.deserialize().collect::<Result<Vec<ResultRow>, _>>()?;
    Ok(rows)
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    if rows.is_empty() {
        w.write_record(["pe_method", "missing_rate", "prediction_length", "seed", "split", "mse", "mae", "wall_time_seconds", "error"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every pending cell, appending rows to `results.csv` as they finish so
/// an interrupted sweep resumes where it stopped. The file is rewritten in
/// canonical cell order at the end.
pub fn run_experiment(config: &ExperimentConfig, threads: usize) -> anyhow::Result<SweepOutput> {
    config.validate()?;
    fs::create_dir_all(&config.output_dir)?;
    let path = config.output_dir.join(RESULTS_FILE);
    let mut previous = if path.exists() { read_results(&path)? } else { Vec::new() };
    previous.retain(ResultRow::is_ok);
    let all = cells(config);
    let pending: Vec<(usize, CellKey)> =
        all.iter().filter(|(_, k)| !previous.iter().any(|r| same_cell(&r.key(), k))).copied().collect();
    info!("{} cells, {} already done", all.len(), all.len() - pending.len());
    write_results(&path, &previous)?;

    let series = load_series(&config.dataset)?;
    let file = OpenOptions::new().append(true).open(&path)?;
    let writer = Mutex::new(csv::WriterBuilder::new().has_headers(false).from_writer(file));
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build()?;
    let results: Vec<(ResultRow, Vec<CurvePoint>)> = pool.install(|| {
        pending
            .par_iter()
            .map(|&(i, key)| {
                let start = Instant::now();
                let outcome = run_cell(&series, config, &config.pe_methods[i], key.missing_rate, key.prediction_length, key.seed);
                let wall = start.elapsed().as_secs_f64();
                let (row, curve) = cell_row(key, outcome, wall);
                let mut w = writer.lock().expect("writer lock");
                if let Err(e) = w.serialize(&row).and_then(|_| Ok(w.flush()?)) {
                    warn!("could not append result row: {e}");
                }
                (row, curve)
            })
            .collect()
    });
    drop(writer);

    let mut rows = previous;
    let mut curves = Vec::new();
    for (row, curve) in results {
        rows.push(row);
        curves.extend(curve);
    }
    let rank = |r: &ResultRow| all.iter().position(|(_, k)| same_cell(k, &r.key())).unwrap_or(usize::MAX);
    rows.sort_by_key(rank);
    write_results(&path, &rows)?;
    Ok(SweepOutput { rows, curves })
}

fn cell_row(key: CellKey, outcome: anyhow::Result<((f64, f64), TrainingLog)>, wall: f64) -> (ResultRow, Vec<CurvePoint>) {
    let mut row = ResultRow {
        pe_method: key.pe_method,
        missing_rate: key.missing_rate,
        prediction_length: key.prediction_length,
        seed: key.seed,
        split: "test".into(),
        mse: None,
        mae: None,
        wall_time_seconds: wall,
        error: None,
    };
    match outcome {
        Ok(((mse, mae), log)) => {
            info!("{} rate {} len {} seed {}: mse {mse:.4} mae {mae:.4} ({wall:.1}s)", key.pe_method, key.missing_rate, key.prediction_length, key.seed);
            row.mse = Some(mse);
            row.mae = Some(mae);
            let curve = log
                .epochs
                .iter()
                .map(|e| CurvePoint {
                    pe_method: key.pe_method,
                    missing_rate: key.missing_rate,
                    prediction_length: key.prediction_length,
                    seed: key.seed,
                    epoch: e.epoch,
                    train_loss: e.train_loss,
                    val_mse: e.val_mse,
                    val_mae: e.val_mae,
                })
                .collect();
            (row, curve)
        }
        Err(e) => {
            warn!("{} rate {} len {} seed {} failed: {e:#}", key.pe_method, key.missing_rate, key.prediction_length, key.seed);
            row.error = Some(format!("{e:#}"));
            (row, Vec::new())
        }
    }
}

/// Distinct `(method, rate, length)` cells in first-seen order.
pub fn cell_groups(rows: &[ResultRow]) -> Vec<(PeMethod, f64, usize)> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for r in rows {
        if seen.insert((r.pe_method, r.missing_rate.to_bits(), r.prediction_length)) {
            out.push((r.pe_method, r.missing_rate, r.prediction_length));
        }
    }
    out
}
