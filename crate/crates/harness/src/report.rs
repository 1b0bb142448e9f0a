use std::fs;
use std::path::{Path, PathBuf};

use irrcast::pe::PeMethod;
use serde::Serialize;

use crate::aggregate::CellSummary;
use crate::experiment::CurvePoint;
use crate::probe::{DistanceGapReport, LinearityReport};
use crate::props::PropertyResult;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const PLOTDATA_DIR: &str = "plotdata";
pub const CURVES_FILE: &str = "training_curves.csv";
pub const LINEARITY_FILE: &str = "linearity_probe.csv";
pub const PROPERTY_FILE: &str = "property_matrix.csv";

fn write_rows<T: Serialize>(path: &Path, rows: &[T], headers: &[&str]) -> anyhow::Result<PathBuf> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::WriterBuilder::new().has_headers(!rows.is_empty()).from_path(path)?;
    if rows.is_empty() {
        w.write_record(headers)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(path.to_path_buf())
}

pub fn write_summary(dir: &Path, summaries: &[CellSummary]) -> anyhow::Result<PathBuf> {
    let headers =
        ["pe_method", "missing_rate", "prediction_length", "runs", "mse_mean", "mse_std", "mae_mean", "mae_std"];
    write_rows(&dir.join(SUMMARY_FILE), summaries, &headers)
}

pub fn write_training_curves(dir: &Path, curves: &[CurvePoint]) -> anyhow::Result<PathBuf> {
    let headers =
        ["pe_method", "missing_rate", "prediction_length", "seed", "epoch", "train_loss", "val_mse", "val_mae"];
    write_rows(&dir.join(PLOTDATA_DIR).join(CURVES_FILE), curves, &headers)
}

#[derive(Serialize)]
struct GapRow {
    gap: f64,
    distance: f64,
}

pub fn write_distance_gap(dir: &Path, method: PeMethod, report: &DistanceGapReport) -> anyhow::Result<PathBuf> {
    let rows: Vec<GapRow> = report.pairs.iter().map(|&(gap, distance)| GapRow { gap, distance }).collect();
    let name = format!("distance_gap_{}.csv", method.as_str());
    write_rows(&dir.join(PLOTDATA_DIR).join(name), &rows, &["gap", "distance"])
}

#[derive(Serialize)]
struct LinearityRow {
    dimension: usize,
    r2: f64,
    slope: f64,
}

pub fn write_linearity(dir: &Path, report: &LinearityReport) -> anyhow::Result<PathBuf> {
    let rows: Vec<LinearityRow> = report
        .r2
        .iter()
        .zip(&report.slopes)
        .enumerate()
        .map(|(dimension, (&r2, &slope))| LinearityRow { dimension, r2, slope })
        .collect();
    write_rows(&dir.join(PLOTDATA_DIR).join(LINEARITY_FILE), &rows, &["dimension", "r2", "slope"])
}

#[derive(Serialize)]
struct PropertyRow<'a> {
    pe_method: PeMethod,
    seed: u64,
    property: &'a str,
    outcome: &'a str,
    witness: &'a str,
}

pub fn write_property_matrix(dir: &Path, results: &[PropertyResult]) -> anyhow::Result<PathBuf> {
    let rows: Vec<PropertyRow> = results
        .iter()
        .map(|r| PropertyRow {
            pe_method: r.pe_method,
            seed: r.seed,
            property: r.property.as_str(),
            outcome: r.outcome.label(),
            witness: r.outcome.witness(),
        })
        .collect();
    write_rows(&dir.join(PROPERTY_FILE), &rows, &["pe_method", "seed", "property", "outcome", "witness"])
}
