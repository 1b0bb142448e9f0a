use irrcast::pe::PeMethod;
use irrcast::Error;
use log::warn;
use serde::{Deserialize, Serialize};

use crate::experiment::{cell_groups, ResultRow};

/// Mean and population standard deviation over the seeds of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub pe_method: PeMethod,
    pub missing_rate: f64,
    pub prediction_length: usize,
    pub runs: usize,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
}

pub fn mean_std(xs: &[f64]) -> Result<(f64, f64), Error> {
    if xs.is_empty() {
        return Err(Error::EmptyCell);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Summarizes the successful rows of one cell.
pub fn summarize_cell(rows: &[&ResultRow]) -> Result<CellSummary, Error> {
    let ok: Vec<&&ResultRow> = rows.iter().filter(|r| r.mse.is_some() && r.mae.is_some()).collect();
    let first = ok.first().ok_or(Error::EmptyCell)?;
    let mse: Vec<f64> = ok.iter().filter_map(|r| r.mse).collect();
    let mae: Vec<f64> = ok.iter().filter_map(|r| r.mae).collect();
    let (mse_mean, mse_std) = mean_std(&mse)?;
    let (mae_mean, mae_std) = mean_std(&mae)?;
    Ok(CellSummary {
        pe_method: first.pe_method,
        missing_rate: first.missing_rate,
        prediction_length: first.prediction_length,
        runs: ok.len(),
        mse_mean,
        mse_std,
        mae_mean,
        mae_std,
    })
}

/// One summary per `(method, rate, length)` cell with at least one
/// successful row, in first-seen order.
pub fn aggregate(rows: &[ResultRow]) -> Vec<CellSummary> {
    let mut out = Vec::new();
    for (method, rate, len) in cell_groups(rows) {
        let cell: Vec<&ResultRow> = rows
            .iter()
            .filter(|r| r.pe_method == method && r.missing_rate.to_bits() == rate.to_bits() && r.prediction_length == len)
            .collect();
        match summarize_cell(&cell) {
            Ok(s) => out.push(s),
            Err(e) => warn!("{method} rate {rate} len {len}: {e}"),
        }
    }
    out
}

/// Table-style rendering: `mean (±std)` per metric.
pub fn format_table(summaries: &[CellSummary]) -> String {
    let mut s = format!("{:<16} {:>6} {:>5} {:>22} {:>22}\n", "method", "rate", "len", "MSE", "MAE");
    for c in summaries {
        s.push_str(&format!(
            "{:<16} {:>6.2} {:>5} {:>22} {:>22}\n",
            c.pe_method.as_str(),
            c.missing_rate,
            c.prediction_length,
            format!("{:.3} (±{:.3})", c.mse_mean, c.mse_std),
            format!("{:.3} (±{:.3})", c.mae_mean, c.mae_std),
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: PeMethod, seed: u64, mse: Option<f64>) -> ResultRow {
        ResultRow {
            pe_method: method,
            missing_rate: 0.4,
            prediction_length: 24,
            seed,
            split: "test".into(),
            mse,
            mae: mse.map(f64::sqrt),
            wall_time_seconds: 0.0,
            error: if mse.is_none() { Some("boom".into()) } else { None },
        }
    }

    #[test]
    fn examples() {
        let s = aggregate(&[row(PeMethod::Ctlpe, 0, Some(0.3))]);
        assert_eq!(s[0].mse_std, 0.0);
        let s = aggregate(&[row(PeMethod::Ctlpe, 0, Some(0.3)), row(PeMethod::Ctlpe, 1, Some(0.5))]);
        assert!((s[0].mse_mean - 0.4).abs() < 1e-15);
        assert!((s[0].mse_std - 0.1).abs() < 1e-15);
        assert_eq!(s[0].runs, 2);
        assert!(matches!(summarize_cell(&[]), Err(Error::EmptyCell)));
        assert!(matches!(summarize_cell(&[&row(PeMethod::Ctlpe, 0, None)]), Err(Error::EmptyCell)));
    }

    #[test]
    fn error_rows_are_skipped_and_cells_counted() {
        let rows = vec![
            row(PeMethod::Ctlpe, 0, Some(0.3)),
            row(PeMethod::Ctlpe, 1, None),
            row(PeMethod::SimpleOverlap, 0, Some(0.6)),
            row(PeMethod::Simple, 0, None),
        ];
        let s = aggregate(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].runs, 1);
        assert!(format_table(&s).contains("0.300 (±0.000)"));
    }
}
