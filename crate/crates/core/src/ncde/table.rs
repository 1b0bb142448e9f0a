use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use super::solver::{cde_solve, NcdeParams};
use super::spline::natural_cubic_spline;
use super::reference_knot;
use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::error::{Error, Result};

const HEADER: &str = "ctlpe-petable v1";

/// NCDE hidden states cached on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PETable {
    pub t_start: f64,
    pub t_end: f64,
    pub resolution: f64,
    /// `[grid count, w]`
    pub values: Tensor,
}

impl PETable {
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn grid_time(&self, k: usize) -> f64 {
        self.t_start + k as f64 * self.resolution
    }

    pub fn grid_times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.grid_time(k)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "{HEADER} {:.16e} {:.16e} {:.16e} {}", self.resolution, self.t_start, self.t_end, self.width())
            .unwrap();
        for k in 0..self.len() {
            write!(out, "{:.16e}", self.grid_time(k)).unwrap();
            for v in self.values.row(k) {
                write!(out, " {v:.16e}").unwrap();
            }
            out.push('\n');
        }
        std::fs::File::create(path)?.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = file.lines();
        let bad = |row: usize, message: String| Error::Parse { row, message };
        let header = lines.next().ok_or_else(|| bad(1, "empty table file".into()))??;
        let rest = header.strip_prefix(HEADER).ok_or_else(|| bad(1, format!("expected `{HEADER}` header")))?;
        let fields: Vec<&str> = rest.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(bad(1, "header needs resolution, t_start, t_end and width".into()));
        }
        let num = |s: &str, row: usize| s.parse::<f64>().map_err(|_| bad(row, format!("not a number: `{s}`")));
        let resolution = num(fields[0], 1)?;
        let t_start = num(fields[1], 1)?;
        let t_end = num(fields[2], 1)?;
        let w: usize = fields[3].parse().map_err(|_| bad(1, format!("bad width `{}`", fields[3])))?;
        let mut data = Vec::new();
        let mut n = 0;
        for (i, line) in lines.enumerate() {
            let row = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals = line.split_whitespace().map(|s| num(s, row)).collect::<Result<Vec<_>>>()?;
            if vals.len() != w + 1 {
                return Err(bad(row, format!("expected {} numbers, found {}", w + 1, vals.len())));
            }
            let expect = t_start + n as f64 * resolution;
            if (vals[0] - expect).abs() > 1e-9 * (1.0 + expect.abs()) {
                return Err(bad(row, format!("grid time {} breaks the uniform step", vals[0])));
            }
            data.extend_from_slice(&vals[1..]);
            n += 1;
        }
        if n == 0 {
            return Err(bad(2, "table has no entries".into()));
        }
        Ok(Self { t_start, t_end, resolution, values: Tensor::from_vec(&[n, w], data)? })
    }
}

/// Integrates the reference time path once across `[t_start, t_end]` and
/// records the hidden state at every grid time.
pub fn pe_table_build(
    store: &ParamStore,
    params: &NcdeParams,
    span: (f64, f64),
    resolution: f64,
    substeps: usize,
) -> Result<PETable> {
    let (t_start, t_end) = span;
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::InvalidConfig(format!("table resolution must be positive, got {resolution}")));
    }
    if !(t_start.is_finite() && t_end.is_finite() && t_start <= t_end) {
        return Err(Error::InvalidConfig(format!("bad table span ({t_start}, {t_end})")));
    }
    let count = ((t_end - t_start) / resolution - 1e-9).ceil().max(0.0) as usize + 1;
    let times: Vec<f64> = (0..count).map(|k| t_start + k as f64 * resolution).collect();
    let knots: Vec<Vec<f64>> = times.iter().map(|&t| reference_knot(t, params.channels)).collect();
    let mut tape = Tape::new();
    let d0 = tape.constant(Tensor::from_vec(&[1, params.channels], knots[0].clone())?);
    let p0 = params.initial_state(&mut tape, store, d0)?;
    let w = params.hidden_width;
    let values = if count == 1 {
        tape.value(p0).clone()
    } else {
        let path = natural_cubic_spline(&times, &knots)?;
        let states = cde_solve(&mut tape, store, params, &[path], p0, &[times.clone()], substeps)?;
        let data = states.iter().flat_map(|&s| tape.value(s).data().to_vec()).collect();
        Tensor::from_vec(&[count, w], data)?
    };
    Ok(PETable { t_start, t_end, resolution, values })
}

/// Linear interpolation between bracketing grid entries, clamped at the ends.
pub fn pe_table_lookup(table: &PETable, t: f64) -> Vec<f64> {
    let n = table.len();
    if n == 1 || t <= table.t_start {
        return table.values.row(0).to_vec();
    }
    let pos = (t - table.t_start) / table.resolution;
    if pos >= (n - 1) as f64 {
        return table.values.row(n - 1).to_vec();
    }
    let k = pos.floor() as usize;
    let frac = pos - k as f64;
    let (a, b) = (table.values.row(k), table.values.row(k + 1));
    a.iter().zip(b).map(|(x, y)| x + frac * (y - x)).collect()
}
