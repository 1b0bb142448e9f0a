//! Neural controlled differential equation positional embedding.

mod solver;
mod spline;
mod table;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::data::TIME_FEATURE_DIM;
use crate::error::{Error, Result};
use crate::pe::{PeInput, PeMethod, PositionalEmbedding};

pub use solver::{cde_solve, rk4_cde, NcdeParams, DIVERGENCE_LIMIT, FIELD_HIDDEN};
pub use spline::{natural_cubic_spline, spline_derivative, spline_eval, SplinePath};
pub use table::{pe_table_build, pe_table_lookup, PETable};

pub const DEFAULT_SUBSTEPS: usize = 4;

/// Knot vector of the reference path: time in the first channel, zeros elsewhere.
pub fn reference_knot(t: f64, channels: usize) -> Vec<f64> {
    let mut v = vec![0.0; channels];
    v[0] = t;
    v
}

/// Knot times and channel values of one window's control path.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlKnots {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

/// Hidden states at every knot of every window, `[B, L, w]`. The initial
/// state is `zeta` of the first knot's channel vector.
pub fn ncde_pe_forward(
    tape: &mut Tape,
    store: &ParamStore,
    params: &NcdeParams,
    windows: &[ControlKnots],
    substeps: usize,
) -> Result<Var> {
    let batch = windows.len();
    if batch == 0 {
        return Err(Error::EmptyDataset);
    }
    let len = windows[0].times.len();
    if windows.iter().any(|w| w.times.len() != len) {
        return Err(Error::ShapeMismatch("windows differ in length".into()));
    }
    let paths = windows.iter().map(|w| natural_cubic_spline(&w.times, &w.values)).collect::<Result<Vec<_>>>()?;
    let d0: Vec<f64> = windows.iter().flat_map(|w| w.values[0].clone()).collect();
    let d0 = tape.constant(Tensor::from_vec(&[batch, params.channels], d0)?);
    let p0 = params.initial_state(tape, store, d0)?;
    let queries: Vec<Vec<f64>> = windows.iter().map(|w| w.times.clone()).collect();
    let states = cde_solve(tape, store, params, &paths, p0, &queries, substeps)?;
    let w = params.hidden_width;
    let rows = states.into_iter().map(|s| tape.reshape(s, &[batch, 1, w])).collect::<Result<Vec<_>>>()?;
    tape.concat(&rows, 1)
}

/// Which channels drive the control path of each window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlPath {
    /// Window-relative time only; the path a cached table reproduces.
    TimeOnly,
    /// Every time-feature channel.
    Features,
}

/// NCDE positional embedding, evaluated by integration or by table lookup
/// once frozen.
#[derive(Debug, Clone)]
pub struct NcdePe {
    pub params: NcdeParams,
    pub substeps: usize,
    pub path: ControlPath,
    table: Option<PETable>,
}

impl NcdePe {
    pub fn new(store: &mut ParamStore, d_model: usize, path: ControlPath, rng: &mut impl Rng) -> Self {
        Self { params: NcdeParams::new(store, d_model, TIME_FEATURE_DIM, rng), substeps: DEFAULT_SUBSTEPS, path, table: None }
    }

    pub fn table(&self) -> Option<&PETable> {
        self.table.as_ref()
    }

    /// Freezes the parameters and caches states over relative time `[0, 1]`.
    pub fn freeze(&mut self, store: &mut ParamStore, resolution: f64) -> Result<&PETable> {
        self.params.set_trainable(store, false);
        let table = pe_table_build(store, &self.params, (0.0, 1.0), resolution, self.substeps)?;
        Ok(self.table.insert(table))
    }

    pub fn set_table(&mut self, table: PETable) -> Result<()> {
        if table.width() != self.params.hidden_width {
            return Err(Error::ShapeMismatch(format!("table width {} for d_model {}", table.width(), self.params.hidden_width)));
        }
        self.table = Some(table);
        Ok(())
    }

    fn knots(&self, input: &PeInput) -> Vec<ControlKnots> {
        let l = input.seq_len;
        (0..input.batch())
            .map(|b| {
                let rows = b * l..(b + 1) * l;
                let times = input.relative_time[rows.clone()].to_vec();
                let values = match self.path {
                    ControlPath::TimeOnly => times.iter().map(|&t| reference_knot(t, TIME_FEATURE_DIM)).collect(),
                    ControlPath::Features => input.features[rows].iter().map(|f| f.to_array().to_vec()).collect(),
                };
                ControlKnots { times, values }
            })
            .collect()
    }
}

impl PositionalEmbedding for NcdePe {
    fn method(&self) -> PeMethod {
        PeMethod::Ncde
    }

    fn d_model(&self) -> usize {
        self.params.hidden_width
    }

    fn embed(&self, tape: &mut Tape, store: &ParamStore, input: &PeInput) -> Result<Var> {
        if let Some(table) = &self.table {
            let data = input.relative_time.iter().flat_map(|&t| pe_table_lookup(table, t)).collect();
            return Ok(tape.constant(Tensor::from_vec(&[input.rows(), table.width()], data)?));
        }
        let out = ncde_pe_forward(tape, store, &self.params, &self.knots(input), self.substeps)?;
        tape.reshape(out, &[input.rows(), self.params.hidden_width])
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.params.ids()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::param_gradient_check;
    use crate::pe::embed_values;

    fn knots(times: &[f64]) -> ControlKnots {
        ControlKnots {
            times: times.to_vec(),
            values: times.iter().map(|&t| vec![t, (3.0 * t).sin(), 0.1 * t * t]).collect(),
        }
    }

    #[test]
    fn zero_field_rows_equal_initial_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let params = NcdeParams::new(&mut store, 4, 3, &mut rng);
        for id in params.field_ids() {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape).unwrap()).unwrap();
        }
        let mut tape = Tape::new();
        let out = ncde_pe_forward(&mut tape, &store, &params, &[knots(&[0.0, 0.2, 0.5, 1.0])], 4).unwrap();
        let v = tape.value(out);
        assert_eq!(v.shape(), &[1, 4, 4]);
        for j in 1..4 {
            assert_eq!(&v.data()[j * 4..(j + 1) * 4], &v.data()[..4]);
        }
    }

    #[test]
    fn doubling_substeps_barely_moves_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let params = NcdeParams::new(&mut store, 8, 3, &mut rng);
        let mut times: Vec<f64> = (0..48).map(|_| rng.gen_range(0.0..1.0)).collect();
        times.extend([0.0, 1.0]);
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        times.dedup();
        let w = [knots(&times)];
        let mut t1 = Tape::new();
        let a = ncde_pe_forward(&mut t1, &store, &params, &w, 4).unwrap();
        let mut t2 = Tape::new();
        let b = ncde_pe_forward(&mut t2, &store, &params, &w, 8).unwrap();
        let d = t1.value(a).max_abs_diff(t2.value(b)).unwrap();
        assert!(d < 1e-6, "{d:e}");
    }

    #[test]
    fn gradients_through_the_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let params = NcdeParams::new(&mut store, 4, 3, &mut rng);
        let w = [knots(&[0.0, 0.3, 0.5, 1.0]), knots(&[0.0, 0.1, 0.7, 1.0])];
        let forward = |tape: &mut Tape, s: &ParamStore| {
            let out = ncde_pe_forward(tape, s, &params, &w, 2)?;
            let sq = tape.mul(out, out)?;
            tape.sum(sq)
        };
        let checks = param_gradient_check(&mut store, forward, 30, 1e-6, &mut rng).unwrap();
        assert!(checks.iter().all(|c| c.relative_error < 1e-3), "{checks:?}");
    }

    #[test]
    fn frozen_table_matches_direct_solution_at_grid_times() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mut pe = NcdePe::new(&mut store, 6, ControlPath::TimeOnly, &mut rng);
        let grid: Vec<f64> = (0..=10).map(|k| k as f64 * 0.1).collect();
        let direct = embed_values(&pe, &store, &PeInput::from_times(&grid).unwrap()).unwrap();
        pe.freeze(&mut store, 0.1).unwrap();
        assert!(store.iter().all(|(_, p)| !p.trainable));
        let cached = embed_values(&pe, &store, &PeInput::from_times(&grid).unwrap()).unwrap();
        assert!(direct.rows.max_abs_diff(&cached.rows).unwrap() < 1e-8);
    }

    #[test]
    fn too_few_knots() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let params = NcdeParams::new(&mut store, 4, 3, &mut rng);
        let mut tape = Tape::new();
        let r = ncde_pe_forward(&mut tape, &store, &params, &[knots(&[0.0])], 4);
        assert!(matches!(r, Err(Error::TooFewKnots(1))));
    }
}
