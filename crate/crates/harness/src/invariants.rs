use irrcast::autodiff::{param_gradient_check, CoordinateCheck, ParamStore, Tape, Tensor, Var};
use irrcast::data::{revin_denormalize, revin_normalize};
use irrcast::model::{
    cross_attention, decoder_forward, encoder_forward, mse_loss, self_attention, DecoderLayer, EncoderLayer,
    FeedForward, ForecastBatch, Forecaster, LayerNorm, Linear, ModelConfig, MultiHeadAttention, TokenEmbedding,
};
use irrcast::ncde::{
    cde_solve, natural_cubic_spline, ncde_pe_forward, pe_table_build, pe_table_lookup, reference_knot, rk4_cde,
    ControlKnots, NcdeParams, DEFAULT_SUBSTEPS,
};
use irrcast::pe::{build_pe, PeInput, PeMethod, PeMethodConfig};
use irrcast::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A measured quantity compared against its bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    /// True when the value must stay below the bound, false when above.
    pub below: bool,
}

impl Check {
    pub fn below(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self { name: name.into(), value, bound, below: true }
    }

    pub fn at_least(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self { name: name.into(), value, bound, below: false }
    }

    pub fn passed(&self) -> bool {
        if self.below {
            self.value < self.bound
        } else {
            self.value >= self.bound
        }
    }
}

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplineErrors {
    pub interpolation: f64,
    pub c2_jump: f64,
    pub boundary_second: f64,
}

/// Worst interpolation, continuity and boundary errors over random knot sets.
pub fn spline_errors(sets: usize, seed: u64) -> Result<SplineErrors> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e = SplineErrors { interpolation: 0.0, c2_jump: 0.0, boundary_second: 0.0 };
    for _ in 0..sets {
        let n = rng.gen_range(3..40);
        let mut t = vec![rng.gen_range(-5.0..5.0)];
        for _ in 1..n {
            t.push(t.last().unwrap() + rng.gen_range(0.01..2.0));
        }
        let channels = rng.gen_range(1..5);
        let v: Vec<Vec<f64>> = (0..n).map(|_| (0..channels).map(|_| rng.gen_range(-10.0..10.0)).collect()).collect();
        let p = natural_cubic_spline(&t, &v)?;
        for (ti, vi) in t.iter().zip(&v) {
            for (a, b) in p.eval(*ti).iter().zip(vi) {
                e.interpolation = e.interpolation.max((a - b).abs());
            }
        }
        for k in 1..n - 1 {
            e.c2_jump = p.second_derivative_jump(k).iter().fold(e.c2_jump, |m, x| m.max(x.abs()));
        }
        for end in [t[0], t[n - 1]] {
            e.boundary_second = p.second_derivative(end).iter().fold(e.boundary_second, |m, x| m.max(x.abs()));
        }
    }
    Ok(e)
}

/// Observed convergence orders of RK4 on `dp = p dD`, `D(s) = s`, over
/// `[0, 1]` with steps 0.1, 0.05 and 0.025.
pub fn rk4_orders() -> Result<Vec<f64>> {
    let line = natural_cubic_spline(&[0.0, 1.0], &[vec![0.0], vec![1.0]])?;
    let err = |steps: usize| -> Result<f64> {
        let mut tape = Tape::new();
        let p0 = tape.constant(Tensor::from_vec(&[1, 1], vec![1.0])?);
        let field = |t: &mut Tape, p: Var| t.reshape(p, &[1, 1, 1]);
        let out = rk4_cde(&mut tape, field, std::slice::from_ref(&line), p0, &[vec![1.0]], steps)?;
        Ok((tape.value(out[0]).data()[0] - std::f64::consts::E).abs())
    };
    let errs = [err(10)?, err(20)?, err(40)?];
    Ok(errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableFidelity {
    /// Largest difference between table entries and direct evaluation at grid times.
    pub grid_error: f64,
    pub coarse_mid_error: f64,
    pub fine_mid_error: f64,
}

impl TableFidelity {
    pub fn reduction(&self) -> f64 {
        self.coarse_mid_error / self.fine_mid_error
    }
}

/// Compares cached tables with direct integration of the reference path.
pub fn table_fidelity(seed: u64) -> Result<TableFidelity> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let c = irrcast::data::TIME_FEATURE_DIM;
    let params = NcdeParams::new(&mut store, 8, c, &mut rng);
    let direct = |times: &[f64], substeps: usize| -> Result<Vec<Vec<f64>>> {
        let knots = ControlKnots { times: times.to_vec(), values: times.iter().map(|&t| reference_knot(t, c)).collect() };
        let mut tape = Tape::new();
        let out = ncde_pe_forward(&mut tape, &store, &params, &[knots], substeps)?;
        Ok(tape.value(out).data().chunks(8).map(|r| r.to_vec()).collect())
    };
    let res = 0.05;
    let table = pe_table_build(&store, &params, (0.0, 1.0), res, DEFAULT_SUBSTEPS)?;
    let grid: Vec<f64> = (0..table.len()).map(|k| table.grid_time(k)).collect();
    let mut grid_error: f64 = 0.0;
    for (k, row) in direct(&grid, DEFAULT_SUBSTEPS)?.iter().enumerate() {
        for (a, b) in row.iter().zip(table.values.row(k)) {
            grid_error = grid_error.max((a - b).abs());
        }
    }
    let mid_error = |res: f64| -> Result<f64> {
        let table = pe_table_build(&store, &params, (0.0, 1.0), res, DEFAULT_SUBSTEPS)?;
        let mids: Vec<f64> = (0..table.len() - 1).map(|k| table.grid_time(k) + 0.5 * res).collect();
        let mut q = vec![0.0];
        q.extend(&mids);
        let path = natural_cubic_spline(&[0.0, 1.0], &[reference_knot(0.0, c), reference_knot(1.0, c)])?;
        let mut tape = Tape::new();
        let d0 = tape.constant(Tensor::from_vec(&[1, c], reference_knot(0.0, c))?);
        let p0 = params.initial_state(&mut tape, &store, d0)?;
        let states = cde_solve(&mut tape, &store, &params, &[path], p0, &[q], 64)?;
        let mut worst: f64 = 0.0;
        for (&t, &s) in mids.iter().zip(&states[1..]) {
            for (a, b) in pe_table_lookup(&table, t).iter().zip(tape.value(s).data()) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    };
    Ok(TableFidelity { grid_error, coarse_mid_error: mid_error(0.04)?, fine_mid_error: mid_error(0.01)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RevinErrors {
    pub round_trip: f64,
    pub normalized_mean: f64,
}

/// Round trip and centering of RevIN on random masked windows.
pub fn revin_errors(windows: usize, seed: u64) -> Result<RevinErrors> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e = RevinErrors { round_trip: 0.0, normalized_mean: 0.0 };
    for _ in 0..windows {
        let (n, l) = (rng.gen_range(4..64), rng.gen_range(1..6));
        let scale = 10f64.powf(rng.gen_range(-2.0..3.0));
        let shift = rng.gen_range(-100.0..100.0);
        let data: Vec<f64> = (0..n * l).map(|_| shift + scale * rng.gen_range(-1.0..1.0)).collect();
        let mut mask: Vec<bool> = (0..n * l).map(|_| rng.gen_bool(0.7)).collect();
        for v in 0..l {
            mask[v] = true;
        }
        let values = Tensor::from_vec(&[n, l], data)?;
        let (z, stats) = revin_normalize(&values, &mask)?;
        let back = revin_denormalize(&z, &stats)?;
        for v in 0..l {
            let idx: Vec<usize> = (0..n).map(|i| i * l + v).filter(|&k| mask[k]).collect();
            let mean = idx.iter().map(|&k| z.data()[k]).sum::<f64>() / idx.len() as f64;
            e.normalized_mean = e.normalized_mean.max(mean.abs());
            for &k in &idx {
                e.round_trip = e.round_trip.max((back.data()[k] - values.data()[k]).abs());
            }
        }
    }
    Ok(e)
}

const FD_STEP: f64 = 1e-5;
const GRADIENT_COORDS: usize = 24;
pub const MIN_GRADIENT_COORDS: usize = 20;

/// Both derivatives below this are roundoff around an exact zero, such as the
/// key biases of attention, which softmax cancels.
pub const ZERO_GRADIENT_FLOOR: f64 = 1e-9;

fn coordinate_error(c: &CoordinateCheck) -> f64 {
    if c.analytic.abs() < ZERO_GRADIENT_FLOOR && c.numeric.abs() < ZERO_GRADIENT_FLOOR {
        0.0
    } else {
        c.relative_error
    }
}

/// Worst relative finite-difference error per component over `coords`
/// random parameter coordinates.
pub fn gradient_errors(coords: usize, seed: u64) -> Result<Vec<(String, f64, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut record = |name: &str, mut store: ParamStore, f: &dyn Fn(&mut Tape, &ParamStore) -> Result<Var>, rng: &mut ChaCha8Rng| -> Result<()> {
        let checks = param_gradient_check(&mut store, f, coords, FD_STEP, rng)?;
        let worst = checks.iter().map(coordinate_error).fold(0.0, f64::max);
        out.push((name.to_string(), worst, checks.len()));
        Ok(())
    };
    let probe = |t: &mut Tape, y: Var, w: &Tensor| -> Result<Var> {
        let w = t.constant(w.clone());
        let p = t.mul(y, w)?;
        t.sum(p)
    };
    let x = rand_tensor(&[2, 5, 8], &mut rng);
    let mem = rand_tensor(&[2, 3, 8], &mut rng);

    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, "linear", 8, 5, &mut rng);
    let w = rand_tensor(&[2, 5, 5], &mut rng);
    record("linear", s, &|t, s| {
        let xv = t.constant(x.clone());
        let y = lin.forward(t, s, xv)?;
        probe(t, y, &w)
    }, &mut rng)?;

    let mut s = ParamStore::new();
    let ln = LayerNorm::new(&mut s, "layer_norm", 16);
    for id in s.ids().collect::<Vec<_>>() {
        let shape = s.value(id).shape().to_vec();
        s.set_value(id, rand_tensor(&shape, &mut rng))?;
    }
    let wide = rand_tensor(&[2, 5, 16], &mut rng);
    let w = rand_tensor(&[2, 5, 16], &mut rng);
    record("layer_norm", s, &|t, s| {
        let xv = t.constant(wide.clone());
        let y = ln.forward(t, s, xv)?;
        probe(t, y, &w)
    }, &mut rng)?;

    let mut s = ParamStore::new();
    let tok = TokenEmbedding::new(&mut s, 4, 6, &mut rng);
    let w = rand_tensor(&[2, 5, 6], &mut rng);
    record("token_embedding", s, &|t, s| {
        let xv = t.constant(x.clone());
        let y = tok.forward(t, s, xv)?;
        probe(t, y, &w)
    }, &mut rng)?;

    let mut s = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut s, "attn", 8, 2, &mut rng)?;
    let w = rand_tensor(&[2, 5, 8], &mut rng);
    record("self_attention", s.clone(), &|t, s| {
        let xv = t.constant(x.clone());
        let y = self_attention(t, s, &attn, xv, true)?;
        probe(t, y, &w)
    }, &mut rng)?;
    record("cross_attention", s, &|t, s| {
        let xv = t.constant(x.clone());
        let m = t.constant(mem.clone());
        let y = cross_attention(t, s, &attn, xv, m)?;
        probe(t, y, &w)
    }, &mut rng)?;

    let mut s = ParamStore::new();
    let ff = FeedForward::new(&mut s, "ff", 8, 12, &mut rng);
    record("feed_forward", s, &|t, s| {
        let xv = t.constant(x.clone());
        let y = ff.forward(t, s, xv)?;
        probe(t, y, &w)
    }, &mut rng)?;

    let mut s = ParamStore::new();
    let enc = vec![EncoderLayer::new(&mut s, "enc", 8, 2, 12, &mut rng)?];
    let dec = vec![DecoderLayer::new(&mut s, "dec", 8, 2, 12, &mut rng)?];
    record("encoder_decoder", s, &|t, s| {
        let xv = t.constant(x.clone());
        let m = encoder_forward(t, s, &enc, xv, 0.0)?;
        let y = decoder_forward(t, s, &dec, xv, m, 0.0)?;
        probe(t, y, &w)
    }, &mut rng)?;

    let times: Vec<f64> = {
        let mut v: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..1.0)).collect();
        v.extend([0.0, 1.0]);
        v.sort_by(f64::total_cmp);
        v
    };
    let input = PeInput::from_times(&times)?;
    for method in [PeMethod::Ctlpe, PeMethod::TimeFeature, PeMethod::Uniform, PeMethod::Simple, PeMethod::SimpleOverlap] {
        let mut s = ParamStore::new();
        let cfg = PeMethodConfig::with_defaults(method, 16, 16, 0.1, 1.0);
        let pe = build_pe(&cfg, &mut s, &mut rng)?;
        let w = rand_tensor(&[times.len(), 16], &mut rng);
        record(method.as_str(), s, &|t, s| {
            let y = pe.embed(t, s, &input)?;
            probe(t, y, &w)
        }, &mut rng)?;
    }

    let mut s = ParamStore::new();
    let params = NcdeParams::new(&mut s, 4, 3, &mut rng);
    let knots = |ts: &[f64]| ControlKnots { times: ts.to_vec(), values: ts.iter().map(|&t| vec![t, (3.0 * t).sin(), t * t]).collect() };
    let ws = [knots(&[0.0, 0.3, 0.5, 1.0]), knots(&[0.0, 0.1, 0.7, 1.0])];
    let w = rand_tensor(&[2, 4, 4], &mut rng);
    record("cde_solve", s, &|t, s| {
        let y = ncde_pe_forward(t, s, &params, &ws, 2)?;
        probe(t, y, &w)
    }, &mut rng)?;

    let series = irrcast::data::synth_generate(irrcast::data::SynthKind::SineMixture, &Default::default(), 60, seed)?;
    let series = irrcast::data::drop_random(&series, 0.3, seed)?;
    let windows = irrcast::data::make_windows(&series, 8, 4, 5)?;
    let refs: Vec<_> = windows.iter().take(3).collect();
    let batch = ForecastBatch::from_windows(&refs, 4)?;
    let target = Tensor::from_slice(&[3, 4, 3], &batch.target)?;
    let mut cfg = ModelConfig::desk(Some(PeMethodConfig::with_defaults(PeMethod::Ctlpe, 8, 12, 1.0, 1.0)), 8);
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.feedforward_width = 12;
    cfg.encoder_depth = 1;
    cfg.dropout_rate = 0.0;
    let model = Forecaster::new(cfg, 3, 8, seed)?;
    record("forecaster", model.store.clone(), &|t, s| {
        let p = model.forward_with(t, s, &batch)?;
        mse_loss(t, p, &target, &batch.target_mask)
    }, &mut rng)?;
    Ok(out)
}

/// Numerical invariants of the spline, solver, table, normalization and
/// gradient code with their tolerances.
pub fn run_invariant_suite(seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let s = spline_errors(100, seed)?;
    checks.push(Check::below("spline interpolation error", s.interpolation, 1e-10));
    checks.push(Check::below("spline C2 jump", s.c2_jump, 1e-8));
    checks.push(Check::below("spline boundary second derivative", s.boundary_second, 1e-8));
    let orders = rk4_orders()?;
    checks.push(Check::at_least("rk4 convergence order", orders.iter().copied().fold(f64::INFINITY, f64::min), 3.5));
    let t = table_fidelity(seed)?;
    checks.push(Check::below("table grid error", t.grid_error, 1e-8));
    checks.push(Check::at_least("table quartering error reduction", t.reduction(), 8.0));
    let r = revin_errors(100, seed)?;
    checks.push(Check::below("revin round trip", r.round_trip, 1e-6));
    checks.push(Check::below("revin normalized mean", r.normalized_mean, 1e-7));
    for (name, worst, coords) in gradient_errors(GRADIENT_COORDS, seed)? {
        let tol = if name == "cde_solve" { 1e-3 } else { 1e-4 };
        checks.push(Check::below(format!("gradient {name}"), worst, tol));
        checks.push(Check::at_least(format!("gradient {name} coordinates"), coords as f64, MIN_GRADIENT_COORDS as f64));
    }
    Ok(checks)
}
