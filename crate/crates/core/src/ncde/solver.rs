use rand::Rng;

use super::spline::SplinePath;
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Hidden magnitude beyond which integration is treated as divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

pub const FIELD_HIDDEN: usize = 64;

/// Parameters of the vector field `f: R^w -> R^{w x C}` and the initial map
/// `zeta: R^C -> R^w`, where `C` is the control path's channel count.
#[derive(Debug, Clone)]
pub struct NcdeParams {
    pub field_w1: ParamId,
    pub field_b1: ParamId,
    pub field_w2: ParamId,
    pub field_b2: ParamId,
    pub init_w: ParamId,
    pub init_b: ParamId,
    pub hidden_width: usize,
    pub channels: usize,
}

fn fan_in_bias(store: &mut ParamStore, name: &str, fan_in: usize, len: usize, rng: &mut impl Rng) -> ParamId {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..len).map(|_| rng.gen_range(-bound..=bound)).collect();
    store.add(name, Tensor::from_vec(&[len], data).expect("bias shape"))
}

impl NcdeParams {
    /// Xavier weights; biases uniform in `±1/sqrt(fan_in)`.
    pub fn new(store: &mut ParamStore, hidden_width: usize, channels: usize, rng: &mut impl Rng) -> Self {
        let w = hidden_width;
        Self {
            field_w1: store.add_xavier("ncde.field.w1", w, FIELD_HIDDEN, rng),
            field_b1: fan_in_bias(store, "ncde.field.b1", w, FIELD_HIDDEN, rng),
            field_w2: store.add_xavier("ncde.field.w2", FIELD_HIDDEN, w * channels, rng),
            field_b2: fan_in_bias(store, "ncde.field.b2", FIELD_HIDDEN, w * channels, rng),
            init_w: store.add_xavier("ncde.init.w", channels, w, rng),
            init_b: fan_in_bias(store, "ncde.init.b", channels, w, rng),
            hidden_width: w,
            channels,
        }
    }

    pub fn field_ids(&self) -> Vec<ParamId> {
        vec![self.field_w1, self.field_b1, self.field_w2, self.field_b2]
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.field_ids();
        v.extend([self.init_w, self.init_b]);
        v
    }

    pub fn set_trainable(&self, store: &mut ParamStore, trainable: bool) {
        for id in self.ids() {
            store.set_trainable(id, trainable);
        }
    }

    /// `f(p)` for `p` of shape `[B, w]`, returned as `[B, w, C]`.
    pub fn field(&self, tape: &mut Tape, store: &ParamStore, p: Var) -> Result<Var> {
        let b = tape.shape(p)[0];
        let w1 = tape.param(store, self.field_w1);
        let b1 = tape.param(store, self.field_b1);
        let w2 = tape.param(store, self.field_w2);
        let b2 = tape.param(store, self.field_b2);
        let h = tape.matmul(p, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.tanh(h)?;
        let o = tape.matmul(h, w2)?;
        let o = tape.add_row(o, b2)?;
        let o = tape.tanh(o)?;
        tape.reshape(o, &[b, self.hidden_width, self.channels])
    }

    /// `zeta(d0)` for `d0` of shape `[B, C]`.
    pub fn initial_state(&self, tape: &mut Tape, store: &ParamStore, d0: Var) -> Result<Var> {
        let w = tape.param(store, self.init_w);
        let b = tape.param(store, self.init_b);
        let p = tape.matmul(d0, w)?;
        tape.add_row(p, b)
    }
}

fn guard(tape: &Tape, p: Var, step: usize) -> Result<()> {
    if tape.value(p).data().iter().any(|x| !x.is_finite() || x.abs() > DIVERGENCE_LIMIT) {
        return Err(Error::NonFiniteState { step });
    }
    Ok(())
}

/// Fixed-step RK4 for `dp = field(p) dD` over a batch of control paths.
///
/// `p0` is `[B, w]` at each path's first knot; `query_times[b]` lists the
/// times at which window `b`'s state is returned, all batches with the same
/// count. Each interval between successive queries is mapped onto `[0, 1]`
/// and crossed in `substeps` steps. Returns one `[B, w]` state per query.
pub fn rk4_cde<F>(
    tape: &mut Tape,
    mut field: F,
    paths: &[SplinePath],
    p0: Var,
    query_times: &[Vec<f64>],
    substeps: usize,
) -> Result<Vec<Var>>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let batch = paths.len();
    if batch == 0 || query_times.len() != batch {
        return Err(Error::ShapeMismatch(format!("{batch} paths for {} query lists", query_times.len())));
    }
    if substeps == 0 {
        return Err(Error::InvalidConfig("substeps must be at least 1".into()));
    }
    let k = query_times[0].len();
    if query_times.iter().any(|q| q.len() != k) {
        return Err(Error::ShapeMismatch("query lists differ in length".into()));
    }
    for (path, q) in paths.iter().zip(query_times) {
        let mut prev = path.start();
        for &t in q {
            if !(t >= prev) {
                return Err(Error::NonMonotonicKnots(0));
            }
            prev = t;
        }
    }
    let c = paths[0].channels();
    let dt = 1.0 / substeps as f64;
    let mut prev: Vec<f64> = paths.iter().map(SplinePath::start).collect();
    let mut p = p0;
    let mut out = Vec::with_capacity(k);
    let mut step = 0;
    for j in 0..k {
        let h: Vec<f64> = (0..batch).map(|b| query_times[b][j] - prev[b]).collect();
        if h.iter().any(|&x| x > 0.0) {
            // control increment dD/du = D'(s)·h, held per stage
            let control = |tape: &mut Tape, u: f64| -> Result<Var> {
                let mut g = Vec::with_capacity(batch * c);
                for b in 0..batch {
                    let d = paths[b].derivative(prev[b] + u * h[b]);
                    g.extend(d.into_iter().map(|x| x * h[b]));
                }
                Ok(tape.constant(Tensor::from_vec(&[batch, c, 1], g)?))
            };
            let mut apply = |tape: &mut Tape, p: Var, g: Var| -> Result<Var> {
                let f = field(tape, p)?;
                let w = tape.shape(f)[1];
                let y = tape.matmul(f, g)?;
                tape.reshape(y, &[batch, w])
            };
            for s in 0..substeps {
                let u = s as f64 * dt;
                let g0 = control(tape, u)?;
                let gm = control(tape, u + 0.5 * dt)?;
                let g1 = control(tape, u + dt)?;
                let k1 = apply(tape, p, g0)?;
                let a = tape.scale(k1, 0.5 * dt)?;
                let a = tape.add(p, a)?;
                let k2 = apply(tape, a, gm)?;
                let b = tape.scale(k2, 0.5 * dt)?;
                let b = tape.add(p, b)?;
                let k3 = apply(tape, b, gm)?;
                let e = tape.scale(k3, dt)?;
                let e = tape.add(p, e)?;
                let k4 = apply(tape, e, g1)?;
                let mid = tape.add(k2, k3)?;
                let mid = tape.scale(mid, 2.0)?;
                let sum = tape.add(k1, k4)?;
                let sum = tape.add(sum, mid)?;
                let inc = tape.scale(sum, dt / 6.0)?;
                p = tape.add(p, inc)?;
                step += 1;
                guard(tape, p, step)?;
            }
        }
        out.push(p);
        for b in 0..batch {
            prev[b] = query_times[b][j];
        }
    }
    Ok(out)
}

/// Integrates the neural CDE from `p0` and returns the states at `query_times`.
pub fn cde_solve(
    tape: &mut Tape,
    store: &ParamStore,
    params: &NcdeParams,
    paths: &[SplinePath],
    p0: Var,
    query_times: &[Vec<f64>],
    substeps: usize,
) -> Result<Vec<Var>> {
    if paths.iter().any(|p| p.channels() != params.channels) {
        return Err(Error::ShapeMismatch(format!("paths must have {} channels", params.channels)));
    }
    rk4_cde(tape, |t, p| params.field(t, store, p), paths, p0, query_times, substeps)
}
