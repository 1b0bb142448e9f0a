//! Central finite-difference oracles for analytic gradients.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Relative disagreement between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares the tape gradient of the scalar function `f` at `x` against
/// central differences with the given `step`, returning the worst relative
/// error over all coordinates.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !x.is_finite() {
        return Err(Error::NonFiniteInput("finite-difference point".into()));
    }
    assert!(step > 0.0, "step must be positive");
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    let fx = tape.value(y).item()?;
    if !fx.is_finite() {
        return Err(Error::NonFiniteInput("function value".into()));
    }
    // A function that ignores its input has zero gradient everywhere.
    let analytic = if tape.requires_grad(y) {
        tape.backward(y)?.wrt(xv).expect("leaf requires grad")
    } else {
        Tensor::zeros(x.shape())?
    };
    let eval = |pt: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(pt);
        let out = f(&mut t, v)?;
        let val = t.value(out).item()?;
        if !val.is_finite() {
            return Err(Error::NonFiniteInput("function value".into()));
        }
        Ok(val)
    };
    let mut worst: f64 = 0.0;
    for k in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[k] += step;
        let mut minus = x.clone();
        minus.data_mut()[k] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[k], numeric));
    }
    Ok(worst)
}

/// Per-coordinate outcome of [`param_gradient_check`].
#[derive(Debug, Clone)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

/// Gradient check over `coords` randomly chosen scalar coordinates of the
/// trainable parameters in `store`. `forward` must build a scalar loss.
pub fn param_gradient_check<F>(
    store: &mut ParamStore,
    forward: F,
    coords: usize,
    step: f64,
    rng: &mut impl Rng,
) -> Result<Vec<CoordinateCheck>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = forward(&mut tape, store)?;
    tape.backward_into(loss, store)?;

    let mut all: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(id, p)| (0..p.value.numel()).map(move |k| (id, k)))
        .collect();
    all.shuffle(rng);
    all.truncate(coords);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = forward(&mut t, store)?;
        t.value(l).item()
    };
    let mut out = Vec::with_capacity(all.len());
    for (id, k) in all {
        let analytic = store.grad(id).expect("backward_into writes all").data()[k];
        let orig = store.value(id).data()[k];
        store.get_mut(id).value.data_mut()[k] = orig + step;
        let fp = eval(store)?;
        store.get_mut(id).value.data_mut()[k] = orig - step;
        let fm = eval(store)?;
        store.get_mut(id).value.data_mut()[k] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        out.push(CoordinateCheck {
            param: store.get(id).name.clone(),
            index: k,
            analytic,
            numeric,
            relative_error: relative_error(analytic, numeric),
        });
    }
    store.clear_grads();
    Ok(out)
}
