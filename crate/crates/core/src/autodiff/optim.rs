use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// SGD or Adam over the trainable parameters of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    clip_norm: Option<f64>,
    step_count: u64,
    // Adam moments, indexed by parameter id; allocated on first use.
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Optimizer {
    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }, learning_rate)
    }

    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        Self { kind, learning_rate, clip_norm: None, step_count: 0, moments: Vec::new() }
    }

    /// Rescales gradients so their global norm never exceeds `max_norm`.
    pub fn with_clip_norm(mut self, max_norm: f64) -> Self {
        self.clip_norm = Some(max_norm);
        self
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn has_moments(&self, id: ParamId) -> bool {
        self.moments.get(id.index()).is_some_and(|m| m.is_some())
    }

    /// Applies one update to every trainable parameter, then clears gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for &id in &ids {
            if store.grad(id).is_none() {
                return Err(Error::MissingGradient(store.get(id).name.clone()));
            }
        }
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = store.grad_norm_of(&ids);
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step_count += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let t = self.step_count as i32;
        for id in ids {
            let p = store.get_mut(id);
            let grad = p.grad.take().expect("checked above");
            let g = grad.data();
            let w = p.value.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (wv, gv) in w.iter_mut().zip(g) {
                        *wv -= self.learning_rate * gv * scale;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (m, v) = self.moments[id.index()]
                        .get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for k in 0..g.len() {
                        let gk = g[k] * scale;
                        m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                        v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                        let mh = m[k] / c1;
                        let vh = v[k] / c2;
                        w[k] -= self.learning_rate * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        store.clear_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn one_param(w: f64, g: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(w));
        s.get_mut(id).grad = Some(Tensor::scalar(g));
        (s, id)
    }

    #[test]
    fn sgd_single_step() {
        let (mut s, id) = one_param(1.0, 1.0);
        let mut opt = Optimizer::sgd(0.1);
        opt.step(&mut s).unwrap();
        assert!((s.value(id).item().unwrap() - 0.9).abs() < 1e-15);
        assert!(s.grad(id).is_none());
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn sgd_zero_gradient_is_fixed_point() {
        let (mut s, id) = one_param(2.5, 0.0);
        Optimizer::sgd(0.3).step(&mut s).unwrap();
        assert_eq!(s.value(id).item().unwrap(), 2.5);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g| + eps) ≈ lr.
        let (mut s, id) = one_param(0.0, 1.0);
        let mut opt = Optimizer::adam(1e-3);
        opt.step(&mut s).unwrap();
        let expected = -1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((s.value(id).item().unwrap() - expected).abs() < 1e-15);
        assert!(opt.has_moments(id));
    }

    #[test]
    fn sgd_has_no_moments() {
        let (mut s, id) = one_param(0.0, 1.0);
        let mut opt = Optimizer::sgd(0.1);
        opt.step(&mut s).unwrap();
        assert!(!opt.has_moments(id));
    }

    #[test]
    fn missing_gradient_is_reported() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(1.0));
        let err = Optimizer::sgd(0.1).step(&mut s).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(name) if name == "w"));
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let (mut s, id) = one_param(1.0, 1.0);
        s.set_trainable(id, false);
        Optimizer::sgd(0.1).step(&mut s).unwrap();
        assert_eq!(s.value(id).item().unwrap(), 1.0);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        s.get_mut(id).grad = Some(Tensor::from_vec(&[2], vec![30.0, 40.0]).unwrap());
        Optimizer::sgd(1.0).with_clip_norm(5.0).step(&mut s).unwrap();
        assert!((s.value(id).data()[0] + 3.0).abs() < 1e-12);
        assert!((s.value(id).data()[1] + 4.0).abs() < 1e-12);
    }
}
