use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const REVIN_EPS: f64 = 1e-5;

/// Per-variable statistics of one lookback window plus the affine pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RevinStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl RevinStats {
    /// Masked population statistics of `values` with shape `[n, l]`.
    pub fn fit(values: &Tensor, mask: &[bool]) -> Result<Self> {
        let (n, l) = matrix_dims(values)?;
        if mask.len() != n * l {
            return Err(Error::ShapeMismatch(format!("mask of {} for {n}x{l} values", mask.len())));
        }
        let data = values.data();
        let mut mean = vec![0.0; l];
        let mut std = vec![0.0; l];
        for v in 0..l {
            let obs: Vec<f64> = (0..n).filter(|&i| mask[i * l + v]).map(|i| data[i * l + v]).collect();
            if obs.is_empty() {
                return Err(Error::AllNullVariable(v));
            }
            let m = obs.iter().sum::<f64>() / obs.len() as f64;
            let var = obs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / obs.len() as f64;
            mean[v] = m;
            std[v] = var.sqrt().max(REVIN_EPS);
        }
        Ok(Self { mean, std, gain: vec![1.0; l], bias: vec![0.0; l] })
    }

    pub fn with_affine(mut self, gain: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if gain.len() != self.mean.len() || bias.len() != self.mean.len() {
            return Err(Error::ShapeMismatch("affine length differs from variable count".into()));
        }
        if gain.iter().any(|&g| g == 0.0) {
            return Err(Error::BadParams("RevIN gain must be nonzero".into()));
        }
        self.gain = gain;
        self.bias = bias;
        Ok(self)
    }

    pub fn n_vars(&self) -> usize {
        self.mean.len()
    }
}

fn matrix_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n, l] => Ok((*n, *l)),
        s => Err(Error::ShapeMismatch(format!("expected [n, l], got {s:?}"))),
    }
}

/// Standardizes observed entries per variable and applies the affine pair.
/// Unobserved entries become zero.
pub fn revin_normalize(values: &Tensor, mask: &[bool]) -> Result<(Tensor, RevinStats)> {
    let stats = RevinStats::fit(values, mask)?;
    let out = revin_apply(values, mask, &stats)?;
    Ok((out, stats))
}

/// Normalizes with already fitted statistics.
pub fn revin_apply(values: &Tensor, mask: &[bool], stats: &RevinStats) -> Result<Tensor> {
    let (n, l) = matrix_dims(values)?;
    if l != stats.n_vars() || mask.len() != n * l {
        return Err(Error::ShapeMismatch(format!("{n}x{l} values for {} variables", stats.n_vars())));
    }
    let data = values
        .data()
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let v = k % l;
            if mask[k] {
                (x - stats.mean[v]) / stats.std[v] * stats.gain[v] + stats.bias[v]
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_vec(&[n, l], data)
}

pub fn revin_denormalize(predictions: &Tensor, stats: &RevinStats) -> Result<Tensor> {
    let (n, l) = matrix_dims(predictions)?;
    if l != stats.n_vars() {
        return Err(Error::ShapeMismatch(format!("{l} columns for {} variables", stats.n_vars())));
    }
    let data = predictions
        .data()
        .iter()
        .enumerate()
        .map(|(k, &y)| {
            let v = k % l;
            (y - stats.bias[v]) / stats.gain[v] * stats.std[v] + stats.mean[v]
        })
        .collect();
    Tensor::from_vec(&[n, l], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::from_vec(&[v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn one_and_three_map_to_unit() {
        let (z, s) = revin_normalize(&col(&[1.0, 3.0]), &[true, true]).unwrap();
        assert_eq!(z.data(), &[-1.0, 1.0]);
        assert_eq!(s.mean, vec![2.0]);
        assert_eq!(s.std, vec![1.0]);
    }

    #[test]
    fn constant_series_maps_to_zero() {
        let (z, s) = revin_normalize(&col(&[4.0; 5]), &[true; 5]).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
        assert_eq!(s.std, vec![REVIN_EPS]);
    }

    #[test]
    fn denormalize_zero_gives_mean() {
        let (_, s) = revin_normalize(&col(&[1.0, 2.0, 6.0]), &[true; 3]).unwrap();
        let back = revin_denormalize(&col(&[0.0, 0.0]), &s).unwrap();
        assert!(back.data().iter().all(|&x| (x - 3.0).abs() < 1e-12));
    }

    #[test]
    fn round_trip_with_gain_two() {
        let x = Tensor::from_vec(&[3, 2], vec![1.0, -2.0, 5.0, 0.5, 3.0, 7.0]).unwrap();
        let mask = [true; 6];
        let s = RevinStats::fit(&x, &mask).unwrap().with_affine(vec![2.0, 0.5], vec![0.3, -1.0]).unwrap();
        let z = revin_apply(&x, &mask, &s).unwrap();
        let back = revin_denormalize(&z, &s).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-6);
    }

    #[test]
    fn nulls_excluded_and_all_null_rejected() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 100.0, 3.0, 0.0]).unwrap();
        let (z, s) = revin_normalize(&x, &[true, true, true, false]).unwrap();
        assert_eq!(s.mean, vec![2.0, 100.0]);
        assert_eq!(z.data()[3], 0.0);
        assert!(matches!(revin_normalize(&x, &[true, false, true, false]), Err(Error::AllNullVariable(1))));
    }

    #[test]
    fn denormalize_shape_mismatch() {
        let (_, s) = revin_normalize(&col(&[1.0, 3.0]), &[true, true]).unwrap();
        let wide = Tensor::zeros(&[2, 2]).unwrap();
        assert!(matches!(revin_denormalize(&wide, &s), Err(Error::ShapeMismatch(_))));
    }
}
