use rand::Rng;

use super::{check_times, PEMatrix, PeInput, PeMethod, PositionalEmbedding};
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Slope and bias of the linear embedding `p(t) = a·t + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct CtlpeParams {
    pub slope: Vec<f64>,
    pub bias: Vec<f64>,
}

impl CtlpeParams {
    pub fn new(slope: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if slope.len() != bias.len() || slope.is_empty() {
            return Err(Error::ShapeMismatch(format!("slope {} vs bias {}", slope.len(), bias.len())));
        }
        if slope.iter().chain(&bias).any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput("CTLPE parameters".into()));
        }
        Ok(Self { slope, bias })
    }

    pub fn d_model(&self) -> usize {
        self.slope.len()
    }

    pub fn slope_norm(&self) -> f64 {
        self.slope.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

/// Value-level embedding: `row_j[c] = slope[c]·times[j] + bias[c]`.
pub fn ctlpe(times: &[f64], params: &CtlpeParams, use_bias: bool) -> Result<PEMatrix> {
    check_times(times)?;
    let d = params.d_model();
    let mut data = Vec::with_capacity(times.len() * d);
    for &t in times {
        for c in 0..d {
            data.push(params.slope[c] * t + if use_bias { params.bias[c] } else { 0.0 });
        }
    }
    Ok(PEMatrix { rows: Tensor::from_vec(&[times.len(), d], data)?, times: times.to_vec() })
}

/// Learnable linear embedding over window-relative time.
#[derive(Debug, Clone)]
pub struct Ctlpe {
    pub slope: ParamId,
    pub bias: Option<ParamId>,
    d_model: usize,
}

impl Ctlpe {
    /// Slope uniform in `[-0.1, 0.1]`, bias zero.
    pub fn new(store: &mut ParamStore, d_model: usize, use_bias: bool, rng: &mut impl Rng) -> Self {
        let slope = (0..d_model).map(|_| rng.gen_range(-0.1..=0.1)).collect();
        let slope = store.add("pe.ctlpe.slope", Tensor::from_vec(&[1, d_model], slope).expect("slope shape"));
        let bias = use_bias.then(|| store.add_zeros("pe.ctlpe.bias", &[d_model]));
        Self { slope, bias, d_model }
    }

    pub fn params(&self, store: &ParamStore) -> CtlpeParams {
        let slope = store.value(self.slope).data().to_vec();
        let bias = match self.bias {
            Some(b) => store.value(b).data().to_vec(),
            None => vec![0.0; slope.len()],
        };
        CtlpeParams { slope, bias }
    }
}

impl PositionalEmbedding for Ctlpe {
    fn method(&self) -> PeMethod {
        if self.bias.is_some() {
            PeMethod::Ctlpe
        } else {
            PeMethod::CtlpeNoBias
        }
    }

    fn d_model(&self) -> usize {
        self.d_model
    }

    fn embed(&self, tape: &mut Tape, store: &ParamStore, input: &PeInput) -> Result<Var> {
        check_times(&input.relative_time)?;
        let t = tape.constant(Tensor::from_slice(&[input.rows(), 1], &input.relative_time)?);
        let a = tape.param(store, self.slope);
        let out = tape.matmul(t, a)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(out, b)
            }
            None => Ok(out),
        }
    }

    fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.slope).chain(self.bias).collect()
    }
}
