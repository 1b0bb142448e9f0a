use super::{check_even, check_times, PEMatrix, PeInput, PeMethod, PositionalEmbedding};
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn sinusoid_rows(positions: impl Iterator<Item = f64>, d_model: usize) -> Vec<f64> {
    let freqs: Vec<f64> = (0..d_model / 2).map(|i| 10000f64.powf(-((2 * i) as f64) / d_model as f64)).collect();
    let mut out = Vec::new();
    for pos in positions {
        for &w in &freqs {
            out.push((pos * w).sin());
            out.push((pos * w).cos());
        }
    }
    out
}

/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(·)`.
pub fn sinusoidal_pe(positions: &[usize], d_model: usize) -> Result<PEMatrix> {
    check_even(d_model)?;
    let data = sinusoid_rows(positions.iter().map(|&p| p as f64), d_model);
    Ok(PEMatrix {
        rows: Tensor::from_vec(&[positions.len(), d_model], data)?,
        times: positions.iter().map(|&p| p as f64).collect(),
    })
}

/// The sinusoidal formula indexed by `time · time_scale`.
pub fn irr_sinusoidal_pe(times: &[f64], d_model: usize, time_scale: f64) -> Result<PEMatrix> {
    check_even(d_model)?;
    check_times(times)?;
    let data = sinusoid_rows(times.iter().map(|&t| t * time_scale), d_model);
    Ok(PEMatrix { rows: Tensor::from_vec(&[times.len(), d_model], data)?, times: times.to_vec() })
}

/// Order-indexed sinusoidal embedding.
#[derive(Debug, Clone)]
pub struct Sinusoidal {
    d_model: usize,
    max_len: usize,
}

impl Sinusoidal {
    pub fn new(d_model: usize, max_len: usize) -> Result<Self> {
        check_even(d_model)?;
        Ok(Self { d_model, max_len })
    }
}

impl PositionalEmbedding for Sinusoidal {
    fn method(&self) -> PeMethod {
        PeMethod::Sinusoidal
    }

    fn d_model(&self) -> usize {
        self.d_model
    }

    fn embed(&self, tape: &mut Tape, _store: &ParamStore, input: &PeInput) -> Result<Var> {
        if let Some(&p) = input.order.iter().find(|&&p| p >= self.max_len) {
            return Err(Error::WindowTooLong { count: p + 1, max_len: self.max_len });
        }
        Ok(tape.constant(sinusoidal_pe(&input.order, self.d_model)?.rows))
    }

    fn param_ids(&self) -> Vec<ParamId> {
        Vec::new()
    }
}

/// Sinusoidal embedding indexed by elapsed seconds times a scale.
#[derive(Debug, Clone)]
pub struct IrrSinusoidal {
    d_model: usize,
    time_scale: f64,
}

impl IrrSinusoidal {
    pub fn new(d_model: usize, time_scale: f64) -> Result<Self> {
        check_even(d_model)?;
        Ok(Self { d_model, time_scale })
    }

    pub fn time_scale(&self) -> f64 {
        self.time_scale
    }
}

impl PositionalEmbedding for IrrSinusoidal {
    fn method(&self) -> PeMethod {
        PeMethod::IrrSinusoidal
    }

    fn d_model(&self) -> usize {
        self.d_model
    }

    fn embed(&self, tape: &mut Tape, _store: &ParamStore, input: &PeInput) -> Result<Var> {
        Ok(tape.constant(irr_sinusoidal_pe(&input.elapsed_seconds, self.d_model, self.time_scale)?.rows))
    }

    fn param_ids(&self) -> Vec<ParamId> {
        Vec::new()
    }
}
