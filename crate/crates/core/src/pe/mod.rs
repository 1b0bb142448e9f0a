//! Positional embeddings over irregular timestamps behind one interface.

mod config;
mod ctlpe;
mod learned;
mod metric;
mod sinusoidal;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::data::{TimeFeatureVector, WindowPair};
use crate::error::{Error, Result};

pub use config::{PeMethod, PeMethodConfig};
pub use ctlpe::{ctlpe, Ctlpe, CtlpeParams};
pub use learned::{simple_overlap_pe, simple_pe, time_feature_pe, uniform_pe, Simple, SimpleOverlap, TimeFeature, Uniform};
pub use metric::{check_monotonicity, check_translation_invariance, pe_distance, MonotonicityReport, MONOTONICITY_TOL};
pub use sinusoidal::{irr_sinusoidal_pe, sinusoidal_pe, IrrSinusoidal, Sinusoidal};

/// One embedding row per timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct PEMatrix {
    pub rows: Tensor,
    pub times: Vec<f64>,
}

impl PEMatrix {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }
}

/// Time descriptors of one or more equal-length sequences, flattened row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct PeInput {
    pub seq_len: usize,
    pub relative_time: Vec<f64>,
    pub elapsed_seconds: Vec<f64>,
    pub order: Vec<usize>,
    pub features: Vec<TimeFeatureVector>,
}

impl PeInput {
    /// Every observation of each window, past then future.
    pub fn from_windows<'a>(windows: impl IntoIterator<Item = &'a WindowPair>) -> Result<Self> {
        let mut out = Self { seq_len: 0, relative_time: vec![], elapsed_seconds: vec![], order: vec![], features: vec![] };
        for w in windows {
            let len = w.past.len() + w.future.len();
            if out.seq_len != 0 && out.seq_len != len {
                return Err(Error::ShapeMismatch(format!("window of {len} among windows of {}", out.seq_len)));
            }
            out.seq_len = len;
            out.relative_time.extend(w.relative_times());
            out.elapsed_seconds.extend(w.elapsed_seconds());
            out.order.extend(0..len);
            out.features.extend(w.features());
        }
        if out.seq_len == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(out)
    }

    /// A single sequence whose relative and elapsed times both equal `times`.
    pub fn from_times(times: &[f64]) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::TooFewSamples { needed: 1, got: 0 });
        }
        if let Some(&t) = times.iter().find(|t| !t.is_finite()) {
            return Err(Error::NonFiniteInput(format!("time {t}")));
        }
        Ok(Self {
            seq_len: times.len(),
            relative_time: times.to_vec(),
            elapsed_seconds: times.to_vec(),
            order: (0..times.len()).collect(),
            features: times.iter().map(|&t| TimeFeatureVector::time_only(t)).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.order.len()
    }

    pub fn batch(&self) -> usize {
        self.rows() / self.seq_len
    }

    /// Rows `[start, start + len)` of every sequence.
    pub fn narrow(&self, start: usize, len: usize) -> Self {
        let pick = |k: usize| (k % self.seq_len) >= start && (k % self.seq_len) < start + len;
        let keep: Vec<usize> = (0..self.rows()).filter(|&k| pick(k)).collect();
        Self {
            seq_len: len,
            relative_time: keep.iter().map(|&k| self.relative_time[k]).collect(),
            elapsed_seconds: keep.iter().map(|&k| self.elapsed_seconds[k]).collect(),
            order: keep.iter().map(|&k| self.order[k]).collect(),
            features: keep.iter().map(|&k| self.features[k]).collect(),
        }
    }
}

/// A positional embedding evaluated on the tape.
pub trait PositionalEmbedding: Send + Sync {
    fn method(&self) -> PeMethod;

    fn d_model(&self) -> usize;

    /// Embedding rows `[input.rows(), d_model]`.
    fn embed(&self, tape: &mut Tape, store: &ParamStore, input: &PeInput) -> Result<Var>;

    /// Learnable parameters owned by this embedding.
    fn param_ids(&self) -> Vec<ParamId>;
}

/// Evaluates `pe` outside of any training graph.
pub fn embed_values(pe: &dyn PositionalEmbedding, store: &ParamStore, input: &PeInput) -> Result<PEMatrix> {
    let mut tape = Tape::new();
    let v = pe.embed(&mut tape, store, input)?;
    Ok(PEMatrix { rows: tape.value(v).clone(), times: input.relative_time.clone() })
}

fn check_even(d_model: usize) -> Result<()> {
    if d_model == 0 || d_model % 2 == 1 {
        return Err(Error::OddDimension(d_model));
    }
    Ok(())
}

fn check_times(times: &[f64]) -> Result<()> {
    match times.iter().find(|t| !t.is_finite()) {
        Some(t) => Err(Error::NonFiniteInput(format!("time {t}"))),
        None => Ok(()),
    }
}

/// Builds any closed-form or table embedding, registering its parameters.
pub fn build_pe(
    config: &PeMethodConfig,
    store: &mut ParamStore,
    rng: &mut impl rand::Rng,
) -> Result<Box<dyn PositionalEmbedding>> {
    config.validate()?;
    let d = config.d_model;
    Ok(match config.method {
        PeMethod::Ctlpe => Box::new(Ctlpe::new(store, d, true, rng)),
        PeMethod::CtlpeNoBias => Box::new(Ctlpe::new(store, d, false, rng)),
        PeMethod::Sinusoidal => Box::new(Sinusoidal::new(d, config.max_len.unwrap())?),
        PeMethod::IrrSinusoidal => Box::new(IrrSinusoidal::new(d, config.time_scale.unwrap())?),
        PeMethod::Uniform => Box::new(Uniform::new(store, d, rng)?),
        PeMethod::TimeFeature => Box::new(TimeFeature::new(store, d, rng)),
        PeMethod::Simple => {
            Box::new(Simple::new(store, d, config.grid_resolution.unwrap(), config.max_len.unwrap(), rng))
        }
        PeMethod::SimpleOverlap => Box::new(SimpleOverlap::new(store, d, config.max_len.unwrap(), rng)),
        PeMethod::Ncde => {
            return Err(Error::InvalidConfig("ncde embeddings are built by the ncde module".into()))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn narrow_selects_rows_of_every_sequence() {
        let mut a = PeInput::from_times(&[0.0, 1.0, 2.0, 3.0]).unwrap();
        let b = PeInput::from_times(&[10.0, 11.0, 12.0, 13.0]).unwrap();
        a.relative_time.extend(&b.relative_time);
        a.elapsed_seconds.extend(&b.elapsed_seconds);
        a.order.extend(&b.order);
        a.features.extend(&b.features);
        let n = a.narrow(1, 2);
        assert_eq!(n.relative_time, vec![1.0, 2.0, 11.0, 12.0]);
        assert_eq!(n.order, vec![1, 2, 1, 2]);
        assert_eq!(n.batch(), 2);
    }

    #[test]
    fn every_closed_form_method_builds_and_embeds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let input = PeInput::from_times(&[0.0, 0.25, 0.5, 1.0]).unwrap();
        for method in PeMethod::ALL {
            if method == PeMethod::Ncde {
                continue;
            }
            let cfg = PeMethodConfig::with_defaults(method, 8, 16, 0.25, 1.0);
            let mut store = ParamStore::new();
            let pe = build_pe(&cfg, &mut store, &mut rng).unwrap();
            assert_eq!(pe.method(), method);
            let m = embed_values(pe.as_ref(), &store, &input).unwrap();
            assert_eq!(m.rows.shape(), &[4, 8]);
            assert!(m.rows.is_finite());
        }
    }
}
