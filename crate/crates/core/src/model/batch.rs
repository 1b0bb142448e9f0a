use crate::data::WindowPair;
use crate::error::{Error, Result};
use crate::pe::PeInput;

/// Model-ready view of a batch of windows. Value buffers are row-major
/// `[B, T, l]`; nulls are zero with a false mask entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastBatch {
    pub batch: usize,
    pub n_past: usize,
    pub label_len: usize,
    pub horizon: usize,
    pub n_vars: usize,
    pub enc_values: Vec<f64>,
    pub enc_mask: Vec<bool>,
    /// Last `label_len` past observations followed by `horizon` zero slots.
    pub dec_values: Vec<f64>,
    pub dec_mask: Vec<bool>,
    pub target: Vec<f64>,
    pub target_mask: Vec<bool>,
    /// Time descriptors over the combined `n_past + horizon` window.
    pub pe_input: PeInput,
}

fn push_obs(values: &mut Vec<f64>, mask: &mut Vec<bool>, obs: &[Option<f64>]) {
    for v in obs {
        values.push(v.unwrap_or(0.0));
        mask.push(v.is_some());
    }
}

impl ForecastBatch {
    pub fn from_windows(windows: &[&WindowPair], label_len: usize) -> Result<Self> {
        let first = windows.first().ok_or(Error::EmptyDataset)?;
        let (n, m) = (first.past.len(), first.future.len());
        let l = first.past[0].values.len();
        if label_len > n {
            return Err(Error::InvalidConfig(format!("label_len {label_len} exceeds lookback {n}")));
        }
        let b = windows.len();
        let mut out = Self {
            batch: b,
            n_past: n,
            label_len,
            horizon: m,
            n_vars: l,
            enc_values: Vec::with_capacity(b * n * l),
            enc_mask: Vec::with_capacity(b * n * l),
            dec_values: Vec::with_capacity(b * (label_len + m) * l),
            dec_mask: Vec::with_capacity(b * (label_len + m) * l),
            target: Vec::with_capacity(b * m * l),
            target_mask: Vec::with_capacity(b * m * l),
            pe_input: PeInput::from_windows(windows.iter().copied())?,
        };
        for w in windows {
            if w.past.len() != n || w.future.len() != m || w.all().any(|o| o.values.len() != l) {
                return Err(Error::ShapeMismatch("windows in a batch must share N, M and l".into()));
            }
            for o in &w.past {
                push_obs(&mut out.enc_values, &mut out.enc_mask, &o.values);
            }
            for o in &w.past[n - label_len..] {
                push_obs(&mut out.dec_values, &mut out.dec_mask, &o.values);
            }
            out.dec_values.extend(std::iter::repeat(0.0).take(m * l));
            out.dec_mask.extend(std::iter::repeat(false).take(m * l));
            for o in &w.future {
                push_obs(&mut out.target, &mut out.target_mask, &o.values);
            }
        }
        Ok(out)
    }

    pub fn dec_len(&self) -> usize {
        self.label_len + self.horizon
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, synth_generate, SynthKind, SynthParams};

    #[test]
    fn prediction_slots_are_zero() {
        let s = synth_generate(SynthKind::SineMixture, &SynthParams::default(), 40, 0).unwrap();
        let ws = make_windows(&s, 8, 4, 5).unwrap();
        let refs: Vec<&WindowPair> = ws.iter().collect();
        let b = ForecastBatch::from_windows(&refs, 3).unwrap();
        let l = 3;
        for w in 0..b.batch {
            let row = &b.dec_values[w * 7 * l..(w + 1) * 7 * l];
            assert!(row[3 * l..].iter().all(|&x| x == 0.0));
            assert_eq!(row[..l], b.enc_values[(w * 8 + 5) * l..(w * 8 + 6) * l]);
        }
        assert_eq!(b.target.len(), b.batch * 4 * l);
        assert_eq!(b.pe_input.rows(), b.batch * 12);
    }
}
