use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::ForecastBatch;
use super::layers::{decoder_forward, encoder_forward, DecoderLayer, EncoderLayer, Linear, TokenEmbedding};
use super::ModelConfig;
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::data::REVIN_EPS;
use crate::error::{Error, Result};
use crate::ncde::NcdePe;
use crate::pe::{build_pe, PeMethod, PositionalEmbedding};

/// The positional embedding a model adds to its value embeddings.
pub enum PeLayer {
    None,
    Closed(Box<dyn PositionalEmbedding>),
    Ncde(NcdePe),
}

impl PeLayer {
    pub fn as_dyn(&self) -> Option<&dyn PositionalEmbedding> {
        match self {
            PeLayer::None => None,
            PeLayer::Closed(pe) => Some(pe.as_ref()),
            PeLayer::Ncde(pe) => Some(pe),
        }
    }
}

impl std::fmt::Debug for PeLayer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.as_dyn() {
            None => write!(f, "PeLayer::None"),
            Some(pe) => write!(f, "PeLayer({})", pe.method()),
        }
    }
}

/// Per-window masked mean and std `[B, l]`; variables with no observation
/// fall back to mean 0 and std 1.
fn window_stats(values: &[f64], mask: &[bool], batch: usize, len: usize, l: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; batch * l];
    let mut std = vec![1.0; batch * l];
    for b in 0..batch {
        for v in 0..l {
            let obs: Vec<f64> =
                (0..len).map(|i| (b * len + i) * l + v).filter(|&k| mask[k]).map(|k| values[k]).collect();
            if obs.is_empty() {
                continue;
            }
            let m = obs.iter().sum::<f64>() / obs.len() as f64;
            let var = obs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / obs.len() as f64;
            mean[b * l + v] = m;
            std[b * l + v] = var.sqrt().max(REVIN_EPS);
        }
    }
    (mean, std)
}

/// Broadcasts per-window `[B, l]` statistics over `len` steps.
fn expand(stat: &[f64], batch: usize, len: usize, l: usize) -> Vec<f64> {
    (0..batch).flat_map(|b| std::iter::repeat(&stat[b * l..(b + 1) * l]).take(len).flatten().copied()).collect()
}

#[derive(Debug)]
pub struct Forecaster {
    pub config: ModelConfig,
    pub n_vars: usize,
    pub store: ParamStore,
    pub token: TokenEmbedding,
    pub pe: PeLayer,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub head: Linear,
    pub revin_gain: ParamId,
    pub revin_bias: ParamId,
}

impl Forecaster {
    /// A freshly initialized model; every random draw comes from `seed`.
    pub fn new(config: ModelConfig, n_vars: usize, n_past: usize, seed: u64) -> Result<Self> {
        config.validate(n_past)?;
        if n_vars == 0 {
            return Err(Error::InvalidConfig("model needs at least one variable".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let token = TokenEmbedding::new(&mut store, n_vars, d, &mut rng);
        let pe = match &config.pe {
            None => PeLayer::None,
            Some(p) if p.method == PeMethod::Ncde => {
                let mut pe = NcdePe::new(&mut store, d, config.ncde.path, &mut rng);
                pe.substeps = config.ncde.substeps;
                PeLayer::Ncde(pe)
            }
            Some(p) => PeLayer::Closed(build_pe(p, &mut store, &mut rng)?),
        };
        let (h, ff) = (config.n_heads, config.feedforward_width);
        let encoder = (0..config.encoder_depth)
            .map(|i| EncoderLayer::new(&mut store, &format!("encoder.{i}"), d, h, ff, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..config.decoder_depth)
            .map(|i| DecoderLayer::new(&mut store, &format!("decoder.{i}"), d, h, ff, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(&mut store, "head", d, n_vars, &mut rng);
        let revin_gain = store.add("revin.gain", Tensor::ones(&[n_vars])?);
        let revin_bias = store.add_zeros("revin.bias", &[n_vars]);
        Ok(Self { config, n_vars, store, token, pe, encoder, decoder, head, revin_gain, revin_bias })
    }

    fn check_batch(&self, batch: &ForecastBatch) -> Result<()> {
        if batch.n_vars != self.n_vars {
            return Err(Error::ShapeMismatch(format!("batch has {} variables, model {}", batch.n_vars, self.n_vars)));
        }
        if batch.label_len != self.config.label_len {
            return Err(Error::ShapeMismatch(format!(
                "batch label_len {} differs from model label_len {}",
                batch.label_len, self.config.label_len
            )));
        }
        Ok(())
    }

    /// Token embedding of RevIN-normalized values `[B, T, d]`.
    fn embed_values(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        values: &[f64],
        mask: &[bool],
        batch: usize,
        len: usize,
        stats: (&[f64], &[f64]),
    ) -> Result<Var> {
        let l = self.n_vars;
        let mean = expand(stats.0, batch, len, l);
        let std = expand(stats.1, batch, len, l);
        let z: Vec<f64> =
            (0..values.len()).map(|k| if mask[k] { (values[k] - mean[k]) / std[k] } else { 0.0 }).collect();
        let ind: Vec<f64> = mask.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
        let shape = [batch, len, l];
        let z = tape.constant(Tensor::from_vec(&shape, z)?);
        let ind = tape.constant(Tensor::from_vec(&shape, ind)?);
        let g = tape.param(store, self.revin_gain);
        let b = tape.param(store, self.revin_bias);
        let a = tape.mul_row(z, g)?;
        let a = tape.add_row(a, b)?;
        let a = tape.mul(a, ind)?;
        let x = tape.concat(&[a, ind], 2)?;
        self.token.forward(tape, store, x)
    }

    /// Positional rows for the encoder `[B, N, d]` and decoder `[B, label + M, d]`.
    fn positions(&self, tape: &mut Tape, store: &ParamStore, batch: &ForecastBatch) -> Result<Option<(Var, Var)>> {
        let Some(pe) = self.pe.as_dyn() else { return Ok(None) };
        let (b, n, m, d) = (batch.batch, batch.n_past, batch.horizon, self.config.d_model);
        let rows = pe.embed(tape, store, &batch.pe_input)?;
        let rows = tape.reshape(rows, &[b, n + m, d])?;
        let enc = tape.narrow(rows, 1, 0, n)?;
        let dec = tape.narrow(rows, 1, n - batch.label_len, batch.label_len + m)?;
        Ok(Some((enc, dec)))
    }

    /// Encoder input: value embedding plus positional embedding.
    fn encoder_input(&self, tape: &mut Tape, store: &ParamStore, batch: &ForecastBatch, stats: (&[f64], &[f64]), pos: Option<Var>) -> Result<Var> {
        let x = self.embed_values(tape, store, &batch.enc_values, &batch.enc_mask, batch.batch, batch.n_past, stats)?;
        match pos {
            Some(p) => tape.add(x, p),
            None => Ok(x),
        }
    }

    /// Encoder output `[B, N, d]`.
    pub fn encode(&self, tape: &mut Tape, batch: &ForecastBatch) -> Result<Var> {
        self.encode_with(tape, &self.store, batch)
    }

    /// [`Forecaster::encode`] with parameter values taken from `store`.
    pub fn encode_with(&self, tape: &mut Tape, store: &ParamStore, batch: &ForecastBatch) -> Result<Var> {
        self.check_batch(batch)?;
        let (mean, std) = window_stats(&batch.enc_values, &batch.enc_mask, batch.batch, batch.n_past, self.n_vars);
        let pos = self.positions(tape, store, batch)?;
        let x = self.encoder_input(tape, store, batch, (&mean, &std), pos.map(|p| p.0))?;
        let x = tape.dropout(x, self.config.dropout_rate)?;
        encoder_forward(tape, store, &self.encoder, x, self.config.dropout_rate)
    }

    /// Denormalized predictions `[B, M, l]`.
    pub fn forward(&self, tape: &mut Tape, batch: &ForecastBatch) -> Result<Var> {
        self.forward_with(tape, &self.store, batch)
    }

    /// [`Forecaster::forward`] with parameter values taken from `store`.
    pub fn forward_with(&self, tape: &mut Tape, store: &ParamStore, batch: &ForecastBatch) -> Result<Var> {
        self.check_batch(batch)?;
        let (b, l, m) = (batch.batch, self.n_vars, batch.horizon);
        let (mean, std) = window_stats(&batch.enc_values, &batch.enc_mask, b, batch.n_past, l);
        let stats = (mean.as_slice(), std.as_slice());
        let pos = self.positions(tape, store, batch)?;
        let x = self.encoder_input(tape, store, batch, stats, pos.map(|p| p.0))?;
        let x = tape.dropout(x, self.config.dropout_rate)?;
        let memory = encoder_forward(tape, store, &self.encoder, x, self.config.dropout_rate)?;

        let dec_len = batch.dec_len();
        let y = self.embed_values(tape, store, &batch.dec_values, &batch.dec_mask, b, dec_len, stats)?;
        let y = match pos {
            Some((_, p)) => tape.add(y, p)?,
            None => y,
        };
        let y = tape.dropout(y, self.config.dropout_rate)?;
        let y = decoder_forward(tape, store, &self.decoder, y, memory, self.config.dropout_rate)?;
        let out = self.head.forward(tape, store, y)?;
        let out = tape.narrow(out, 1, batch.label_len, m)?;

        let g = tape.param(store, self.revin_gain);
        let bias = tape.param(store, self.revin_bias);
        let neg_b = tape.scale(bias, -1.0)?;
        let out = tape.add_row(out, neg_b)?;
        let g = tape.add_scalar(g, REVIN_EPS * REVIN_EPS)?;
        let inv_g = tape.recip(g)?;
        let out = tape.mul_row(out, inv_g)?;
        let shape = [b, m, l];
        let std = tape.constant(Tensor::from_vec(&shape, expand(&std, b, m, l))?);
        let mean = tape.constant(Tensor::from_vec(&shape, expand(&mean, b, m, l))?);
        let out = tape.mul(out, std)?;
        tape.add(out, mean)
    }

    /// Predictions `[B, M, l]` without dropout.
    pub fn forecast(&self, batch: &ForecastBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch)?;
        Ok(tape.value(out).clone())
    }

    pub fn pe_param_ids(&self) -> Vec<ParamId> {
        self.pe.as_dyn().map(|p| p.param_ids()).unwrap_or_default()
    }

    pub fn ncde(&self) -> Option<&NcdePe> {
        match &self.pe {
            PeLayer::Ncde(pe) => Some(pe),
            _ => None,
        }
    }

    pub fn ncde_mut(&mut self) -> Option<(&mut NcdePe, &mut ParamStore)> {
        match &mut self.pe {
            PeLayer::Ncde(pe) => Some((pe, &mut self.store)),
            _ => None,
        }
    }
}
