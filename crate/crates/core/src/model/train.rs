use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::ForecastBatch;
use super::forecaster::Forecaster;
use super::NcdeTrainMode;
use crate::autodiff::{Optimizer, Tape, Tensor, Var};
use crate::data::WindowPair;
use crate::error::{Error, Result};
use crate::pe::PeMethod;

pub const GRAD_CLIP_NORM: f64 = 5.0;
const DEFAULT_TABLE_RESOLUTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 32, learning_rate: 1e-3, patience: 3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NcdeEpochLog {
    pub batches: usize,
    pub first_batch_loss: Option<f64>,
    pub last_batch_loss: Option<f64>,
    /// Batches whose vector-field gradient norm was nonzero.
    pub batches_with_field_grad: usize,
    pub max_field_grad_norm: f64,
    pub table_resolution: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub ncde: Option<NcdeEpochLog>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once the monitored value fails to improve for `patience` epochs in a row.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, bad_epochs: 0 }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, value: f64) -> StopDecision {
        if value < self.best {
            self.best = value;
            self.bad_epochs = 0;
            return StopDecision::Improved;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

fn mask_count(mask: &[bool]) -> Result<usize> {
    match mask.iter().filter(|&&m| m).count() {
        0 => Err(Error::EmptyMask),
        n => Ok(n),
    }
}

/// Mean squared error over masked-in entries, on the tape.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
    if tape.shape(pred) != target.shape() || mask.len() != target.numel() {
        return Err(Error::ShapeMismatch(format!("prediction {:?} vs target {:?}", tape.shape(pred), target.shape())));
    }
    let count = mask_count(mask)?;
    let m = Tensor::from_vec(target.shape(), mask.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect())?;
    let t = tape.constant(target.clone());
    let m = tape.constant(m);
    let diff = tape.sub(pred, t)?;
    let diff = tape.mul(diff, m)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / count as f64)
}

fn masked_sums(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<(f64, f64, usize)> {
    if pred.len() != target.len() || mask.len() != target.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut n = 0;
    for ((p, t), &m) in pred.iter().zip(target).zip(mask) {
        if m {
            sq += (p - t) * (p - t);
            abs += (p - t).abs();
            n += 1;
        }
    }
    Ok((sq, abs, n))
}

pub fn masked_mse(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<f64> {
    let (sq, _, n) = masked_sums(pred, target, mask)?;
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sq / n as f64)
}

pub fn masked_mae(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<f64> {
    let (_, abs, n) = masked_sums(pred, target, mask)?;
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(abs / n as f64)
}

/// Masked MSE and MAE of denormalized predictions over every window.
pub fn evaluate(model: &Forecaster, windows: &[WindowPair], batch_size: usize) -> Result<(f64, f64)> {
    if windows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut n = 0;
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&WindowPair> = chunk.iter().collect();
        let batch = ForecastBatch::from_windows(&refs, model.config.label_len)?;
        let pred = model.forecast(&batch)?;
        let (s, a, c) = masked_sums(pred.data(), &batch.target, &batch.target_mask)?;
        sq += s;
        abs += a;
        n += c;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((sq / n as f64, abs / n as f64))
}

/// One optimizer step on `batch`; returns the loss before the update.
fn train_step(model: &mut Forecaster, batch: &ForecastBatch, dropout_seed: u64) -> Result<Option<f64>> {
    if !batch.target_mask.iter().any(|&m| m) {
        return Ok(None);
    }
    let mut tape = Tape::with_dropout(dropout_seed);
    let pred = model.forward(&mut tape, batch)?;
    let target = Tensor::from_slice(&[batch.batch, batch.horizon, batch.n_vars], &batch.target)?;
    let loss = mse_loss(&mut tape, pred, &target, &batch.target_mask)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Ok(Some(value));
    }
    tape.backward_into(loss, &mut model.store)?;
    Ok(Some(value))
}

fn dropout_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((epoch as u64) << 32) ^ batch as u64
}

fn shuffled_batches<'a>(windows: &'a [WindowPair], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<&'a WindowPair>> {
    let mut order: Vec<&WindowPair> = windows.iter().collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

fn median_relative_gap(windows: &[WindowPair]) -> Option<f64> {
    let mut gaps: Vec<f64> =
        windows.iter().flat_map(|w| w.relative_times().windows(2).map(|g| g[1] - g[0]).collect::<Vec<_>>()).collect();
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_by(f64::total_cmp);
    Some(gaps[gaps.len() / 2])
}

/// One pass over `windows` with gradients flowing through the solver, after
/// which the NCDE parameters are frozen and served from a table.
pub fn ncde_pe_train_single_epoch(
    model: &mut Forecaster,
    windows: &[WindowPair],
    opt: &mut Optimizer,
    config: &TrainConfig,
) -> Result<NcdeEpochLog> {
    let field_ids = match model.ncde() {
        Some(pe) => pe.params.field_ids(),
        None => return Err(Error::InvalidConfig("model has no ncde embedding".into())),
    };
    let mut log = NcdeEpochLog::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED);
    for (k, refs) in shuffled_batches(windows, config.batch_size, &mut rng).into_iter().enumerate() {
        let batch = ForecastBatch::from_windows(&refs, model.config.label_len)?;
        let Some(loss) = train_step(model, &batch, dropout_seed(config.seed, usize::MAX, k))? else { continue };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: 0, batch: k });
        }
        let norm = model.store.grad_norm_of(&field_ids);
        if norm > 0.0 {
            log.batches_with_field_grad += 1;
        }
        log.max_field_grad_norm = log.max_field_grad_norm.max(norm);
        opt.step(&mut model.store)?;
        log.first_batch_loss.get_or_insert(loss);
        log.last_batch_loss = Some(loss);
        log.batches += 1;
        debug!("ncde epoch batch {k}: loss {loss:.6}, field grad norm {norm:.3e}");
    }
    let resolution = model
        .config
        .ncde
        .table_resolution
        .or_else(|| median_relative_gap(windows).map(|g| g / 4.0))
        .unwrap_or(DEFAULT_TABLE_RESOLUTION);
    let (pe, store) = model.ncde_mut().expect("checked above");
    pe.freeze(store, resolution)?;
    log.table_resolution = Some(resolution);
    info!(
        "ncde single epoch: {} batches, first loss {:?}, last loss {:?}",
        log.batches, log.first_batch_loss, log.last_batch_loss
    );
    Ok(log)
}

/// Epoch loop with Adam, validation-based early stopping and best-parameter
/// retention. An empty `val` set monitors the training loss instead.
pub fn train(model: &mut Forecaster, train_set: &[WindowPair], val: &[WindowPair], config: &TrainConfig) -> Result<TrainingLog> {
    let mut log = TrainingLog::default();
    if config.epochs == 0 {
        return Ok(log);
    }
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(config.learning_rate > 0.0) || config.batch_size == 0 {
        return Err(Error::InvalidConfig("learning_rate and batch_size must be positive".into()));
    }
    let mut opt = Optimizer::adam(config.learning_rate).with_clip_norm(GRAD_CLIP_NORM);
    if model.config.pe_method() == Some(PeMethod::Ncde)
        && model.config.ncde.train_mode == NcdeTrainMode::SingleEpoch
        && model.ncde().is_some_and(|pe| pe.table().is_none())
    {
        log.ncde = Some(ncde_pe_train_single_epoch(model, train_set, &mut opt, config)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stopper = EarlyStopping::new(config.patience.max(1));
    let mut best = model.store.snapshot();
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        let mut count = 0;
        for (k, refs) in shuffled_batches(train_set, config.batch_size, &mut rng).into_iter().enumerate() {
            let batch = ForecastBatch::from_windows(&refs, model.config.label_len)?;
            let Some(loss) = train_step(model, &batch, dropout_seed(config.seed, epoch, k))? else { continue };
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: k });
            }
            opt.step(&mut model.store)?;
            total += loss;
            count += 1;
        }
        let train_loss = if count > 0 { total / count as f64 } else { f64::NAN };
        let (val_mse, val_mae) = if val.is_empty() { (train_loss, f64::NAN) } else { evaluate(model, val, config.batch_size)? };
        info!("epoch {epoch}: train {train_loss:.6}, val mse {val_mse:.6}, val mae {val_mae:.6}");
        log.epochs.push(EpochLog { epoch, train_loss, val_mse, val_mae });
        match stopper.observe(val_mse) {
            StopDecision::Improved => {
                best = model.store.snapshot();
                log.best_epoch = Some(epoch);
            }
            StopDecision::Continue => {}
            StopDecision::Stop => {
                log.stopped_early = epoch + 1 < config.epochs;
                break;
            }
        }
    }
    model.store.restore(&best)?;
    Ok(log)
}
