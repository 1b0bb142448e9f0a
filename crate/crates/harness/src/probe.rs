use irrcast::autodiff::{ParamStore, Tape, Tensor};
use irrcast::model::{ForecastBatch, Forecaster};
use irrcast::ncde::NcdePe;
use irrcast::pe::{embed_values, pe_distance, PeInput, PositionalEmbedding};
use irrcast::{Error, Result};
use serde::{Deserialize, Serialize};

/// Median R² above which an embedding counts as per-dimension linear in time.
pub const LINEAR_R2_FLAG: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    pub r2: Vec<f64>,
    pub median_r2: f64,
    /// Least-squares slope per dimension.
    pub slopes: Vec<f64>,
}

impl LinearityReport {
    pub fn looks_linear(&self) -> bool {
        self.median_r2 > LINEAR_R2_FLAG
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Fits `y = k t + c` to every column of `rows` and reports R². A column
/// with no variance is fitted exactly and scores 1.
pub fn r_squared_per_dimension(times: &[f64], rows: &Tensor) -> Result<LinearityReport> {
    if times.len() < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: times.len() });
    }
    if rows.rank() != 2 || rows.shape()[0] != times.len() {
        return Err(Error::ShapeMismatch(format!("{} times for rows {:?}", times.len(), rows.shape())));
    }
    let (n, d) = (times.len(), rows.shape()[1]);
    let tm = times.iter().sum::<f64>() / n as f64;
    let stt: f64 = times.iter().map(|t| (t - tm) * (t - tm)).sum();
    if stt == 0.0 {
        return Err(Error::TooFewSamples { needed: 2, got: 1 });
    }
    let mut r2 = Vec::with_capacity(d);
    let mut slopes = Vec::with_capacity(d);
    for j in 0..d {
        let y: Vec<f64> = (0..n).map(|i| rows.data()[i * d + j]).collect();
        let ym = y.iter().sum::<f64>() / n as f64;
        let sty: f64 = times.iter().zip(&y).map(|(t, v)| (t - tm) * (v - ym)).sum();
        let k = sty / stt;
        let c = ym - k * tm;
        let ss_res: f64 = times.iter().zip(&y).map(|(t, v)| (v - k * t - c).powi(2)).sum();
        let ss_tot: f64 = y.iter().map(|v| (v - ym).powi(2)).sum();
        r2.push(if ss_tot <= f64::EPSILON * f64::EPSILON { 1.0 } else { 1.0 - ss_res / ss_tot });
        slopes.push(k);
    }
    Ok(LinearityReport { median_r2: median(&r2), r2, slopes })
}

/// Evaluates a trained NCDE embedding on `probe_times` (relative time) and
/// measures how linear each dimension is.
pub fn linearity_probe(pe: &NcdePe, store: &ParamStore, probe_times: &[f64]) -> Result<LinearityReport> {
    if probe_times.len() < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: probe_times.len() });
    }
    let rows = embed_values(pe, store, &PeInput::from_times(probe_times)?)?.rows;
    r_squared_per_dimension(probe_times, &rows)
}

/// Average ranks, with ties sharing the mean of their positions.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} samples", a.len(), b.len())));
    }
    if a.len() < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: a.len() });
    }
    pearson(&ranks(a), &ranks(b)).ok_or(Error::UndefinedCorrelation)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceGapReport {
    /// `(|t_i - t_j|, d(p_i, p_j))` for every unordered pair.
    pub pairs: Vec<(f64, f64)>,
    pub spearman: f64,
}

/// Pairwise time gaps against embedding distances with their rank correlation.
pub fn distance_gap_report<F>(pe: F, times: &[f64]) -> Result<DistanceGapReport>
where
    F: Fn(&[f64]) -> Result<Tensor>,
{
    if times.len() < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: times.len() });
    }
    let rows = pe(times)?;
    if rows.rank() != 2 || rows.shape()[0] != times.len() {
        return Err(Error::ShapeMismatch(format!("{} times for rows {:?}", times.len(), rows.shape())));
    }
    let mut pairs = Vec::with_capacity(times.len() * (times.len() - 1) / 2);
    for i in 0..times.len() {
        for j in i + 1..times.len() {
            pairs.push(((times[i] - times[j]).abs(), pe_distance(rows.row(i), rows.row(j))?));
        }
    }
    let gaps: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let dists: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let spearman = spearman(&gaps, &dists)?;
    Ok(DistanceGapReport { pairs, spearman })
}

/// Adapts any embedding to a function of raw times.
pub fn times_fn<'a>(pe: &'a dyn PositionalEmbedding, store: &'a ParamStore) -> impl Fn(&[f64]) -> Result<Tensor> + 'a {
    move |t: &[f64]| Ok(embed_values(pe, store, &PeInput::from_times(t)?)?.rows)
}

/// `batch` with encoder values and masks reordered by `perm` while every
/// timestamp stays in place.
pub fn permute_encoder_values(batch: &ForecastBatch, perm: &[usize]) -> Result<ForecastBatch> {
    let n = batch.n_past;
    let mut sorted = perm.to_vec();
    sorted.sort_unstable();
    if sorted != (0..n).collect::<Vec<_>>() {
        return Err(Error::InvalidConfig(format!("not a permutation of 0..{n}")));
    }
    let l = batch.n_vars;
    let mut out = batch.clone();
    for b in 0..batch.batch {
        for (i, &p) in perm.iter().enumerate() {
            let (dst, src) = ((b * n + i) * l, (b * n + p) * l);
            out.enc_values[dst..dst + l].copy_from_slice(&batch.enc_values[src..src + l]);
            out.enc_mask[dst..dst + l].copy_from_slice(&batch.enc_mask[src..src + l]);
        }
    }
    Ok(out)
}

/// Largest gap between the encoding of permuted values and the permuted
/// encoding. Zero for a model that cannot perceive position.
pub fn permutation_deviation(model: &Forecaster, batch: &ForecastBatch, perm: &[usize]) -> Result<f64> {
    let (n, d) = (batch.n_past, model.config.d_model);
    let mut tape = Tape::new();
    let a = model.encode(&mut tape, batch)?;
    let b = model.encode(&mut tape, &permute_encoder_values(batch, perm)?)?;
    let (a, b) = (tape.value(a).data(), tape.value(b).data());
    let mut worst: f64 = 0.0;
    for w in 0..batch.batch {
        for (i, &p) in perm.iter().enumerate() {
            for k in 0..d {
                worst = worst.max((b[(w * n + i) * d + k] - a[(w * n + p) * d + k]).abs());
            }
        }
    }
    Ok(worst)
}


/// Outcome of training an NCDE embedding inside the forecaster and probing it.
#[derive(Debug, Clone)]
pub struct NcdeProbe {
    pub report: LinearityReport,
    pub probe_times: Vec<f64>,
    pub training: irrcast::model::TrainingLog,
}

/// Trains a forecaster with the NCDE embedding on the first sweep cell of
/// `config` and probes the frozen embedding on `points` evenly spaced
/// relative times.
pub fn ncde_linearity_run(config: &crate::config::ExperimentConfig, seed: u64, points: usize) -> anyhow::Result<NcdeProbe> {
    use crate::config::PeSpec;
    use crate::experiment::{build_model, load_series, prepare};
    use irrcast::pe::PeMethod;

    let series = load_series(&config.dataset)?;
    let rate = config.missing_rates[0];
    let horizon = config.prediction_lengths[0];
    let data = prepare(&series, config, rate, horizon, seed)?;
    let mut model = build_model(config, &data, &PeSpec::Name(PeMethod::Ncde), horizon, seed)?;
    let training = irrcast::model::TrainConfig { seed, ..config.training.clone() };
    let log = irrcast::model::train(&mut model, &data.train, &data.val, &training)?;
    let pe = model.ncde().ok_or_else(|| anyhow::anyhow!("model has no NCDE embedding"))?;
    let probe_times: Vec<f64> = (0..points).map(|k| k as f64 / (points - 1).max(1) as f64).collect();
    let report = linearity_probe(pe, &model.store, &probe_times)?;
    Ok(NcdeProbe { report, probe_times, training: log })
}
