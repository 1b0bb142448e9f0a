use std::f64::consts::TAU;

use chrono::NaiveDateTime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::series::{IrregularSeries, TIMESTAMP_FORMAT};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    SineMixture,
    TrendSeason,
    ArProcess,
}

impl SynthKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SineMixture => "sine_mixture",
            Self::TrendSeason => "trend_season",
            Self::ArProcess => "ar_process",
        }
    }
}

impl std::fmt::Display for SynthKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine_mixture" => Ok(Self::SineMixture),
            "trend_season" => Ok(Self::TrendSeason),
            "ar_process" => Ok(Self::ArProcess),
            other => Err(Error::BadParams(format!("unknown generator `{other}`"))),
        }
    }
}

/// Generator parameters. Periods are in hours; `trend` is the total drift
/// across the series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub n_vars: usize,
    pub amplitude: f64,
    pub periods: Vec<f64>,
    pub trend: f64,
    pub noise_std: f64,
    pub ar_coef: f64,
    pub start: String,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_vars: 3,
            amplitude: 1.0,
            periods: vec![24.0, 24.0 * std::f64::consts::SQRT_2 * 2.0],
            trend: 1.0,
            noise_std: 0.1,
            ar_coef: 0.9,
            start: "2016-07-01 00:00:00".into(),
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<NaiveDateTime> {
        if self.n_vars == 0 {
            return Err(Error::BadParams("n_vars must be positive".into()));
        }
        if self.periods.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::BadParams("periods must be positive".into()));
        }
        if !(self.noise_std >= 0.0) || !self.amplitude.is_finite() || !self.trend.is_finite() {
            return Err(Error::BadParams("amplitude, trend and noise must be finite, noise ≥ 0".into()));
        }
        if !(self.ar_coef.abs() < 1.0) {
            return Err(Error::BadParams("ar_coef must lie in (-1, 1)".into()));
        }
        NaiveDateTime::parse_from_str(&self.start, TIMESTAMP_FORMAT)
            .map_err(|e| Error::BadParams(format!("start `{}`: {e}", self.start)))
    }
}

/// Regular hourly multivariate series, deterministic under `seed`.
pub fn synth_generate(kind: SynthKind, params: &SynthParams, length: usize, seed: u64) -> Result<IrregularSeries> {
    if length < 2 {
        return Err(Error::SeriesTooShort { needed: 2, available: length });
    }
    let start = params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, params.noise_std.max(f64::MIN_POSITIVE)).unwrap();
    let l = params.n_vars;
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(l);
    for v in 0..l {
        let scale = params.amplitude * (1.0 + 0.25 * v as f64);
        let phases: Vec<f64> = params.periods.iter().map(|_| rng.gen_range(0.0..TAU)).collect();
        let offset = rng.gen_range(-0.5..0.5);
        let drift = params.trend * (1.0 - 0.5 * v as f64 / l as f64);
        let season = |t: f64| -> f64 {
            params.periods.iter().zip(&phases).map(|(p, ph)| (TAU * t / p + ph).sin()).sum::<f64>()
        };
        let mut col = Vec::with_capacity(length);
        let mut ar = 0.0;
        for i in 0..length {
            let t = i as f64;
            let frac = t / (length - 1) as f64;
            let eps = if params.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let x = match kind {
                SynthKind::SineMixture => offset + scale * season(t) + drift * frac + eps,
                SynthKind::TrendSeason => {
                    let p0 = params.periods.first().copied().unwrap_or(24.0);
                    offset + drift * 3.0 * frac + scale * (TAU * t / p0 + phases.first().unwrap_or(&0.0)).sin() + eps
                }
                SynthKind::ArProcess => {
                    ar = params.ar_coef * ar + eps;
                    offset + scale * ar
                }
            };
            col.push(x);
        }
        cols.push(col);
    }
    let timestamps = (0..length).map(|i| start + chrono::Duration::hours(i as i64)).collect();
    let values = (0..length).map(|i| cols.iter().map(|c| Some(c[i])).collect()).collect();
    let names = (0..l).map(|v| format!("x{v}")).collect();
    IrregularSeries::new(timestamps, values, names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(s: &IrregularSeries, v: usize) -> Vec<f64> {
        s.values().iter().map(|r| r[v].unwrap()).collect()
    }

    #[test]
    fn zero_amplitude_is_constant() {
        let p = SynthParams { amplitude: 0.0, trend: 0.0, noise_std: 0.0, ..Default::default() };
        let s = synth_generate(SynthKind::SineMixture, &p, 100, 1).unwrap();
        for v in 0..3 {
            let c = col(&s, v);
            assert!(c.iter().all(|&x| x == c[0]));
        }
    }

    #[test]
    fn same_seed_same_series() {
        let p = SynthParams::default();
        for kind in [SynthKind::SineMixture, SynthKind::TrendSeason, SynthKind::ArProcess] {
            let a = synth_generate(kind, &p, 200, 5).unwrap();
            assert_eq!(a, synth_generate(kind, &p, 200, 5).unwrap());
            assert_ne!(a, synth_generate(kind, &p, 200, 6).unwrap());
        }
    }

    #[test]
    fn period_24_repeats_at_lag_24() {
        let p = SynthParams { periods: vec![24.0], trend: 0.0, noise_std: 0.0, ..Default::default() };
        let s = synth_generate(SynthKind::SineMixture, &p, 240, 2).unwrap();
        let c = col(&s, 1);
        for i in 0..c.len() - 24 {
            assert!((c[i] - c[i + 24]).abs() < 1e-9);
        }
    }

    #[test]
    fn hourly_grid() {
        let s = synth_generate(SynthKind::ArProcess, &SynthParams::default(), 10, 0).unwrap();
        let secs = s.epoch_seconds();
        assert!(secs.windows(2).all(|w| w[1] - w[0] == 3600.0));
    }

    #[test]
    fn bad_params() {
        let p = SynthParams { n_vars: 0, ..Default::default() };
        assert!(matches!(synth_generate(SynthKind::SineMixture, &p, 10, 0), Err(Error::BadParams(_))));
        let p = SynthParams { ar_coef: 1.0, ..Default::default() };
        assert!(matches!(synth_generate(SynthKind::ArProcess, &p, 10, 0), Err(Error::BadParams(_))));
        assert!("nope".parse::<SynthKind>().is_err());
    }
}
