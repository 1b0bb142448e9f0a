use std::fmt;

use irrcast::autodiff::{ParamStore, Tape};
use irrcast::ncde::{ControlPath, NcdePe};
use irrcast::pe::{
    build_pe, check_monotonicity, check_translation_invariance, pe_distance, PeInput, PeMethod, PeMethodConfig,
    PositionalEmbedding,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::probe::times_fn;

pub const TRANSLATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    Monotonicity,
    TranslationInvariance,
    Symmetry,
    Inductive,
    DataDriven,
    IrregularityAdaptable,
}

impl Property {
    pub const ALL: [Property; 6] = [
        Property::Monotonicity,
        Property::TranslationInvariance,
        Property::Symmetry,
        Property::Inductive,
        Property::DataDriven,
        Property::IrregularityAdaptable,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Property::Monotonicity => "monotonicity",
            Property::TranslationInvariance => "translation_invariance",
            Property::Symmetry => "symmetry",
            Property::Inductive => "inductive",
            Property::DataDriven => "data_driven",
            Property::IrregularityAdaptable => "irregularity_adaptable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Outcome {
    Pass,
    Fail(String),
    NotApplicable(String),
}

impl Outcome {
    pub fn passed(&self) -> bool {
        matches!(self, Outcome::Pass)
    }

    pub fn label(&self) -> &'static str {
        match self {
            Outcome::Pass => "pass",
            Outcome::Fail(_) => "fail",
            Outcome::NotApplicable(_) => "n/a",
        }
    }

    pub fn witness(&self) -> &str {
        match self {
            Outcome::Pass => "",
            Outcome::Fail(w) | Outcome::NotApplicable(w) => w,
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub pe_method: PeMethod,
    pub seed: u64,
    pub property: Property,
    pub outcome: Outcome,
}

/// Time sampling used by the suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteSettings {
    /// Sample times are drawn from `[0, span]`.
    pub span: f64,
    pub samples: usize,
}

impl Default for SuiteSettings {
    fn default() -> Self {
        Self { span: 1000.0, samples: 40 }
    }
}

/// Configuration of `method` for the suite's time range: grid tables cover
/// `[0, span]` in 100 cells and the slowest sinusoid period is a tenth of it.
pub fn suite_method_config(method: PeMethod, d_model: usize, settings: &SuiteSettings) -> PeMethodConfig {
    let grid = settings.span / 100.0;
    let max_len = if method == PeMethod::Simple { 101 } else { settings.samples };
    let slowest = std::f64::consts::TAU * 10000f64.powf((d_model as f64 - 2.0) / d_model as f64);
    let scale = slowest * 10.0 / settings.span;
    PeMethodConfig::with_defaults(method, d_model, max_len, grid, scale)
}

fn build(config: &PeMethodConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> irrcast::Result<Box<dyn PositionalEmbedding>> {
    if config.method == PeMethod::Ncde {
        return Ok(Box::new(NcdePe::new(store, config.d_model, ControlPath::TimeOnly, rng)));
    }
    build_pe(config, store, rng)
}

fn sorted_times(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut t: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

fn monotonicity(pe: &dyn PositionalEmbedding, store: &ParamStore, times: &[f64]) -> Outcome {
    match check_monotonicity(times_fn(pe, store), times) {
        Ok(r) if r.violations == 0 => Outcome::Pass,
        Ok(r) => {
            let (a, b, c) = r.witnesses[0];
            Outcome::Fail(format!("{} of {} triples violate, e.g. ({a:.4}, {b:.4}, {c:.4})", r.violations, r.comparable))
        }
        Err(e) => Outcome::Fail(e.to_string()),
    }
}

fn translation(pe: &dyn PositionalEmbedding, store: &ParamStore, base: &[f64], lag: f64) -> Outcome {
    match check_translation_invariance(times_fn(pe, store), base, lag) {
        Ok(dev) if dev < TRANSLATION_TOL => Outcome::Pass,
        Ok(dev) => Outcome::Fail(format!("distance at lag {lag:.4} varies by {dev:.3e}")),
        Err(e) => Outcome::Fail(e.to_string()),
    }
}

fn symmetry(pe: &dyn PositionalEmbedding, store: &ParamStore, times: &[f64]) -> Outcome {
    let rows = match times_fn(pe, store)(times) {
        Ok(r) => r,
        Err(e) => return Outcome::NotApplicable(e.to_string()),
    };
    for i in 0..times.len() {
        for j in 0..times.len() {
            let (a, b) = (pe_distance(rows.row(i), rows.row(j)), pe_distance(rows.row(j), rows.row(i)));
            if a.ok() != b.ok() {
                return Outcome::Fail(format!("d({}, {}) differs from its reverse", times[i], times[j]));
            }
        }
    }
    Outcome::Pass
}

fn inductive(pe: &dyn PositionalEmbedding, store: &ParamStore, settings: &SuiteSettings, rng: &mut ChaCha8Rng) -> Outcome {
    let beyond = sorted_times(rng, settings.samples, settings.span, 10.0 * settings.span);
    match times_fn(pe, store)(&beyond) {
        Ok(rows) if rows.is_finite() => Outcome::Pass,
        Ok(_) => Outcome::Fail("non-finite embedding beyond the training span".into()),
        Err(e) => Outcome::Fail(e.to_string()),
    }
}

fn data_driven(pe: &dyn PositionalEmbedding, store: &ParamStore, times: &[f64]) -> Outcome {
    let ids = pe.param_ids();
    if ids.is_empty() {
        return Outcome::Fail("no learnable parameters".into());
    }
    let run = || -> irrcast::Result<f64> {
        let mut tape = Tape::new();
        let rows = pe.embed(&mut tape, store, &PeInput::from_times(times)?)?;
        let sq = tape.mul(rows, rows)?;
        let loss = tape.sum(sq)?;
        let grads = tape.backward(loss)?;
        Ok(ids.iter().filter_map(|&id| grads.param(id)).map(|g| g.norm()).sum())
    };
    match run() {
        Ok(n) if n > 0.0 => Outcome::Pass,
        Ok(_) => Outcome::Fail("zero gradient into the embedding parameters".into()),
        Err(e) => Outcome::Fail(e.to_string()),
    }
}

fn irregularity(pe: &dyn PositionalEmbedding, store: &ParamStore, a: &[f64], b: &[f64]) -> Outcome {
    let f = times_fn(pe, store);
    match (f(a), f(b)) {
        (Ok(x), Ok(y)) => match x.max_abs_diff(&y) {
            Ok(d) if d > 1e-12 => Outcome::Pass,
            Ok(_) => Outcome::Fail(format!("identical embeddings for two different sets of {} timestamps", a.len())),
            Err(e) => Outcome::Fail(e.to_string()),
        },
        (Err(e), _) | (_, Err(e)) => Outcome::Fail(e.to_string()),
    }
}

/// Evaluates the six properties for every method and seed.
pub fn run_property_suite(methods: &[PeMethodConfig], seeds: &[u64], settings: &SuiteSettings) -> Vec<PropertyResult> {
    let mut out = Vec::new();
    for config in methods {
        for &seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let outcomes: Vec<(Property, Outcome)> = match build(config, &mut store, &mut rng) {
                Err(e) => Property::ALL.iter().map(|&p| (p, Outcome::NotApplicable(e.to_string()))).collect(),
                Ok(pe) => {
                    let pe = pe.as_ref();
                    let n = settings.samples;
                    let times = sorted_times(&mut rng, n, 0.0, settings.span);
                    let base = sorted_times(&mut rng, n / 2, 0.0, settings.span / 2.0);
                    let lag = rng.gen_range(0.1..0.5) * settings.span;
                    let other = sorted_times(&mut rng, times.len(), 0.0, settings.span);
                    vec![
                        (Property::Monotonicity, monotonicity(pe, &store, &times)),
                        (Property::TranslationInvariance, translation(pe, &store, &base, lag)),
                        (Property::Symmetry, symmetry(pe, &store, &times)),
                        (Property::Inductive, inductive(pe, &store, settings, &mut rng)),
                        (Property::DataDriven, data_driven(pe, &store, &times)),
                        (Property::IrregularityAdaptable, irregularity(pe, &store, &times, &other)),
                    ]
                }
            };
            out.extend(outcomes.into_iter().map(|(property, outcome)| PropertyResult {
                pe_method: config.method,
                seed,
                property,
                outcome,
            }));
        }
    }
    out
}

/// Outcome labels of `method` for one seed, in [`Property::ALL`] order.
pub fn method_row(results: &[PropertyResult], method: PeMethod, seed: u64) -> Vec<&Outcome> {
    Property::ALL
        .iter()
        .filter_map(|&p| results.iter().find(|r| r.pe_method == method && r.seed == seed && r.property == p))
        .map(|r| &r.outcome)
        .collect()
}

/// True when every method has the same pass/fail labels under every seed.
pub fn stable_across_seeds(results: &[PropertyResult]) -> bool {
    let mut methods: Vec<PeMethod> = results.iter().map(|r| r.pe_method).collect();
    methods.dedup();
    let mut seeds: Vec<u64> = results.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    methods.iter().all(|&m| {
        let labels = |s| method_row(results, m, s).iter().map(|o| o.label()).collect::<Vec<_>>();
        let first = labels(seeds[0]);
        seeds.iter().all(|&s| labels(s) == first)
    })
}

pub fn format_matrix(results: &[PropertyResult], seed: u64) -> String {
    let mut methods: Vec<PeMethod> = results.iter().map(|r| r.pe_method).collect();
    methods.dedup();
    let mut s = format!("{:<16}", "method");
    for p in Property::ALL {
        s.push_str(&format!(" {:>23}", p.as_str()));
    }
    s.push('\n');
    for m in methods {
        s.push_str(&format!("{:<16}", m.as_str()));
        for o in method_row(results, m, seed) {
            s.push_str(&format!(" {:>23}", o.label()));
        }
        s.push('\n');
    }
    s
}

pub fn outcome_of(results: &[PropertyResult], method: PeMethod, seed: u64, property: Property) -> Option<&Outcome> {
    results.iter().find(|r| r.pe_method == method && r.seed == seed && r.property == property).map(|r| &r.outcome)
}

