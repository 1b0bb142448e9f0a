use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use irrcast::model::{evaluate, load_checkpoint, save_checkpoint};
use irrcast::pe::{build_pe, PeMethod};
use irrcast_harness::aggregate::{aggregate, format_table};
use irrcast_harness::config::ExperimentConfig;
use irrcast_harness::experiment::{
    build_model, load_series, prepare, read_results, run_experiment, CurvePoint, RESULTS_FILE,
};
use irrcast_harness::invariants::run_invariant_suite;
use irrcast_harness::probe::{distance_gap_report, ncde_linearity_run, times_fn, LINEAR_R2_FLAG};
use irrcast_harness::props::{format_matrix, run_property_suite, suite_method_config, SuiteSettings};
use irrcast_harness::report;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Parser)]
#[command(name = "irrcast", version, about = "Forecasting harness for irregularly sampled time series")]
struct Cli {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the configured seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the first configured cell and save a checkpoint.
    Train,
    /// Evaluate a checkpoint on the test split of the first configured cell.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run every method, missing rate, prediction length and seed.
    Sweep,
    /// Train the NCDE embedding and report how linear each dimension is.
    Probe {
        #[arg(long, default_value_t = 50)]
        points: usize,
    },
    /// Pairwise time gap against embedding distance for each configured method.
    Distgap {
        #[arg(long, default_value_t = 60)]
        points: usize,
        /// Time span as a multiple of the slowest sinusoid period.
        #[arg(long, default_value_t = 10.0)]
        periods: f64,
    },
    /// Check the six embedding properties and the numerical invariants.
    Proptest,
    /// Summarize an existing results file.
    Report,
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn first_cell(config: &ExperimentConfig) -> (f64, usize, u64) {
    (config.missing_rates[0], config.prediction_lengths[0], config.seeds[0])
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = load_config(&cli)?;
    let out = config.output_dir.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.command {
        Command::Train => {
            let (rate, horizon, seed) = first_cell(&config);
            let pe = &config.pe_methods[0];
            let series = load_series(&config.dataset)?;
            let data = prepare(&series, &config, rate, horizon, seed)?;
            let mut model = build_model(&config, &data, pe, horizon, seed)?;
            let training = irrcast::model::TrainConfig { seed, ..config.training.clone() };
            let log = irrcast::model::train(&mut model, &data.train, &data.val, &training)?;
            let (mse, mae) = evaluate(&model, &data.test, config.training.batch_size)?;
            let path = out.join(CHECKPOINT_FILE);
            save_checkpoint(&model, &path)?;
            let curves: Vec<CurvePoint> = log
                .epochs
                .iter()
                .map(|e| CurvePoint {
                    pe_method: pe.method(),
                    missing_rate: rate,
                    prediction_length: horizon,
                    seed,
                    epoch: e.epoch,
                    train_loss: e.train_loss,
                    val_mse: e.val_mse,
                    val_mae: e.val_mae,
                })
                .collect();
            report::write_training_curves(&out, &curves)?;
            println!("{} rate {rate} length {horizon} seed {seed}: test mse {mse:.6} mae {mae:.6}", pe.method());
            println!("checkpoint written to {}", path.display());
        }
        Command::Eval { checkpoint } => {
            let (rate, horizon, seed) = first_cell(&config);
            let path = checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE));
            let model = load_checkpoint(&path)?;
            let series = load_series(&config.dataset)?;
            let data = prepare(&series, &config, rate, horizon, seed)?;
            let (mse, mae) = evaluate(&model, &data.test, config.training.batch_size)?;
            println!("test mse {mse:.6} mae {mae:.6}");
        }
        Command::Sweep => {
            let output = run_experiment(&config, cli.threads)?;
            let summaries = aggregate(&output.rows);
            report::write_summary(&out, &summaries)?;
            report::write_training_curves(&out, &output.curves)?;
            print!("{}", format_table(&summaries));
            let failed = output.rows.iter().filter(|r| !r.is_ok()).count();
            if failed > 0 {
                bail!("{failed} of {} cells failed, see {}", output.rows.len(), out.join(RESULTS_FILE).display());
            }
        }
        Command::Probe { points } => {
            let seed = config.seeds[0];
            let run = ncde_linearity_run(&config, seed, *points)?;
            report::write_linearity(&out, &run.report)?;
            for (k, r2) in run.report.r2.iter().enumerate() {
                println!("dim {k:>3}  R2 {:.4}", r2.max(0.0));
            }
            let flag = if run.report.looks_linear() { "yes" } else { "no" };
            println!("median R2 {:.4}; above {LINEAR_R2_FLAG}: {flag}", run.report.median_r2.max(0.0));
        }
        Command::Distgap { points, periods } => {
            let settings = SuiteSettings { span: 1000.0, samples: *points };
            let seed = config.seeds[0];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let span = settings.span * periods / 10.0;
            let mut times: Vec<f64> = (0..*points).map(|_| rng.gen_range(0.0..span)).collect();
            times.sort_by(f64::total_cmp);
            for spec in &config.pe_methods {
                let method = spec.method();
                if method == PeMethod::Ncde {
                    println!("{method}: skipped, needs a trained model (use probe)");
                    continue;
                }
                let cfg = suite_method_config(method, config.model.d_model, &settings);
                let mut store = irrcast::autodiff::ParamStore::new();
                let pe = build_pe(&cfg, &mut store, &mut rng)?;
                match distance_gap_report(times_fn(pe.as_ref(), &store), &times) {
                    Ok(r) => {
                        report::write_distance_gap(&out, method, &r)?;
                        println!("{method}: spearman {:.6}", r.spearman);
                    }
                    Err(e) => println!("{method}: {e}"),
                }
            }
        }
        Command::Proptest => {
            let settings = SuiteSettings::default();
            let methods: Vec<_> =
                PeMethod::ALL.iter().map(|&m| suite_method_config(m, config.model.d_model, &settings)).collect();
            let results = run_property_suite(&methods, &config.seeds, &settings);
            report::write_property_matrix(&out, &results)?;
            print!("{}", format_matrix(&results, config.seeds[0]));
            let checks = run_invariant_suite(config.seeds[0])?;
            let mut failed = 0;
            for c in &checks {
                let op = if c.below { "<" } else { ">=" };
                let status = if c.passed() { "pass" } else { "FAIL" };
                println!("{status}  {}: {:.3e} {op} {:.1e}", c.name, c.value, c.bound);
                failed += usize::from(!c.passed());
            }
            if failed > 0 {
                bail!("{failed} numerical invariants failed");
            }
        }
        Command::Report => {
            let path = out.join(RESULTS_FILE);
            let rows = read_results(&path).with_context(|| format!("reading {}", path.display()))?;
            let summaries = aggregate(&rows);
            report::write_summary(&out, &summaries)?;
            print!("{}", format_table(&summaries));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("IRRCAST_LOG", "error")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
