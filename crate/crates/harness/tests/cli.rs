use std::process::Command;

fn irrcast(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_irrcast")).args(args).output().unwrap()
}

const TINY: &str = r#"
n_past = 12
prediction_lengths = [6]
missing_rates = [0.2]
pe_methods = ["ctlpe", "irr_sinusoidal"]
seeds = [0]
stride = 3

[dataset]
source = "synthetic"
generator = "sine_mixture"
length = 240

[model]
d_model = 8
n_heads = 2
feedforward_width = 16

[training]
epochs = 1
"#;

#[test]
fn train_eval_sweep_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("out");
    let base = ["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    for cmd in ["train", "eval", "sweep", "report", "distgap"] {
        let o = irrcast(&[&base[..], &[cmd]].concat());
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(out.join("model.ckpt").exists());
    assert!(out.join("results.csv").exists());
    assert!(out.join("summary.csv").exists());
    assert!(out.join("plotdata/training_curves.csv").exists());
    assert!(out.join("plotdata/distance_gap_ctlpe.csv").exists());
    let table = String::from_utf8(irrcast(&[&base[..], &["report"]].concat()).stdout).unwrap();
    assert!(table.contains("irr_sinusoidal"));
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let o = irrcast(&["--config", "/nonexistent/config.toml", "sweep"]);
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");

    let dir = tempfile::tempdir().unwrap();
    let o = irrcast(&["--out", dir.path().to_str().unwrap(), "report"]);
    assert!(!o.status.success());
}
