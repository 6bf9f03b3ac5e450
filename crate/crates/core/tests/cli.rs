use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cfopt::cli::{load_config, parse_sweep, BenchConfig, Cli, Command as Sub, SweepParam, TrainConfig};
use cfopt::data::{GenSpec, LayerGen};
use cfopt::metrics::{read_task_rows, summarize, SummaryRow};
use clap::Parser;

fn cfopt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfopt"))
        .current_dir(dir)
        .env_remove("CFOPT_OUT_DIR")
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    fs::write(&path, "samples = 10\nsamples_typo = 3\n").unwrap();
    assert!(load_config::<GenSpec>(Some(&path)).is_err());
    fs::write(&path, "[train]\ndepth = 2\nwidth = 4\n").unwrap();
    assert!(load_config::<TrainConfig>(Some(&path)).is_err());
    let o = cfopt(dir.path(), &["--config", "c.toml", "train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown field"));
}

#[test]
fn flags_override_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    fs::write(&path, "n_x = 3\nsamples = 50\n[layer]\nkind = \"knapsack\"\nitems = 6\n").unwrap();
    let mut cfg: GenSpec = load_config(Some(&path)).unwrap();
    let cli = Cli::try_parse_from(["cfopt", "gen", "--samples", "20", "--items", "5"]).unwrap();
    let Sub::Gen(args) = cli.command else { panic!("expected gen") };
    args.apply(&mut cfg);
    assert_eq!((cfg.n_x, cfg.samples), (3, 20));
    match cfg.layer {
        LayerGen::Knapsack(k) => assert_eq!(k.items, 5),
        LayerGen::Grid { .. } => panic!("layer kind lost"),
    }

    let mut bench: BenchConfig = BenchConfig::default();
    let cli = Cli::try_parse_from(["cfopt", "bench", "--kinds", "epsilon", "--eps", "0.2,2", "--sweep", "depth=1,2"])
        .unwrap();
    let Sub::Bench(args) = cli.command else { panic!("expected bench") };
    args.apply(&mut bench).unwrap();
    assert_eq!(bench.eps, vec![0.2, 2.0]);
    assert_eq!(bench.sweep.unwrap().param, SweepParam::Depth);
}

#[test]
fn sweep_syntax() {
    let s = parse_sweep("n_x=5,10").unwrap();
    assert_eq!((s.param, s.values), (SweepParam::NX, vec![5, 10]));
    assert!(parse_sweep("width=3").is_err());
    assert!(parse_sweep("items").is_err());
}

#[test]
fn pipeline_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&cfopt(d, &["--seed", "4", "--out", "data", "gen", "--grid-n", "3", "--samples", "120", "--n-x", "4"]));
    ok(&cfopt(
        d,
        &["--seed", "4", "--out", "pipe", "train", "--data", "data", "--train-rows", "80", "--epochs", "10", "--lr", "0.01"],
    ));
    for f in ["pipe/manifest.json", "pipe/train_trace.csv", "pipe/run.json", "data/run.json"] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    let o = cfopt(
        d,
        &["--out", "ex", "explain", "--pipeline", "pipe", "--data", "data", "--row", "100", "--kind", "epsilon", "--eps", "0.5"],
    );
    ok(&o);
    let rec: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ex/explanation.json")).unwrap()).unwrap();
    assert_eq!(rec["kind"], "epsilon");

    let o = cfopt(
        d,
        &[
            "--threads", "2", "--out", "bench", "bench", "--data", "data", "--pipeline", "pipe", "--test-rows", "40",
            "--tasks", "4",
        ],
    );
    ok(&o);
    let rows = read_task_rows(&d.join("bench/rows.csv")).unwrap();
    assert_eq!(rows.len(), 12);
    let mut r = csv::Reader::from_path(d.join("bench/summary.csv")).unwrap();
    let stored: Vec<SummaryRow> = r.deserialize().collect::<Result<_, _>>().unwrap();
    let label = &rows[0].setting;
    let mine: Vec<_> = rows.iter().filter(|r| &r.setting == label).cloned().collect();
    let recomputed: Vec<SummaryRow> = summarize(&mine).into_iter().map(|m| SummaryRow::new(label, m)).collect();
    let stored: Vec<SummaryRow> = stored.into_iter().filter(|s| &s.setting == label).collect();
    assert_eq!(stored.len(), recomputed.len());
    for (a, b) in stored.iter().zip(&recomputed) {
        assert_eq!((&a.metric, a.n), (&b.metric, b.n));
        assert!((a.mean - b.mean).abs() <= 1e-12 * (1.0 + b.mean.abs()));
    }
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_cfopt"))
        .current_dir(dir.path())
        .env("CFOPT_OUT_DIR", "fromenv")
        .args(["verify-region", "--n-z", "8", "--grid-points", "201", "--radius-max", "5"])
        .output()
        .unwrap();
    ok(&o);
    assert!(dir.path().join("fromenv/region.json").exists());
}

#[test]
fn errors_give_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let o = cfopt(dir.path(), &["train", "--data", "missing"]);
    assert_eq!(o.status.code(), Some(1));
    let o = cfopt(dir.path(), &["verify-region", "--grid-points", "10"]);
    assert_eq!(o.status.code(), Some(1));
    let o = cfopt(dir.path(), &["gen", "--grid-n", "3", "--knapsack"]);
    assert!(!o.status.success());
    let o = cfopt(dir.path(), &["table1", "--vae", "v"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn table1_prior_column() {
    let dir = tempfile::tempdir().unwrap();
    ok(&cfopt(dir.path(), &["--out", "t", "table1"]));
    let text = fs::read_to_string(dir.path().join("t/table1.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("kappa,prior_pct,empirical_pct"));
    assert_eq!(lines.count(), 9);
}
