use std::path::Path;
use std::process::{Command, Output};

use dfp::agent::CSV_HEADER;
use dfp_cli::commands::{self, Axis};
use dfp_cli::config::{RunConfig, RunPhase};

fn dfp(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfp"))
        .args(args)
        .env("DFP_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// A bandit run small enough for a unit-test budget.
fn tiny(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.run.output_dir = dir.to_path_buf();
    cfg.run.offline_steps = 30;
    cfg.run.online_steps = 20;
    cfg.run.log_interval = 10;
    cfg.run.checkpoint_interval = 25;
    cfg.data.episodes = 100;
    cfg.eval.interval = 25;
    cfg.eval.episodes = 4;
    cfg.agent.batch_size = 16;
    cfg.network.hidden_width = 16;
    cfg
}

#[test]
fn same_seed_datasets_are_byte_identical() {
    let root = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = dfp(
            &["generate-data", "--output-dir", name, "--episodes", "500", "--seed", "3"],
            root.path(),
        );
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let read = |n: &str| std::fs::read(root.path().join(n).join("dataset.bin")).unwrap();
    assert_eq!(read("a"), read("b"));

    let manifest = std::fs::read_to_string(root.path().join("a/dataset.bin.manifest")).unwrap();
    assert!(manifest.contains("seed = 3") && manifest.contains("env_id = bandit2g"));
    let balance = manifest
        .lines()
        .find_map(|l| l.strip_prefix("mode_balance = "))
        .unwrap();
    for f in balance.split(',') {
        let f: f64 = f.parse().unwrap();
        assert!((0.3..=0.7).contains(&f), "mode balance {balance}");
    }
}

#[test]
fn missing_env_id_is_a_usage_error() {
    let root = tempfile::tempdir().unwrap();
    let out = dfp(&["generate-data", "--env-id", ""], root.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("run.env_id"));
}

#[test]
fn invalid_fields_are_listed_before_any_work() {
    let root = tempfile::tempdir().unwrap();
    let out = dfp(
        &["train", "--output-dir", "r", "--set", "agent.gamma=1.5", "--set", "loss.k_positives=99"],
        root.path(),
    );
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("agent.gamma") && err.contains("loss.k_positives"), "{err}");
    assert!(!root.path().join("r").exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let root = tempfile::tempdir().unwrap();
    let file = root.path().join("c.toml");
    std::fs::write(&file, "[run]\nseed = 1\nsteps = 4\n").unwrap();
    let out = dfp(&["show-config", "--config", file.to_str().unwrap()], root.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("steps"));
}

#[test]
fn printed_config_parses_back() {
    let root = tempfile::tempdir().unwrap();
    let out = dfp(&["show-config", "--seed", "9", "--lambda", "0.25"], root.path());
    assert_eq!(code(&out), 0);
    let cfg = RunConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.run.seed, 9);
    assert_eq!(cfg.loss.lambda, 0.25);
}

#[test]
fn zero_steps_give_header_only_csv() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny(&root.path().join("r"));
    cfg.run.offline_steps = 0;
    cfg.run.online_steps = 0;
    let s = commands::train(&cfg).unwrap();
    assert!(s.records.is_empty());
    assert_eq!(std::fs::read_to_string(&s.metrics).unwrap(), format!("{CSV_HEADER}\n"));
}

#[test]
fn offline_training_needs_a_dataset() {
    let root = tempfile::tempdir().unwrap();
    let err = commands::train(&tiny(&root.path().join("r"))).unwrap_err();
    assert_eq!(err.code(), 2);
    assert!(err.to_string().contains("generate-data"));
}

#[test]
fn fixed_seed_runs_are_bitwise_identical() {
    let root = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let cfg = tiny(&root.path().join(name));
        commands::generate_data(&cfg).unwrap();
        let s = commands::train(&cfg).unwrap();
        assert_eq!(s.actions_generated, s.policy_forward_calls);
        outputs.push((
            std::fs::read(&s.metrics).unwrap(),
            std::fs::read(&s.checkpoint).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    let csv = String::from_utf8(outputs[0].0.clone()).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);
    assert!(csv.lines().nth(3).unwrap().starts_with("30,offline,"));
    assert!(csv.lines().nth(5).unwrap().starts_with("50,online,"));
    let ckpts: Vec<_> = std::fs::read_dir(root.path().join("a/checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(ckpts.len(), 2, "{ckpts:?}");
}

#[test]
fn held_lock_blocks_a_second_run() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("r");
    let _lock = dfp_cli::io::DirLock::acquire(&dir).unwrap();
    let mut cfg = tiny(&dir);
    cfg.run.offline_steps = 0;
    cfg.run.online_steps = 0;
    assert_eq!(commands::train(&cfg).unwrap_err().code(), 1);
}

#[test]
fn eval_reports_and_rejects_bad_checkpoints() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("r");
    let mut cfg = tiny(&dir);
    cfg.run.phase = RunPhase::Offline;
    cfg.eval.coverage_samples = 100;
    commands::generate_data(&cfg).unwrap();
    let s = commands::train(&cfg).unwrap();

    let report = commands::eval(&cfg, &s.checkpoint).unwrap();
    assert_eq!(report.episodes, 4);
    assert!(report.mean_return.unwrap() <= 0.0);
    assert_eq!(report.coverage.len(), 4);
    assert!(dir.join(commands::EVAL_REPORT).exists());

    let mut none = cfg.clone();
    none.eval.episodes = 0;
    let empty = commands::eval(&none, &s.checkpoint).unwrap();
    assert_eq!(empty.mean_return, None);
    assert!(empty.coverage.is_empty());
    let out = dfp(
        &["eval", "--output-dir", dir.to_str().unwrap(), "--eval-episodes", "0", "--set",
          "network.hidden_width=16"],
        root.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout), "episodes = 0\n");

    let mut bytes = std::fs::read(&s.checkpoint).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let bad = root.path().join("bad.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    let err = commands::eval(&cfg, &bad).unwrap_err();
    assert!(matches!(err, dfp_cli::CliError::Core(dfp::Error::Checksum)), "{err}");
    let out = dfp(
        &["eval", "--output-dir", dir.to_str().unwrap(), "--checkpoint", bad.to_str().unwrap(),
          "--set", "network.hidden_width=16"],
        root.path(),
    );
    assert_eq!(code(&out), 1);

    let mut wrong = cfg.clone();
    wrong.agent.chunk_horizon = 2;
    let err = commands::eval(&wrong, &s.checkpoint).unwrap_err();
    assert!(err.to_string().contains("action dimension"), "{err}");
}

#[test]
fn single_value_ablation_matches_one_training_run() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny(&root.path().join("sweep"));
    cfg.run.phase = RunPhase::Offline;
    let sweep = commands::ablate(&cfg, Axis::Lambda, &[0.5], &[4], false).unwrap();
    assert!(sweep.baseline.is_none());
    assert_eq!(sweep.rows.len(), 1);

    let mut single = cfg.clone();
    single.loss.lambda = 0.5;
    single.run.seed = 4;
    single.run.output_dir = root.path().join("single");
    single.run.dataset = root.path().join("sweep/data/seed_4.bin");
    let s = commands::train(&single).unwrap();
    assert_eq!(sweep.rows[0].returns, vec![s.final_eval_return().unwrap()]);
}

#[test]
fn ablation_grids_give_one_row_per_value() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny(&root.path().join("grid"));
    cfg.run.phase = RunPhase::Offline;
    cfg.run.offline_steps = 5;
    cfg.run.checkpoint_interval = 0;
    cfg.data.episodes = 60;
    cfg.eval.episodes = 2;
    let lambdas = commands::ablate(&cfg, Axis::Lambda, &[0.1, 0.5, 1.0, 5.0], &[0], true).unwrap();
    assert_eq!(lambdas.rows.len(), 4);
    let table = std::fs::read_to_string(&lambdas.table).unwrap();
    assert_eq!(table.lines().count(), 1 + 1 + 4);
    assert!(table.lines().nth(1).unwrap().starts_with("lambda,baseline,1,"));

    let ks = commands::ablate(&cfg, Axis::K, &[1.0, 2.0, 4.0, 8.0], &[0], false).unwrap();
    let labels: Vec<_> = ks.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["1", "2", "4", "8"]);

    let err = commands::ablate(&cfg, Axis::K, &[64.0], &[0], false).unwrap_err();
    assert_eq!(err.code(), 2, "{err}");
}

#[test]
fn diagnose_filters_and_sets_exit_code() {
    let root = tempfile::tempdir().unwrap();
    let out = dfp(&["diagnose", "--suite", "kernel", "--seed", "2"], root.path());
    assert_eq!(code(&out), 0);
    let report = std::fs::read_to_string(root.path().join("diagnose_kernel_2.txt")).unwrap();
    assert!(report.contains("[kernel.antisymmetry]"));
    assert!(!report.contains("[wgf."));

    let again = dfp(
        &["diagnose", "--suite", "kernel", "--seed", "2", "--report", "again.txt"],
        root.path(),
    );
    assert_eq!(code(&again), 0);
    let second = std::fs::read_to_string(root.path().join("again.txt")).unwrap();
    assert_eq!(report, second);

    assert_eq!(code(&dfp(&["diagnose", "--suite", "nothing"], root.path())), 2);
}
