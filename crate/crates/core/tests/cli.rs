use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn physsm(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_physsm"))
        .args(args)
        .env("PHYSSM_OUT", root)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn tiny_dataset(root: &Path, name: &str) -> PathBuf {
    let dir = root.join(name);
    let o = physsm(
        &[
            "generate", "--system", "pendulum", "--n", "4", "--n-val", "2", "--n-test", "2", "--horizon", "40", "--dt",
            "0.05", "--noise", "0.1", "--drop", "0.2", "--seed", "7", "--out",
            dir.to_str().unwrap(),
        ],
        root,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

fn data_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn generate_without_system_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = physsm(&["generate", "--n", "4"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn generate_rejects_bad_flags() {
    let tmp = tempfile::tempdir().unwrap();
    for bad in [
        vec!["generate", "--system", "cartpole"],
        vec!["generate", "--system", "pendulum", "--drop", "1.5"],
        vec!["generate", "--system", "pendulum", "--dt", "-0.1"],
        vec!["generate", "--system", "pendulum", "--n", "0"],
    ] {
        assert_eq!(code(&physsm(&bad, tmp.path())), 2, "{bad:?}");
    }
}

#[test]
fn generate_protocol_dataset_has_240_point_sequences() {
    let tmp = tempfile::tempdir().unwrap();
    let o = physsm(
        &[
            "generate", "--system", "pendulum", "--n", "64", "--horizon", "300", "--dt", "0.05", "--noise", "0.3",
            "--drop", "0.2", "--seed", "7",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dir = tmp.path().join("data/pendulum_seed7");
    assert_eq!(data_rows(&dir.join("train_corrupted.csv")), 64 * 240);
    assert_eq!(data_rows(&dir.join("train_clean.csv")), 64 * 300);
    assert!(dir.join("run_manifest.json").exists());
}

#[test]
fn generate_is_byte_identical_on_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tiny_dataset(tmp.path(), "a");
    let before: Vec<Vec<u8>> = ["manifest.toml", "train_clean.csv", "test_corrupted.csv", "val_params.jsonl"]
        .iter()
        .map(|f| fs::read(dir.join(f)).unwrap())
        .collect();
    let args = [
        "generate", "--system", "pendulum", "--n", "4", "--n-val", "2", "--n-test", "2", "--horizon", "40", "--dt", "0.05",
        "--noise", "0.1", "--drop", "0.2", "--seed", "7", "--out",
        dir.to_str().unwrap(),
    ];
    assert_eq!(code(&physsm(&args, tmp.path())), 2, "existing output needs --overwrite");
    let mut with_ow = args.to_vec();
    with_ow.push("--overwrite");
    assert_eq!(code(&physsm(&with_ow, tmp.path())), 0);
    let after: Vec<Vec<u8>> = ["manifest.toml", "train_clean.csv", "test_corrupted.csv", "val_params.jsonl"]
        .iter()
        .map(|f| fs::read(dir.join(f)).unwrap())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn train_eval_plot_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_dataset(tmp.path(), "data");
    let run = tmp.path().join("run");
    let o = physsm(
        &[
            "train", "--data", data.to_str().unwrap(), "--seed", "0", "--epochs", "2", "--batch-size", "4", "--n-in",
            "20", "--n-out", "10", "--out",
            run.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.json", "metrics.csv", "report.json", "config.toml", "predictions.csv", "run_manifest.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(data_rows(&run.join("metrics.csv")), 2);

    let o = physsm(&["eval", "--ckpt", run.join("model.json").to_str().unwrap(), "--data", data.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trained: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    let evald: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(trained["report"]["mean"], evald["report"]["mean"]);
    assert_eq!(trained["config_hash"], evald["config_hash"]);

    let plots = tmp.path().join("plots");
    let dump = run.join("predictions.csv");
    let args = ["plot", "--dump", dump.to_str().unwrap(), "--out", plots.to_str().unwrap()];
    assert_eq!(code(&physsm(&args, tmp.path())), 0);
    let csv = fs::read(plots.join("traj0.csv")).unwrap();
    assert_eq!(data_rows(&plots.join("traj0.csv")), 30);
    for k in 0..3 {
        assert!(plots.join(format!("traj0_x{k}.svg")).exists());
    }
    let mut again = args.to_vec();
    again.push("--overwrite");
    assert_eq!(code(&physsm(&again, tmp.path())), 0);
    assert_eq!(fs::read(plots.join("traj0.csv")).unwrap(), csv);
}

#[test]
fn plot_without_extrapolation_still_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_dataset(tmp.path(), "data");
    let run = tmp.path().join("run");
    let o = physsm(
        &[
            "train", "--data", data.to_str().unwrap(), "--epochs", "1", "--batch-size", "4", "--n-in", "20", "--n-out",
            "0", "--out",
            run.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dump = run.join("predictions.csv");
    let d = physsm::cli::read_dump(&dump, 0).unwrap();
    assert!(d.extrap.is_empty());
    assert_eq!(d.divider(), None);
    let o = physsm(&["plot", "--dump", dump.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 0);
    assert_eq!(data_rows(&run.join("plots/traj0.csv")), 20);
}

#[test]
fn plot_with_missing_dump_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = physsm(&["plot", "--dump", "nowhere/predictions.csv"], tmp.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_with_missing_checkpoint_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&physsm(&["eval", "--ckpt", "missing.json"], tmp.path())), 2);
}

#[test]
fn train_rejects_oversized_windows() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_dataset(tmp.path(), "data");
    let o = physsm(&["train", "--data", data.to_str().unwrap(), "--n-in", "30", "--n-out", "10"], tmp.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn ablate_and_sweep_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_dataset(tmp.path(), "data");
    let common = ["--data", data.to_str().unwrap(), "--epochs", "1", "--batch-size", "4", "--n-in", "20", "--n-out", "10"];
    let mut ablate = vec!["ablate", "--seeds", "0,1"];
    ablate.extend(common);
    let o = physsm(&ablate, tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = tmp.path().join("ablate/pendulum/ablation.csv");
    let text = fs::read_to_string(&table).unwrap();
    assert_eq!(data_rows(&table), 3);
    assert!(text.lines().nth(1).unwrap().starts_with("full,"));
    assert!(text.contains("no_unit,") && text.contains("no_reg,"));

    let mut sweep = vec!["sweep", "--beta", "0.1,1,10", "--lambda", "1,10,100"];
    sweep.extend(common);
    let o = physsm(&sweep, tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(data_rows(&tmp.path().join("sweep/pendulum/sweep.csv")), 9);

    let mut metrics = vec!["sweep", "--metrics"];
    metrics.extend(common);
    assert_eq!(code(&physsm(&metrics, tmp.path())), 0);
    assert_eq!(data_rows(&tmp.path().join("metrics/pendulum/metric_comparison.csv")), 3);
}

#[test]
fn uniqueness_command_reports_recovery() {
    let tmp = tempfile::tempdir().unwrap();
    let o = physsm(&["uniqueness", "--seed", "0"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("uniqueness/seed0/uniqueness.json")).unwrap()).unwrap();
    assert!(report["max_abs_error"].as_f64().unwrap() < 1e-2);
    assert_eq!(report["known_bit_identical"], true);
}

#[test]
fn config_file_roundtrip_and_bad_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = physsm::train::ExperimentConfig::pendulum();
    let good = tmp.path().join("pendulum.toml");
    fs::write(&good, cfg.to_toml().unwrap()).unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "name = \"x\"\n[train]\nepochs = \"many\"\n").unwrap();
    assert_eq!(code(&physsm(&["train", "--config", bad.to_str().unwrap()], tmp.path())), 2);
    let o = physsm(&["train", "--config", good.to_str().unwrap(), "--system", "sir"], tmp.path());
    assert_eq!(code(&o), 2);
}
