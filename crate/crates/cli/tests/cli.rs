use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dcdg_cli::RunManifest;

const SPEC: &str = r#"{
  "centers": [
    {"center_id": "C1", "n_cases": 14, "image_size": [32, 32], "fg_intensity_range": [0.65, 0.85],
     "bg_intensity_range": [0.15, 0.35], "noise_sigma": 0.06, "bias_field_amplitude": 0.15, "seed": 1},
    {"center_id": "C2", "n_cases": 10, "image_size": [32, 32], "fg_intensity_range": [0.45, 0.65],
     "bg_intensity_range": [0.2, 0.35], "noise_sigma": 0.08, "bias_field_amplitude": 0.25, "seed": 2}
  ]
}
"#;

fn dcdg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcdg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn data(dir: &Path) -> PathBuf {
    let spec = dir.join("spec.json");
    fs::write(&spec, SPEC).unwrap();
    let out = dir.join("data");
    let o = dcdg(&["generate-data", "--spec", s(&spec), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

const SMALL: &[&str] = &["--channels", "4,8", "--epochs", "2", "--batch-size", "4", "--n-val", "2", "--n-test", "3"];

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", s(data), "--out", s(out)];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    dcdg(&args)
}

#[test]
fn generate_data_is_reproducible_and_reports_bad_specs() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(dir.path());
    let first = fs::read(d.join("C2/manifest.json")).unwrap();
    data(dir.path());
    assert_eq!(fs::read(d.join("C2/manifest.json")).unwrap(), first);
    assert!(d.join("C1/manifest.json").exists());

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\n  \"centers\": [\n    {\"n_cases\": }\n  ]\n}\n").unwrap();
    let o = dcdg(&["generate-data", "--spec", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn train_writes_a_complete_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(dir.path());
    let cfg = dir.path().join("cfg.json");
    let cfg_text = "{ \"epochs\": 5,\n  \"seed\": 4 }\n";
    fs::write(&cfg, cfg_text).unwrap();
    let run = dir.path().join("run");
    let o = train(&d, &run, &["--config", s(&cfg), "--labeled-ratio", "0.5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let m = RunManifest::read(&run).unwrap();
    for p in [&m.checkpoint, &m.epoch_csv, &m.datasets.test, &m.config_snapshot, &m.report.as_ref().unwrap().case_csv] {
        assert!(run.join(p).exists(), "{}", p.display());
    }
    assert_eq!(fs::read_to_string(run.join(&m.config_snapshot)).unwrap(), cfg_text);
    // Flag beats file: two epochs, not five; file beats default: seed 4.
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join(&m.resolved_config)).unwrap()).unwrap();
    assert_eq!((resolved["epochs"].as_u64(), resolved["seed"].as_u64()), (Some(2), Some(4)));
    let epochs = fs::read_to_string(run.join(&m.epoch_csv)).unwrap();
    assert_eq!(epochs.lines().count(), 3);
    assert!(m.run_id.contains("DCDG") && !m.version.is_empty());
    let labeled = dcdg::data::load_dataset(run.join(&m.datasets.labeled)).unwrap();
    assert_eq!(labeled.len(), 5);
}

#[test]
fn train_is_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train(&d, &a, &["--mode", "two-center", "--seed", "3"]).status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_dcdg"))
        .args(["train", "--data", s(&d), "--out", s(&b), "--mode", "two-center", "--seed", "3"])
        .args(SMALL)
        .env("DCDG_NUM_WORKERS", "2")
        .output()
        .unwrap();
    assert!(o.status.success());
    for f in ["epochs.csv", "best.ckpt", "history.csv", "metrics/cases.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(dir.path());
    let o = train(&d, &dir.path().join("r"), &["--labeled-ratio", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("labeled_ratio"));

    let o = train(&dir.path().join("nowhere"), &dir.path().join("r"), &[]);
    assert_eq!(o.status.code(), Some(5));

    let o = train(&d, &dir.path().join("r"), &["--n-val", "10", "--n-test", "10"]);
    assert_eq!(o.status.code(), Some(3));

    let o = train(&d, &dir.path().join("r"), &["--lr", "1e30"]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"));

    let o = Command::new(env!("CARGO_BIN_EXE_dcdg"))
        .args(["train", "--data", s(&d), "--out", s(&dir.path().join("r"))])
        .env("DCDG_NUM_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn no_adaptation_run_has_empty_adversarial_columns_and_no_equilibrium_plot() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(dir.path());
    let run = dir.path().join("wda");
    assert!(train(&d, &run, &["--ablation", "WDA"]).status.success());
    let text = fs::read_to_string(run.join("epochs.csv")).unwrap();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!((cols[1], cols[2]), ("", ""));
    }
    let plots = dir.path().join("plots");
    let o = dcdg(&["report", "--run", s(&run), "--out", s(&plots)]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("MIL/MIU plot omitted"));
    assert!(plots.join("losses.png").exists() && !plots.join("mil_miu.png").exists());
}

#[test]
fn report_writes_plots_and_names_corrupt_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(dir.path());
    let run = dir.path().join("run");
    assert!(train(&d, &run, &["--ablation", "DCDG"]).status.success());
    let plots = dir.path().join("plots");
    let o = dcdg(&["report", "--run", s(&run), "--out", s(&plots)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["mil_miu.png", "losses.png", "mil_miu.svg", "losses.svg"] {
        assert!(fs::metadata(plots.join(f)).unwrap().len() > 0, "{f}");
    }

    let csv = run.join("epochs.csv");
    let mut text = fs::read_to_string(&csv).unwrap();
    text.push_str("3,x,,,,,,\n");
    fs::write(&csv, text).unwrap();
    let o = dcdg(&["report", "--run", s(&run), "--out", s(&plots)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 3"));

    let o = dcdg(&["report", "--run", s(&dir.path().join("missing")), "--out", s(&plots)]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn evaluate_oracle_determinism_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(dir.path());
    let test = d.join("C1/manifest.json");
    let out = dir.path().join("eval");
    let o = dcdg(&["evaluate", "--oracle", "--test", s(&test), "--out", s(&out)]);
    assert!(o.status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["dice"]["mean"], 1.0);
    assert_eq!(summary["iou"]["mean"], 1.0);

    let run = dir.path().join("run");
    assert!(train(&d, &run, &[]).status.success());
    let ck = run.join("best.ckpt");
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    for e in [&e1, &e2] {
        assert!(dcdg(&["evaluate", "--checkpoint", s(&ck), "--test", s(&test), "--out", s(e)]).status.success());
    }
    for f in ["cases.csv", "summary.json"] {
        assert_eq!(fs::read(e1.join(f)).unwrap(), fs::read(e2.join(f)).unwrap());
    }

    let empty = dir.path().join("empty.json");
    fs::write(&empty, "{\"cases\": []}").unwrap();
    let o = dcdg(&["evaluate", "--checkpoint", s(&ck), "--test", s(&empty), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    let o = dcdg(&["evaluate", "--checkpoint", s(&dir.path().join("no.ckpt")), "--test", s(&test), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn ablate_emits_one_row_per_mode_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(dir.path());
    let run = |out: &Path| {
        let mut args = vec!["ablate", "--data", s(&d), "--mode", "two-center", "--seeds", "1,2", "--out", s(out)];
        args.extend_from_slice(SMALL);
        args.extend_from_slice(&["--epochs", "1"]);
        let o = dcdg(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&a);
    run(&b);
    let table = fs::read_to_string(a.join(dcdg_cli::ABLATION_CSV)).unwrap();
    assert_eq!(table.lines().count(), 13);
    assert!(table.lines().skip(1).all(|l| l.contains(",ok,")));
    assert_eq!(table, fs::read_to_string(b.join(dcdg_cli::ABLATION_CSV)).unwrap());
    let long = fs::read_to_string(a.join(dcdg_cli::ABLATION_LONG_CSV)).unwrap();
    assert_eq!(long.lines().next().unwrap(), "mode,seed,case_id,dice,iou,msd");
    assert_eq!(long.lines().count(), 1 + 12 * 3);

    let plots = dir.path().join("plots");
    let long_path = a.join(dcdg_cli::ABLATION_LONG_CSV);
    assert!(dcdg(&["report", "--ablation", s(&long_path), "--out", s(&plots)]).status.success());
    assert!(fs::metadata(plots.join("ablation_boxplot.png")).unwrap().len() > 0);
}

#[test]
fn ablate_records_failed_runs_and_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(dir.path());
    let out = dir.path().join("abl");
    let mut args = vec!["ablate", "--data", s(&d), "--mode", "two-center", "--modes", "DCDG,FSS", "--out", s(&out)];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--lr", "1e30"]);
    let o = dcdg(&args);
    assert_eq!(o.status.code(), Some(4));
    let table = fs::read_to_string(out.join(dcdg_cli::ABLATION_CSV)).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains(",failed,"));
}
