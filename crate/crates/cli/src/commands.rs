use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::anyhow;
use dcdg::benchmark::{self, Benchmark};
use dcdg::data::{load_dataset, make_semi_split, split_dataset, write_dataset, CenterSpec, Dataset, MultiCenterSpec};
use dcdg::diagnostics::AdaptationHistory;
use dcdg::metrics::{evaluate_model, predict_mask, CaseMetrics, MetricsReport};
use dcdg::training::{run_training_observed, write_epoch_csv, AblationMode, TrainingConfig};
use dcdg::{CenterId, Error, ModelState};
use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::{
    io_err, num_workers, AblateArgs, CliError, CliResult, EvaluateArgs, ExitCode, GenerateArgs, Protocol, RunArgs,
    TrainArgs, VERSION,
};

pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_LONG_CSV: &str = "ablation_long.csv";

fn create_dir(p: &Path) -> CliResult<()> {
    fs::create_dir_all(p).map_err(|e| io_err(p, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn parse_err(path: &Path, e: serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        reason: format!("line {}, column {}: {e}", e.line(), e.column()),
    }
}

fn default_specs() -> MultiCenterSpec {
    MultiCenterSpec {
        centers: vec![CenterSpec::default_c1(110, 0), CenterSpec::default_c2(80, 1)],
    }
}

/// Writes one dataset directory per center (`<out>/C1`, `<out>/C2`).
pub fn generate_data(args: &GenerateArgs) -> CliResult<Vec<PathBuf>> {
    let spec = match &args.spec {
        None => default_specs(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::new(ExitCode::Config, parse_err(p, e)))?
        }
    };
    let mut manifests = Vec::new();
    for center in &spec.centers {
        let ds = dcdg::data::generate_center(center)?;
        let dir = args.out.join(center.center_id.to_string());
        let m = write_dataset(&ds, &dir)?;
        log::info!("wrote {} cases to {}", ds.len(), dir.display());
        manifests.push(m);
    }
    Ok(manifests)
}

/// Effective configuration plus the raw bytes of the file it came from.
struct ResolvedConfig {
    cfg: TrainingConfig,
    source: Option<Vec<u8>>,
}

fn resolve_config(run: &RunArgs, ablation: Option<AblationMode>, seed: Option<u64>) -> CliResult<ResolvedConfig> {
    let (mut cfg, source) = match &run.config {
        None => (TrainingConfig::default(), None),
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| io_err(p, e))?;
            let text = String::from_utf8_lossy(&bytes);
            let cfg = TrainingConfig::from_json(&text, p).map_err(|e| {
                let mut err = CliError::from(e);
                if err.code == ExitCode::Data {
                    err.code = ExitCode::Config;
                }
                err
            })?;
            (cfg, Some(bytes))
        }
    };
    if let Some(r) = run.labeled_ratio {
        cfg.labeled_ratio = r;
    }
    if let Some(e) = run.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = run.batch_size {
        cfg.batch_size = b;
    }
    if let Some(p) = run.patience {
        cfg.early_stop_patience = p;
    }
    if let Some(lr) = run.lr {
        cfg.lr_d = lr;
        cfg.lr_fg = lr;
        cfg.lr_smrm = lr;
    }
    if let Some(c) = &run.channels {
        cfg.arch.channels = c.clone();
    }
    if let Some(m) = ablation {
        cfg.ablation_mode = m;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(ResolvedConfig { cfg, source })
}

fn load_centers(dir: &Path, ids: &[CenterId]) -> CliResult<Vec<Dataset>> {
    let paths: Vec<PathBuf> = ids.iter().map(|c| dir.join(c.to_string()).join("manifest.json")).collect();
    let workers = num_workers()?;
    let loaded: Vec<dcdg::Result<Dataset>> = if workers > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = paths.iter().map(|p| s.spawn(move || load_dataset(p))).collect();
            handles.into_iter().map(|h| h.join().expect("loader thread")).collect()
        })
    } else {
        paths.iter().map(load_dataset).collect()
    };
    loaded.into_iter().map(|r| r.map_err(CliError::from)).collect()
}

fn prepare_data(run: &RunArgs, cfg: &TrainingConfig) -> CliResult<Benchmark> {
    let seed = cfg.seed;
    let Some(dir) = &run.data else {
        return Ok(match run.mode {
            Protocol::SingleCenter => benchmark::single_center(cfg.labeled_ratio, seed)?,
            Protocol::TwoCenter => benchmark::two_center(seed)?,
        });
    };
    match run.mode {
        Protocol::SingleCenter => {
            let c1 = load_centers(dir, &[CenterId::C1])?.remove(0);
            let (train, val, test) = split_dataset(&c1, run.n_val, run.n_test, seed)?;
            let (labeled, unlabeled) = make_semi_split(&train, cfg.labeled_ratio, seed)?;
            Ok(Benchmark {
                labeled,
                unlabeled,
                val,
                test,
            })
        }
        Protocol::TwoCenter => {
            let mut both = load_centers(dir, &[CenterId::C1, CenterId::C2])?;
            let c2 = both.pop().expect("two centers");
            let c1 = both.pop().expect("two centers");
            let (labeled, val, _) = split_dataset(&c1, run.n_val, 0, seed)?;
            let (unlabeled, _, test) = split_dataset(&c2, 0, run.n_test, seed)?;
            Ok(Benchmark {
                labeled,
                unlabeled: unlabeled.strip_masks(),
                val,
                test,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifests {
    pub labeled: PathBuf,
    pub unlabeled: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportPaths {
    pub case_csv: PathBuf,
    pub summary_json: PathBuf,
}

/// Record of one training run. Paths are relative to the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_unix: u64,
    pub version: String,
    pub protocol: String,
    pub config_snapshot: PathBuf,
    pub resolved_config: PathBuf,
    pub datasets: SplitManifests,
    pub checkpoint: PathBuf,
    pub epoch_csv: PathBuf,
    pub history_csv: Option<PathBuf>,
    pub report: Option<ReportPaths>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl RunManifest {
    pub const FILE: &'static str = "run_manifest.json";

    pub fn read(run_dir: &Path) -> CliResult<Self> {
        let p = run_dir.join(Self::FILE);
        let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
        serde_json::from_str(&text).map_err(|e| parse_err(&p, e).into())
    }

    fn artifacts(&self) -> Vec<&Path> {
        let mut v = vec![
            self.config_snapshot.as_path(),
            &self.resolved_config,
            &self.datasets.labeled,
            &self.datasets.unlabeled,
            &self.datasets.val,
            &self.datasets.test,
            &self.checkpoint,
            &self.epoch_csv,
        ];
        v.extend(self.history_csv.as_deref());
        if let Some(r) = &self.report {
            v.push(&r.case_csv);
            v.push(&r.summary_json);
        }
        v
    }
}

struct RunResult {
    manifest: RunManifest,
    report: Option<MetricsReport>,
}

fn train_run(
    protocol: Protocol,
    resolved: &ResolvedConfig,
    data: &Benchmark,
    out: &Path,
) -> CliResult<RunResult> {
    let cfg = &resolved.cfg;
    create_dir(out)?;
    let rel = |s: &str| PathBuf::from(s);

    let snapshot = out.join("config.json");
    match &resolved.source {
        Some(bytes) => fs::write(&snapshot, bytes).map_err(|e| io_err(&snapshot, e))?,
        None => cfg.save(&snapshot)?,
    }
    cfg.save(out.join("resolved_config.json"))?;

    let mut splits = Vec::new();
    for (name, ds) in [
        ("labeled", &data.labeled),
        ("unlabeled", &data.unlabeled),
        ("val", &data.val),
        ("test", &data.test),
    ] {
        write_dataset(ds, out.join("splits").join(name))?;
        splits.push(PathBuf::from(format!("splits/{name}/manifest.json")));
    }
    let [labeled, unlabeled, val, test]: [PathBuf; 4] = splits.try_into().expect("four splits");

    let run_id = format!("{protocol}-{}-seed{}", cfg.ablation_mode, cfg.seed);
    log::info!(
        "{run_id}: {} labeled, {} unlabeled, {} val, {} test",
        data.labeled.len(),
        data.unlabeled.len(),
        data.val.len(),
        data.test.len()
    );
    let outcome = run_training_observed(cfg, &data.labeled, &data.unlabeled, &data.val, |_| {})
        .map_err(|e| CliError::from(e).context(format!("training {run_id} aborted")))?;

    outcome.best.save(out.join("best.ckpt"))?;
    write_epoch_csv(&outcome.logs, out.join("epochs.csv"))?;
    let history = AdaptationHistory::from_logs(&outcome.logs)?;
    let history_csv = if history.is_empty() {
        None
    } else {
        history.write_csv(out.join("history.csv"))?;
        Some(rel("history.csv"))
    };

    let (report, report_paths) = if data.test.is_empty() {
        (None, None)
    } else {
        let r = evaluate_model(&outcome.best, &data.test)?;
        let dir = out.join("metrics");
        create_dir(&dir)?;
        r.write_case_csv(dir.join("cases.csv"))?;
        r.write_summary_json(dir.join("summary.json"))?;
        let paths = ReportPaths {
            case_csv: rel("metrics/cases.csv"),
            summary_json: rel("metrics/summary.json"),
        };
        (Some(r), Some(paths))
    };

    let manifest = RunManifest {
        run_id,
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        version: VERSION.to_string(),
        protocol: protocol.to_string(),
        config_snapshot: rel("config.json"),
        resolved_config: rel("resolved_config.json"),
        datasets: SplitManifests {
            labeled,
            unlabeled,
            val,
            test,
        },
        checkpoint: rel("best.ckpt"),
        epoch_csv: rel("epochs.csv"),
        history_csv,
        report: report_paths,
        best_epoch: outcome.best_epoch,
        stopped_early: outcome.stopped_early,
    };
    if let Some(missing) = manifest.artifacts().into_iter().find(|p| !out.join(p).exists()) {
        return Err(CliError::new(ExitCode::Io, anyhow!("artifact {} was not written", missing.display())));
    }
    write_json(&manifest, &out.join(RunManifest::FILE))?;
    Ok(RunResult { manifest, report })
}

pub fn train(args: &TrainArgs) -> CliResult<RunManifest> {
    let resolved = resolve_config(&args.run, args.ablation, args.seed)?;
    let data = prepare_data(&args.run, &resolved.cfg)?;
    let r = train_run(args.run.mode, &resolved, &data, &args.out)?;
    if let Some(rep) = &r.report {
        log::info!("test dice {:.4} over {} cases", rep.summary.dice.mean, rep.summary.n_cases);
    }
    Ok(r.manifest)
}

pub fn evaluate(args: &EvaluateArgs) -> CliResult<MetricsReport> {
    let test = load_dataset(&args.test)?;
    let report = if args.oracle {
        if test.is_empty() {
            return Err(Error::Data("empty test set".into()).into());
        }
        let mut cases = Vec::new();
        for c in &test.cases {
            let m = c
                .mask
                .as_ref()
                .ok_or_else(|| Error::Data(format!("test case `{}` has no mask", c.case_id)))?
                .index_axis(Axis(0), 0);
            cases.push(CaseMetrics::compute(&c.case_id, m, m, (1.0, 1.0))?);
        }
        MetricsReport::from_cases(cases)?
    } else {
        let ckpt = args.checkpoint.as_ref().expect("required unless oracle");
        let state = ModelState::load(ckpt)?;
        if !(args.threshold > 0.0 && args.threshold < 1.0) {
            return Err(CliError::new(ExitCode::Config, anyhow!("threshold must lie in (0, 1)")));
        }
        dcdg::metrics::evaluate_with(&test, |img| Ok(predict_mask(&state.model, img, args.threshold)))?
    };
    create_dir(&args.out)?;
    report.write_case_csv(args.out.join("cases.csv"))?;
    report.write_summary_json(args.out.join("summary.json"))?;
    log::info!(
        "dice {:.4} iou {:.4} over {} cases",
        report.summary.dice.mean,
        report.summary.iou.mean,
        report.summary.n_cases
    );
    Ok(report)
}

/// One `(mode, seed)` line of the ablation summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub seed: u64,
    pub status: String,
    pub best_epoch: Option<usize>,
    pub dice_mean: Option<f64>,
    pub dice_std: Option<f64>,
    pub iou_mean: Option<f64>,
    pub iou_std: Option<f64>,
    pub msd_mean: Option<f64>,
    pub msd_std: Option<f64>,
    pub error: Option<String>,
}

#[derive(Serialize)]
struct LongRow<'a> {
    mode: AblationMode,
    seed: u64,
    case_id: &'a str,
    dice: f64,
    iou: f64,
    msd: Option<f64>,
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::new(ExitCode::Io, anyhow!("{}: {e}", path.display())))
}

fn csv_io(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::new(ExitCode::Io, anyhow!("{}: {e}", path.display()))
}

/// Trains every requested mode for every seed. Writes the summary and the
/// long-format per-case tables; any failed run makes the command fail after
/// both tables are written.
pub fn ablate(args: &AblateArgs) -> CliResult<Vec<AblationRow>> {
    let modes = args.modes.clone().unwrap_or_else(|| AblationMode::ALL.to_vec());
    create_dir(&args.out)?;
    let summary_path = args.out.join(ABLATION_CSV);
    let long_path = args.out.join(ABLATION_LONG_CSV);
    let mut summary = csv_writer(&summary_path)?;
    let mut long = csv_writer(&long_path)?;
    let mut rows = Vec::new();
    let mut failures = 0;
    for &seed in &args.seeds {
        let base = resolve_config(&args.run, None, Some(seed))?;
        let data = prepare_data(&args.run, &base.cfg)?;
        for &mode in &modes {
            let resolved = ResolvedConfig {
                cfg: TrainingConfig {
                    ablation_mode: mode,
                    ..base.cfg.clone()
                },
                source: base.source.clone(),
            };
            let dir = args.out.join("runs").join(format!("{mode}_seed{seed}"));
            let row = match train_run(args.run.mode, &resolved, &data, &dir) {
                Ok(RunResult {
                    manifest,
                    report: Some(rep),
                }) => {
                    for c in &rep.cases {
                        long.serialize(LongRow {
                            mode,
                            seed,
                            case_id: &c.case_id,
                            dice: c.dice,
                            iou: c.iou,
                            msd: c.msd,
                        })
                        .map_err(csv_io(&long_path))?;
                    }
                    let s = &rep.summary;
                    AblationRow {
                        mode,
                        seed,
                        status: "ok".into(),
                        best_epoch: Some(manifest.best_epoch),
                        dice_mean: Some(s.dice.mean),
                        dice_std: Some(s.dice.std),
                        iou_mean: Some(s.iou.mean),
                        iou_std: Some(s.iou.std),
                        msd_mean: s.msd.map(|m| m.mean),
                        msd_std: s.msd.map(|m| m.std),
                        error: None,
                    }
                }
                Ok(RunResult { report: None, .. }) => {
                    return Err(Error::Data("ablation requires a non-empty test split".into()).into())
                }
                Err(e) => {
                    log::error!("{mode} seed {seed} failed: {e}");
                    failures += 1;
                    AblationRow {
                        mode,
                        seed,
                        status: "failed".into(),
                        best_epoch: None,
                        dice_mean: None,
                        dice_std: None,
                        iou_mean: None,
                        iou_std: None,
                        msd_mean: None,
                        msd_std: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            summary.serialize(&row).map_err(csv_io(&summary_path))?;
            summary.flush().map_err(|e| io_err(&summary_path, e))?;
            long.flush().map_err(|e| io_err(&long_path, e))?;
            rows.push(row);
        }
    }
    if failures > 0 {
        return Err(CliError::new(
            ExitCode::TrainingAbort,
            anyhow!("{failures} of {} ablation runs failed; see {}", rows.len(), summary_path.display()),
        ));
    }
    Ok(rows)
}
