//! Command-line entry points. Every command writes into its own output
//! directory next to a `run_manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{build_dataset, Dataset, DatasetConfig, ParamSampler, System};
use crate::error::{Error, Result};
use crate::objective::{write_metrics_file, RegMetric};
use crate::train::{
    evaluate, run_ablation, run_metric_comparison, run_sensitivity, train, uniqueness_recovery_test,
    with_jobs, write_prediction_dump, ExperimentConfig, MetricsReport, SeedResult, TableRow, UniquenessConfig,
};
use crate::vae::{PhySsmModel, PriorKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Format { .. } | Error::SupportOverlap { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

#[derive(Debug, Parser)]
#[command(name = "physsm", version, about = "Physics-informed state space model experiments")]
pub struct Cli {
    /// Worker threads for seed- and trajectory-level parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    pub overwrite: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset and write it to disk.
    Generate(GenerateArgs),
    /// Train one seed and test the selected checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test split.
    Eval(EvalArgs),
    /// Full model vs. no-unit vs. no-regularizer table.
    Ablate(AblateArgs),
    /// Beta/lambda sensitivity grid, or the regularizer-metric comparison.
    Sweep(SweepArgs),
    /// Recover unknown entries of a linear system with known support.
    Uniqueness(UniquenessArgs),
    /// Per-dimension trajectory figures and CSV from a prediction dump.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub system: String,
    /// Training trajectories.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub drop: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Config selection and overrides shared by the training commands.
#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Experiment config (TOML). Defaults to the built-in config of `--system`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub system: Option<String>,
    /// Dataset directory written by `generate`; simulated from the config when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub n_in: Option<usize>,
    #[arg(long)]
    pub n_out: Option<usize>,
    /// Regularizer distance: euclidean, chebyshev or cosine.
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory; regenerated from the checkpoint's config when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 1.0, 10.0])]
    pub beta: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 10.0, 100.0])]
    pub lambda: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Compare regularizer distances over the config's seeds instead of the grid.
    #[arg(long)]
    pub metrics: bool,
}

#[derive(Debug, Args)]
pub struct UniquenessArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Prediction dump (`predictions.csv`).
    #[arg(long)]
    pub dump: PathBuf,
    /// Trajectory to draw.
    #[arg(long, default_value_t = 0)]
    pub traj: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Provenance record written beside every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub config_hash: Option<String>,
    pub code_version: String,
    pub seeds: Vec<u64>,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    pub outputs: Vec<String>,
}

pub const RUN_MANIFEST: &str = "run_manifest.json";

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Output root: `PHYSSM_OUT` if set, else `runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os("PHYSSM_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

struct Run {
    dir: PathBuf,
    started: f64,
    outputs: Vec<String>,
}

impl Run {
    fn open(dir: PathBuf, overwrite: bool) -> Result<Self> {
        if dir.join(RUN_MANIFEST).exists() && !overwrite {
            return Err(Error::config(format!("{} already holds a run; pass --overwrite to replace it", dir.display())));
        }
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, started: now(), outputs: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        fs::write(p, contents)?;
        Ok(())
    }

    fn finish(self, config_hash: Option<String>, seeds: Vec<u64>) -> Result<PathBuf> {
        let m = RunManifest {
            command_line: std::env::args().collect(),
            config_hash,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds,
            started_unix_s: self.started,
            finished_unix_s: now(),
            outputs: self.outputs,
        };
        fs::write(self.dir.join(RUN_MANIFEST), serde_json::to_string_pretty(&m)?)?;
        Ok(self.dir)
    }
}

/// Resolves the experiment config and dataset for a training command.
pub fn resolve(args: &ConfigArgs) -> Result<(ExperimentConfig, Dataset)> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
            toml::from_str::<ExperimentConfig>(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::for_system(System::parse(args.system.as_deref().unwrap_or("pendulum"))?),
    };
    if let (Some(s), Some(_)) = (&args.system, &args.config) {
        if System::parse(s)? != cfg.data.system {
            return Err(Error::config(format!("--system {s} contradicts the config's system")));
        }
    }
    let t = &mut cfg.train;
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.lr {
        t.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.n_in {
        t.n_in = v;
    }
    if let Some(v) = args.n_out {
        t.n_out = v;
    }
    if let Some(m) = &args.metric {
        t.reg_metric = RegMetric::parse(m)?;
    }
    let dataset = match &args.data {
        Some(dir) => {
            let ds = Dataset::load(dir)?;
            cfg.data = ds.manifest.config.clone();
            ds
        }
        None => {
            cfg.validate()?;
            build_dataset(&cfg.data)?
        }
    };
    cfg.validate()?;
    Ok((cfg, dataset))
}

fn out_dir(explicit: &Option<PathBuf>, default: impl FnOnce() -> String) -> PathBuf {
    explicit.clone().unwrap_or_else(|| output_root().join(default()))
}

pub fn cmd_generate(a: &GenerateArgs, overwrite: bool) -> Result<PathBuf> {
    let system = System::parse(&a.system)?;
    let mut cfg = match system {
        System::Pendulum => DatasetConfig::pendulum_default(),
        System::Sir => DatasetConfig::sir_default(),
    };
    cfg.sampler = ParamSampler::default_for(system);
    cfg.seed = a.seed;
    if let Some(v) = a.n {
        cfg.n_train = v;
    }
    if let Some(v) = a.n_val {
        cfg.n_val = v;
    }
    if let Some(v) = a.n_test {
        cfg.n_test = v;
    }
    if let Some(v) = a.horizon {
        cfg.horizon = v;
    }
    if let Some(v) = a.dt {
        cfg.dt = v;
    }
    if let Some(v) = a.noise {
        cfg.noise_sigma = v;
    }
    if let Some(v) = a.drop {
        cfg.drop_rate = v;
    }
    if cfg.n_train == 0 || cfg.horizon < 2 {
        return Err(Error::config("--n must be positive and --horizon at least 2"));
    }
    if !(cfg.dt > 0.0) || !cfg.dt.is_finite() {
        return Err(Error::config("--dt must be positive"));
    }
    if !(cfg.noise_sigma >= 0.0) || !(0.0..1.0).contains(&cfg.drop_rate) {
        return Err(Error::config("--noise must be non-negative and --drop in [0, 1)"));
    }
    let dir = out_dir(&a.out, || format!("data/{}_seed{}", system.name(), a.seed));
    let mut run = Run::open(dir.clone(), overwrite)?;
    let ds = build_dataset(&cfg)?;
    ds.save(&dir, true)?;
    run.outputs.push("manifest.toml".into());
    for split in ["train", "val", "test"] {
        for kind in ["clean.csv", "corrupted.csv", "params.jsonl"] {
            run.outputs.push(format!("{split}_{kind}"));
        }
    }
    let hash = {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(toml::to_string(&cfg).unwrap_or_default()))
    };
    run.finish(Some(hash), vec![a.seed])
}

/// One row of a results file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub config_hash: String,
    pub seed: u64,
    pub report: MetricsReport,
}

pub fn cmd_train(a: &TrainArgs, overwrite: bool) -> Result<PathBuf> {
    let (mut cfg, ds) = resolve(&a.cfg)?;
    if let Some(b) = a.beta {
        cfg.train.beta = b;
    }
    if let Some(l) = a.lambda {
        cfg.train.lambda = l;
    }
    cfg.train.seeds = vec![a.seed];
    cfg.validate()?;
    let dir = out_dir(&a.cfg.out, || format!("train/{}_seed{}", cfg.name, a.seed));
    let mut run = Run::open(dir, overwrite)?;
    let out = train(&cfg, &ds, a.seed)?;
    let metrics = evaluate(&out.model, &ds.test.corrupted, cfg.train.n_in, cfg.train.n_out)?;
    let report = MetricsReport::from_seeds(vec![SeedResult {
        seed: a.seed,
        metrics,
        best_epoch: out.best_epoch,
        runtime_s: out.runtime_s,
    }]);
    let mut meta = BTreeMap::new();
    meta.insert("experiment".to_string(), cfg.to_toml()?);
    meta.insert("seed".to_string(), a.seed.to_string());
    out.model.save(&run.path("model.json"), meta)?;
    write_metrics_file(&run.path("metrics.csv"), &out.history)?;
    run.write("config.toml", cfg.to_toml()?)?;
    let result = RunResult { config_hash: cfg.hash(), seed: a.seed, report };
    run.write("report.json", serde_json::to_string_pretty(&result)?)?;
    let shown = ds.test.corrupted.len().min(4);
    write_prediction_dump(&out.model, &ds.test.corrupted[..shown], cfg.train.n_in, cfg.train.n_out, &run.path("predictions.csv"))?;
    println!(
        "seed {}: best epoch {}, test extrap MSE {:.6}, interp MSE {:.6}",
        a.seed, out.best_epoch, metrics.extrap_mse, metrics.interp_mse
    );
    run.finish(Some(cfg.hash()), vec![a.seed])
}

pub fn cmd_eval(a: &EvalArgs, overwrite: bool) -> Result<PathBuf> {
    if !a.ckpt.exists() {
        return Err(Error::config(format!("checkpoint {} not found", a.ckpt.display())));
    }
    let (model, meta) = PhySsmModel::load(&a.ckpt)?;
    let cfg = ExperimentConfig::from_toml(
        meta.get("experiment")
            .ok_or_else(|| Error::format(a.ckpt.display().to_string(), "missing experiment config"))?,
    )?;
    let ds = match &a.data {
        Some(d) => Dataset::load(d)?,
        None => build_dataset(&cfg.data)?,
    };
    let system = ds.manifest.config.system;
    if system.spec().name != model.spec.name {
        return Err(Error::config(format!(
            "checkpoint is for '{}' but the dataset holds '{}'",
            model.spec.name,
            system.name()
        )));
    }
    let dir = a.out.clone().unwrap_or_else(|| {
        a.ckpt.parent().map(|p| p.join("eval")).unwrap_or_else(|| PathBuf::from("eval"))
    });
    let mut run = Run::open(dir, overwrite)?;
    let seed: u64 = meta.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0);
    let metrics = evaluate(&model, &ds.test.corrupted, cfg.train.n_in, cfg.train.n_out)?;
    let report = MetricsReport::from_seeds(vec![SeedResult { seed, metrics, best_epoch: 0, runtime_s: 0.0 }]);
    let result = RunResult { config_hash: cfg.hash(), seed, report };
    run.write("report.json", serde_json::to_string_pretty(&result)?)?;
    let shown = ds.test.corrupted.len().min(4);
    write_prediction_dump(&model, &ds.test.corrupted[..shown], cfg.train.n_in, cfg.train.n_out, &run.path("predictions.csv"))?;
    println!("test extrap MSE {:.6}, interp MSE {:.6}", metrics.extrap_mse, metrics.interp_mse);
    run.finish(Some(cfg.hash()), vec![seed])
}

pub const TABLE_HEADER: &str = "label,beta,lambda,metric,prior,n_seeds,\
interp_mae_mean,interp_mae_std,interp_mse_mean,interp_mse_std,\
extrap_mae_mean,extrap_mae_std,extrap_mse_mean,extrap_mse_std,runtime_s";

/// Aggregate table as CSV, one row per config variant.
pub fn table_csv(rows: &[TableRow]) -> String {
    let mut s = String::from(TABLE_HEADER);
    s.push('\n');
    for r in rows {
        let prior = match r.config.model.prior {
            PriorKind::PhySsm => "physsm".to_string(),
            PriorKind::DataDriven { width, state_size } => format!("ssm(w={width};n={state_size})"),
        };
        let (m, d) = (r.report.mean, r.report.std);
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.3}\n",
            r.label,
            r.config.train.beta,
            r.config.train.lambda,
            r.config.train.reg_metric.name(),
            prior,
            r.report.per_seed.len(),
            m.interp_mae,
            d.interp_mae,
            m.interp_mse,
            d.interp_mse,
            m.extrap_mae,
            d.extrap_mae,
            m.extrap_mse,
            d.extrap_mse,
            r.report.runtime_s
        ));
    }
    s
}

fn write_table(run: &mut Run, stem: &str, rows: &[TableRow]) -> Result<()> {
    run.write(&format!("{stem}.csv"), table_csv(rows))?;
    run.write(&format!("{stem}.json"), serde_json::to_string_pretty(rows)?)?;
    for r in rows {
        println!(
            "{:<24} extrap MSE {:.6} ± {:.6}  interp MSE {:.6} ± {:.6}",
            r.label, r.report.mean.extrap_mse, r.report.std.extrap_mse, r.report.mean.interp_mse, r.report.std.interp_mse
        );
    }
    Ok(())
}

pub fn cmd_ablate(a: &AblateArgs, jobs: usize, overwrite: bool) -> Result<PathBuf> {
    let (mut cfg, ds) = resolve(&a.cfg)?;
    if let Some(s) = &a.seeds {
        cfg.train.seeds = s.clone();
    }
    cfg.validate()?;
    let dir = out_dir(&a.cfg.out, || format!("ablate/{}", cfg.name));
    let mut run = Run::open(dir, overwrite)?;
    let rows = with_jobs(jobs, || run_ablation(&cfg, &ds))??;
    write_table(&mut run, "ablation", &rows)?;
    run.finish(Some(cfg.hash()), cfg.train.seeds.clone())
}

pub fn cmd_sweep(a: &SweepArgs, jobs: usize, overwrite: bool) -> Result<PathBuf> {
    let (cfg, ds) = resolve(&a.cfg)?;
    if a.metrics {
        let dir = out_dir(&a.cfg.out, || format!("metrics/{}", cfg.name));
        let mut run = Run::open(dir, overwrite)?;
        let rows = with_jobs(jobs, || run_metric_comparison(&cfg, &ds))??;
        write_table(&mut run, "metric_comparison", &rows)?;
        return run.finish(Some(cfg.hash()), cfg.train.seeds.clone());
    }
    let dir = out_dir(&a.cfg.out, || format!("sweep/{}", cfg.name));
    let mut run = Run::open(dir, overwrite)?;
    let rows = with_jobs(jobs, || run_sensitivity(&cfg, &ds, &a.beta, &a.lambda, a.seed))??;
    write_table(&mut run, "sweep", &rows)?;
    run.finish(Some(cfg.hash()), vec![a.seed])
}

pub fn cmd_uniqueness(a: &UniquenessArgs, overwrite: bool) -> Result<(PathBuf, bool)> {
    let mut ucfg = UniquenessConfig::default();
    if let Some(n) = a.iterations {
        if n == 0 {
            return Err(Error::config("--iterations must be positive"));
        }
        ucfg.iterations = n;
    }
    let dir = out_dir(&a.out, || format!("uniqueness/seed{}", a.seed));
    let mut run = Run::open(dir, overwrite)?;
    let report = uniqueness_recovery_test(a.seed, &ucfg)?;
    for (r, c, truth, got) in &report.entries {
        println!("A[{r},{c}]: true {truth:+.6}  recovered {got:+.6}");
    }
    let ok = report.max_abs_error < 1e-2 && report.known_bit_identical;
    println!(
        "max abs error {:.3e}, known entries bit-identical: {}",
        report.max_abs_error, report.known_bit_identical
    );
    run.write("uniqueness.json", serde_json::to_string_pretty(&report)?)?;
    Ok((run.finish(None, vec![a.seed])?, ok))
}

/// The rows of one trajectory in a prediction dump.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DumpTrajectory {
    pub truth: Vec<(usize, f64, Vec<f64>)>,
    pub recon: Vec<(usize, f64, Vec<f64>)>,
    pub extrap: Vec<(usize, f64, Vec<f64>)>,
}

impl DumpTrajectory {
    /// Time of the last interpolation point, when an extrapolation follows.
    pub fn divider(&self) -> Option<f64> {
        if self.extrap.is_empty() {
            None
        } else {
            self.recon.last().map(|r| r.1)
        }
    }
}

pub fn read_dump(path: &Path, traj: usize) -> Result<DumpTrajectory> {
    if !path.exists() {
        return Err(Error::config(format!("prediction dump {} not found", path.display())));
    }
    let fmt = |e: csv::Error| Error::format(path.display().to_string(), e.to_string());
    let mut r = csv::Reader::from_path(path).map_err(fmt)?;
    let mut out = DumpTrajectory::default();
    for rec in r.records() {
        let rec = rec.map_err(fmt)?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format(path.display().to_string(), format!("bad field {i}")))
        };
        if num(1)? as usize != traj {
            continue;
        }
        let x = (4..rec.len()).map(num).collect::<Result<Vec<_>>>()?;
        let row = (num(2)? as usize, num(3)?, x);
        match rec.get(0) {
            Some("truth") => out.truth.push(row),
            Some("recon") => out.recon.push(row),
            Some("extrap") => out.extrap.push(row),
            other => return Err(Error::format(path.display().to_string(), format!("unknown source {other:?}"))),
        }
    }
    if out.truth.is_empty() {
        return Err(Error::config(format!("trajectory {traj} is not in {}", path.display())));
    }
    Ok(out)
}

/// Wide CSV: `index,time,segment,truth_x*,pred_x*`, one row per predicted point.
pub fn plot_csv(d: &DumpTrajectory) -> String {
    let dim = d.truth[0].2.len();
    let mut s = String::from("index,time,segment");
    for k in 0..dim {
        s.push_str(&format!(",truth_x{k}"));
    }
    for k in 0..dim {
        s.push_str(&format!(",pred_x{k}"));
    }
    s.push('\n');
    let truth: BTreeMap<usize, &Vec<f64>> = d.truth.iter().map(|(i, _, x)| (*i, x)).collect();
    for (segment, rows) in [("interpolation", &d.recon), ("extrapolation", &d.extrap)] {
        for (i, t, x) in rows {
            s.push_str(&format!("{i},{t},{segment}"));
            if let Some(tx) = truth.get(i) {
                tx.iter().for_each(|v| s.push_str(&format!(",{v}")));
            } else {
                (0..dim).for_each(|_| s.push(','));
            }
            x.iter().for_each(|v| s.push_str(&format!(",{v}")));
            s.push('\n');
        }
    }
    s
}

fn draw_dimension(d: &DumpTrajectory, k: usize, path: &Path) -> Result<()> {
    let err = |e: Box<dyn std::error::Error>| Error::format(path.display().to_string(), e.to_string());
    let all = d.truth.iter().chain(&d.recon).chain(&d.extrap);
    let (mut lo, mut hi, mut t0, mut t1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (_, t, x) in all {
        lo = lo.min(x[k]);
        hi = hi.max(x[k]);
        t0 = t0.min(*t);
        t1 = t1.max(*t);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    let root = SVGBackend::new(path, (900, 360)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(Box::new(e)))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("x{k}"), ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(t0..t1.max(t0 + 1e-9), (lo - pad)..(hi + pad))
        .map_err(|e| err(Box::new(e)))?;
    chart.configure_mesh().x_desc("time").draw().map_err(|e| err(Box::new(e)))?;
    let series = |rows: &[(usize, f64, Vec<f64>)]| rows.iter().map(|(_, t, x)| (*t, x[k])).collect::<Vec<_>>();
    chart
        .draw_series(LineSeries::new(series(&d.truth), BLACK.stroke_width(2)))
        .map_err(|e| err(Box::new(e)))?
        .label("truth");
    chart
        .draw_series(LineSeries::new(series(&d.recon), BLUE.stroke_width(2)))
        .map_err(|e| err(Box::new(e)))?
        .label("reconstruction");
    chart
        .draw_series(LineSeries::new(series(&d.extrap), RED.stroke_width(2)))
        .map_err(|e| err(Box::new(e)))?
        .label("extrapolation");
    if let Some(tn) = d.divider() {
        let gray = RGBColor(150, 150, 150);
        let dashes = (0..40).map(|j| {
            let a = lo - pad + (hi - lo + 2.0 * pad) * j as f64 / 40.0;
            let b = a + (hi - lo + 2.0 * pad) / 80.0;
            PathElement::new(vec![(tn, a), (tn, b)], gray.stroke_width(1))
        });
        chart.draw_series(dashes).map_err(|e| err(Box::new(e)))?;
    }
    root.present().map_err(|e| err(Box::new(e)))?;
    Ok(())
}

pub fn cmd_plot(a: &PlotArgs, overwrite: bool) -> Result<PathBuf> {
    let d = read_dump(&a.dump, a.traj)?;
    let dir = a.out.clone().unwrap_or_else(|| {
        a.dump.parent().map(|p| p.join("plots")).unwrap_or_else(|| PathBuf::from("plots"))
    });
    let mut run = Run::open(dir, overwrite)?;
    run.write(&format!("traj{}.csv", a.traj), plot_csv(&d))?;
    for k in 0..d.truth[0].2.len() {
        let p = run.path(&format!("traj{}_x{k}.svg", a.traj));
        draw_dimension(&d, k, &p)?;
    }
    run.finish(None, Vec::new())
}

/// Parses arguments, runs the command, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    if cli.jobs == 0 {
        eprintln!("error: --jobs must be at least 1");
        return EXIT_CONFIG;
    }
    let jobs = cli.jobs;
    let ow = cli.overwrite;
    let result = match &cli.command {
        Command::Generate(a) => with_jobs(jobs, || cmd_generate(a, ow)).and_then(|r| r).map(|p| (p, true)),
        Command::Train(a) => cmd_train(a, ow).map(|p| (p, true)),
        Command::Eval(a) => cmd_eval(a, ow).map(|p| (p, true)),
        Command::Ablate(a) => cmd_ablate(a, jobs, ow).map(|p| (p, true)),
        Command::Sweep(a) => cmd_sweep(a, jobs, ow).map(|p| (p, true)),
        Command::Uniqueness(a) => cmd_uniqueness(a, ow),
        Command::Plot(a) => cmd_plot(a, ow).map(|p| (p, true)),
    };
    match result {
        Ok((dir, ok)) => {
            println!("outputs in {}", dir.display());
            if ok {
                EXIT_OK
            } else {
                eprintln!("error: recovery tolerance not met");
                EXIT_RUNTIME
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
