//! Training loop, evaluation metrics, and the experiment protocols:
//! ablation, sensitivity sweep, regularizer-metric comparison, and the
//! identifiability (uniqueness) recovery test.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Graph;
use crate::dynamics::{integrate_rk4, Dataset, DatasetConfig, DynamicsSpec, IrregularTrajectory, System};
use crate::error::{Error, Result};
use crate::objective::{total_loss, EpochRecord, RegMetric};
use crate::params::ParamStore;
use crate::ssm::DeltaGroups;
use crate::unit::{apply_knowledge_mask, PhySsmUnit, UnknownDynamicsLearner};
use crate::vae::{Batch, LossWeights, ModelConfig, PhySsmModel, PriorKind, Sampling};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta: f64,
    pub lambda: f64,
    pub reg_metric: RegMetric,
    pub reg_augmented: bool,
    /// Interpolation window length n.
    pub n_in: usize,
    /// Extrapolation horizon l.
    pub n_out: usize,
    pub seeds: Vec<u64>,
    /// Global gradient-norm clip; zero disables clipping.
    pub grad_clip: f64,
    /// Validate every this many epochs (the last epoch is always validated).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 150,
            batch_size: 64,
            beta: 0.1,
            lambda: 1.0,
            reg_metric: RegMetric::Euclidean,
            reg_augmented: false,
            n_in: 160,
            n_out: 80,
            seeds: vec![0, 1, 2],
            grad_clip: 10.0,
            eval_every: 1,
        }
    }
}

/// Everything that determines a run, serialized as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Pendulum protocol with the published optimizer settings.
    pub fn pendulum() -> Self {
        Self {
            name: "pendulum".into(),
            data: DatasetConfig::pendulum_default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }

    pub fn sir() -> Self {
        let mut train = TrainConfig::default();
        train.n_in = 120;
        train.n_out = 72;
        Self {
            name: "sir".into(),
            data: DatasetConfig::sir_default(),
            model: ModelConfig::default(),
            train,
        }
    }

    pub fn for_system(system: System) -> Self {
        match system {
            System::Pendulum => Self::pendulum(),
            System::Sir => Self::sir(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> String {
        let text = self.to_toml().unwrap_or_default();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Points per corrupted trajectory.
    pub fn retained_len(&self) -> usize {
        let h = self.data.horizon;
        h - (self.data.drop_rate * h as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.n_in == 0 {
            return Err(Error::config("n_in must be positive"));
        }
        if t.n_in + t.n_out > self.retained_len() {
            return Err(Error::config(format!(
                "windows {}+{} exceed the {} retained points per trajectory",
                t.n_in,
                t.n_out,
                self.retained_len()
            )));
        }
        if t.batch_size == 0 || t.epochs == 0 || t.eval_every == 0 {
            return Err(Error::config("batch_size, epochs and eval_every must be positive"));
        }
        if !(t.learning_rate > 0.0) || !(t.beta >= 0.0) || !(t.lambda >= 0.0) {
            return Err(Error::config("learning_rate must be positive; beta and lambda non-negative"));
        }
        if t.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.data.n_train == 0 || self.data.n_val == 0 || self.data.n_test == 0 {
            return Err(Error::config("every split needs at least one trajectory"));
        }
        if !(0.0..1.0).contains(&self.data.drop_rate) {
            return Err(Error::config("drop_rate must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn spec(&self) -> DynamicsSpec {
        self.data.system.spec()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            beta: self.train.beta,
            lambda: self.train.lambda,
            metric: self.train.reg_metric,
            reg_augmented: self.train.reg_augmented,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<DMatrix<f64>> = store.values().iter().map(|v| DMatrix::zeros(v.nrows(), v.ncols())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[DMatrix<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in store.values_mut().iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

fn clip_gradients(grads: &mut [DMatrix<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// MAE and MSE over interpolation and extrapolation windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RunMetrics {
    pub interp_mae: f64,
    pub interp_mse: f64,
    pub extrap_mae: f64,
    pub extrap_mse: f64,
}

impl RunMetrics {
    /// `[interp_mae, interp_mse, extrap_mae, extrap_mse]`.
    pub fn fields(&self) -> [f64; 4] {
        [self.interp_mae, self.interp_mse, self.extrap_mae, self.extrap_mse]
    }

    fn from_fields(f: [f64; 4]) -> Self {
        Self {
            interp_mae: f[0],
            interp_mse: f[1],
            extrap_mae: f[2],
            extrap_mse: f[3],
        }
    }
}

/// Mean absolute and mean squared error, averaged over every entry.
pub fn mae_mse(pred: &[DMatrix<f64>], truth: &[DMatrix<f64>]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() || pred.iter().zip(truth).any(|(p, t)| p.shape() != t.shape()) {
        return Err(Error::shape("prediction and truth windows differ in shape"));
    }
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        for (a, b) in p.iter().zip(t.iter()) {
            abs += (a - b).abs();
            sq += (a - b) * (a - b);
        }
        n += p.len();
    }
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((abs / n as f64, sq / n as f64))
}

const EVAL_CHUNK: usize = 64;

/// Errors against the clean observations over both windows.
pub fn evaluate(model: &PhySsmModel, trajs: &[IrregularTrajectory], n_in: usize, n_out: usize) -> Result<RunMetrics> {
    if trajs.is_empty() {
        return Err(Error::config("evaluation set is empty"));
    }
    let mut preds_in = Vec::new();
    let mut truth_in = Vec::new();
    let mut preds_out = Vec::new();
    let mut truth_out = Vec::new();
    for chunk in trajs.chunks(EVAL_CHUNK) {
        let refs: Vec<&IrregularTrajectory> = chunk.iter().collect();
        let batch = Batch::new(&refs, n_in + n_out, model.nominal_dt)?;
        let (recon, extrap) = model.predict_batch(&batch, n_in, n_out)?;
        preds_in.extend(recon);
        truth_in.extend(batch.clean[..n_in].iter().cloned());
        preds_out.extend(extrap);
        truth_out.extend(batch.clean[n_in..n_in + n_out].iter().cloned());
    }
    let (interp_mae, interp_mse) = mae_mse(&preds_in, &truth_in)?;
    let (extrap_mae, extrap_mse) = mae_mse(&preds_out, &truth_out)?;
    Ok(RunMetrics {
        interp_mae,
        interp_mse,
        extrap_mae,
        extrap_mse,
    })
}

/// A trained model with its loss history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PhySsmModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_extrap_mse: f64,
    pub runtime_s: f64,
}

/// Builds the model a config describes for `dataset` at `seed`.
pub fn build_model(cfg: &ExperimentConfig, dataset: &Dataset, seed: u64) -> Result<PhySsmModel> {
    let system = dataset.manifest.config.system;
    if system != cfg.data.system {
        return Err(Error::config(format!(
            "config is for '{}' but the dataset holds '{}'",
            cfg.data.system.name(),
            system.name()
        )));
    }
    PhySsmModel::new(
        system.spec(),
        system.observation_dim(),
        dataset.manifest.config.dt,
        cfg.model.clone(),
        seed,
    )
}

/// Minimizes the objective on the training split; keeps the parameters with
/// the lowest validation extrapolation MSE.
pub fn train(cfg: &ExperimentConfig, dataset: &Dataset, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let mut model = build_model(cfg, dataset, seed)?;
    let t = &cfg.train;
    let weights = cfg.weights();
    let mut opt = Adam::new(&model.store, t.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_7A1A);
    let train_set = &dataset.train.corrupted;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(t.epochs);
    let mut best = (f64::INFINITY, 0usize, model.store.clone());
    for epoch in 1..=t.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut count = 0.0;
        for (bi, idx) in order.chunks(t.batch_size).enumerate() {
            let refs: Vec<&IrregularTrajectory> = idx.iter().map(|&i| &train_set[i]).collect();
            let batch = Batch::new(&refs, t.n_in, model.nominal_dt)?;
            let mut g = Graph::new();
            let p = model.store.bind(&mut g);
            let fv = model.forward(&mut g, &p, &batch, t.n_in, 0, Sampling::Sample(&mut rng))?;
            let lv = model.loss(&mut g, &fv, &batch, &weights);
            let total = g.scalar(lv.total);
            if !total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi,
                    loss: total,
                });
            }
            let w = refs.len() as f64;
            for (s, v) in sums.iter_mut().zip([lv.recon, lv.kl, lv.reg, lv.total]) {
                *s += g.scalar(v) * w;
            }
            count += w;
            let mut grads = g.backward(lv.total);
            let mut grads = p.gradients(&mut grads, &model.store);
            let norm = clip_gradients(&mut grads, t.grad_clip);
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi,
                    loss: norm,
                });
            }
            opt.step(&mut model.store, &grads);
        }
        let val = if epoch % t.eval_every == 0 || epoch == t.epochs {
            evaluate(&model, &dataset.val.corrupted, t.n_in, t.n_out)
                .map(|m| m.extrap_mse)
                .unwrap_or(f64::INFINITY)
        } else {
            f64::NAN
        };
        if val.is_finite() && val < best.0 {
            best = (val, epoch, model.store.clone());
        }
        let loss = total_loss(sums[0] / count, sums[1] / count, sums[2] / count, t.beta, t.lambda)?;
        history.push(EpochRecord {
            epoch,
            loss,
            val_extrap_mse: val,
        });
    }
    if best.0.is_finite() {
        model.store = best.2;
    }
    Ok(TrainOutcome {
        model,
        history,
        best_epoch: best.1,
        best_val_extrap_mse: best.0,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: RunMetrics,
    pub best_epoch: usize,
    pub runtime_s: f64,
}

/// Per-seed metrics with their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_seed: Vec<SeedResult>,
    pub mean: RunMetrics,
    /// Sample standard deviation over the seeds (zero for one seed).
    pub std: RunMetrics,
    pub runtime_s: f64,
}

impl MetricsReport {
    pub fn from_seeds(per_seed: Vec<SeedResult>) -> Self {
        let n = per_seed.len() as f64;
        let mut mean = [0.0; 4];
        for r in &per_seed {
            for (m, v) in mean.iter_mut().zip(r.metrics.fields()) {
                *m += v / n;
            }
        }
        let mut std = [0.0; 4];
        if per_seed.len() > 1 {
            for r in &per_seed {
                for (k, v) in r.metrics.fields().iter().enumerate() {
                    std[k] += (v - mean[k]).powi(2) / (n - 1.0);
                }
            }
            std.iter_mut().for_each(|s| *s = s.sqrt());
        }
        let runtime_s = per_seed.iter().map(|r| r.runtime_s).sum();
        Self {
            per_seed,
            mean: RunMetrics::from_fields(mean),
            std: RunMetrics::from_fields(std),
            runtime_s,
        }
    }
}

/// Runs `f` on a pool of `jobs` threads (one thread means sequential).
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Trains and tests one config for each of the given seeds.
pub fn run_seeds(cfg: &ExperimentConfig, dataset: &Dataset, seeds: &[u64]) -> Result<MetricsReport> {
    let results: Vec<Result<SeedResult>> = seeds
        .par_iter()
        .map(|&seed| {
            let out = train(cfg, dataset, seed)?;
            let metrics = evaluate(&out.model, &dataset.test.corrupted, cfg.train.n_in, cfg.train.n_out)?;
            Ok(SeedResult {
                seed,
                metrics,
                best_epoch: out.best_epoch,
                runtime_s: out.runtime_s,
            })
        })
        .collect();
    Ok(MetricsReport::from_seeds(results.into_iter().collect::<Result<_>>()?))
}

/// The data-driven prior whose transition parameter count is closest to
/// the Phy-SSM prior's (within 5% when reachable).
pub fn matched_data_driven(cfg: &ExperimentConfig) -> Result<PriorKind> {
    let spec = cfg.spec();
    let obs = cfg.data.system.observation_dim();
    let full = PhySsmModel::new(spec.clone(), obs, cfg.data.dt, cfg.model.clone(), 0)?.transition_param_count();
    let mut best: Option<(f64, PriorKind)> = None;
    let base = cfg.model.learner.width.max(1);
    for state_size in [cfg.model.learner.state_size] {
        for width in 1..=4 * base {
            let kind = PriorKind::DataDriven { width, state_size };
            let mut mc = cfg.model.clone();
            mc.prior = kind.clone();
            let n = PhySsmModel::new(spec.clone(), obs, cfg.data.dt, mc, 0)?.transition_param_count();
            let gap = (n as f64 - full as f64).abs() / full as f64;
            if best.as_ref().is_none_or(|(g, _)| gap < *g) {
                best = Some((gap, kind));
            }
        }
    }
    Ok(best.expect("width search is non-empty").1)
}

/// One labelled row of a protocol table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub config: ExperimentConfig,
    pub report: MetricsReport,
}

/// Config variants of the ablation: full, no unit, no regularizer.
pub fn ablation_configs(cfg: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    let mut no_unit = cfg.clone();
    no_unit.model.prior = matched_data_driven(cfg)?;
    let mut no_reg = cfg.clone();
    no_reg.train.lambda = 0.0;
    Ok(vec![
        ("full".into(), cfg.clone()),
        ("no_unit".into(), no_unit),
        ("no_reg".into(), no_reg),
    ])
}

pub fn run_ablation(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Vec<TableRow>> {
    run_table(ablation_configs(cfg)?, dataset)
}

fn run_table(variants: Vec<(String, ExperimentConfig)>, dataset: &Dataset) -> Result<Vec<TableRow>> {
    let jobs: Vec<(usize, u64)> = variants
        .iter()
        .enumerate()
        .flat_map(|(k, (_, c))| c.train.seeds.iter().map(move |&s| (k, s)))
        .collect();
    let results: Vec<Result<(usize, SeedResult)>> = jobs
        .par_iter()
        .map(|&(k, seed)| {
            let r = run_seeds(&variants[k].1, dataset, &[seed])?;
            Ok((k, r.per_seed.into_iter().next().expect("one seed")))
        })
        .collect();
    let mut per: Vec<Vec<SeedResult>> = vec![Vec::new(); variants.len()];
    for r in results {
        let (k, s) = r?;
        per[k].push(s);
    }
    Ok(variants
        .into_iter()
        .zip(per)
        .map(|((label, config), seeds)| TableRow {
            label,
            config,
            report: MetricsReport::from_seeds(seeds),
        })
        .collect())
}

/// Every (β, λ) cell of the grid at one fixed seed.
pub fn sensitivity_configs(cfg: &ExperimentConfig, betas: &[f64], lambdas: &[f64], seed: u64) -> Result<Vec<(String, ExperimentConfig)>> {
    if betas.is_empty() || lambdas.is_empty() {
        return Err(Error::config("sensitivity grids must be non-empty"));
    }
    let mut out = Vec::new();
    for &b in betas {
        for &l in lambdas {
            let mut c = cfg.clone();
            c.train.beta = b;
            c.train.lambda = l;
            c.train.seeds = vec![seed];
            out.push((format!("beta={b},lambda={l}"), c));
        }
    }
    Ok(out)
}

pub fn run_sensitivity(cfg: &ExperimentConfig, dataset: &Dataset, betas: &[f64], lambdas: &[f64], seed: u64) -> Result<Vec<TableRow>> {
    run_table(sensitivity_configs(cfg, betas, lambdas, seed)?, dataset)
}

/// One row per regularizer distance.
pub fn metric_configs(cfg: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    [RegMetric::Euclidean, RegMetric::Chebyshev, RegMetric::Cosine]
        .into_iter()
        .map(|m| {
            let mut c = cfg.clone();
            c.train.reg_metric = m;
            (m.name().to_string(), c)
        })
        .collect()
}

pub fn run_metric_comparison(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Vec<TableRow>> {
    run_table(metric_configs(cfg), dataset)
}

/// Outcome of fitting a constant learner to a linear system with known support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub seed: u64,
    /// `(row, col, true, recovered)` for each unknown entry.
    pub entries: Vec<(usize, usize, f64, f64)>,
    pub max_abs_error: f64,
    pub known_bit_identical: bool,
    pub iterations: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessConfig {
    pub n_trajectories: usize,
    pub horizon: usize,
    pub dt: f64,
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for UniquenessConfig {
    fn default() -> Self {
        Self {
            n_trajectories: 16,
            horizon: 60,
            dt: 0.05,
            iterations: 1500,
            learning_rate: 0.05,
        }
    }
}

/// Fits the five unknown entries of the four-dimensional linear system
/// from clean trajectories, decoding with the identity.
pub fn uniqueness_recovery_test(seed: u64, ucfg: &UniquenessConfig) -> Result<UniquenessReport> {
    let spec = DynamicsSpec::linear4();
    let truth = DynamicsSpec::linear4_truth();
    let d = spec.augmented_dim;
    let true_a = spec.compose(&DVector::zeros(d), 0.0, &truth);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let times: Vec<f64> = (0..ucfg.horizon).map(|i| i as f64 * ucfg.dt).collect();
    let none = vec![DVector::zeros(0); ucfg.horizon];
    let mut states = Vec::with_capacity(ucfg.n_trajectories);
    for _ in 0..ucfg.n_trajectories {
        let z0 = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        states.push(integrate_rk4(|z, _, _| &true_a * z, &z0, &times, &none, ucfg.dt / 10.0)?);
    }
    let targets: Vec<DMatrix<f64>> = (0..ucfg.horizon)
        .map(|i| DMatrix::from_fn(d, ucfg.n_trajectories, |r, j| states[j][i][r]))
        .collect();

    let mut store = ParamStore::new();
    let learner = UnknownDynamicsLearner::constant(&mut store, "unit", &DMatrix::zeros(d, d), None);
    let unit = PhySsmUnit::new(spec.clone(), learner);
    let known_before = spec.known_matrix(&DVector::zeros(d), 0.0);
    let mut opt = Adam::new(&store, ucfg.learning_rate);
    let deltas = vec![ucfg.dt; ucfg.n_trajectories];
    let groups = DeltaGroups::new(&deltas);
    let mut final_loss = f64::NAN;
    for it in 0..ucfg.iterations {
        // cosine decay to 1% of the initial rate
        let frac = it as f64 / ucfg.iterations as f64;
        opt.lr = ucfg.learning_rate * (0.01 + 0.99 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let c = unit.constants(&mut g);
        let u = g.constant(DMatrix::zeros(0, ucfg.n_trajectories));
        let mut z = g.constant(targets[0].clone());
        let mut hidden = unit.learner.zero_hidden(&mut g, ucfg.n_trajectories);
        let mut terms = Vec::with_capacity(ucfg.horizon - 1);
        for target in &targets[1..] {
            z = unit.step(&mut g, &p, &c, z, u, &mut hidden, &deltas, &groups)?;
            terms.push(crate::objective::recon_step(&mut g, z, target));
        }
        let loss = crate::objective::mean_of(&mut g, &terms);
        final_loss = g.scalar(loss);
        if !final_loss.is_finite() {
            return Err(Error::Diverged {
                epoch: it,
                batch: 0,
                loss: final_loss,
            });
        }
        let mut grads = g.backward(loss);
        let grads = p.gradients(&mut grads, &store);
        opt.step(&mut store, &grads);
    }
    let learned = crate::autodiff::column_as_matrix(&store.values()[0], 0, d, d);
    let masked = apply_knowledge_mask(&learned, &spec.mask_a)?;
    let composed = spec.compose(&DVector::zeros(d), 0.0, &masked);
    let mut known_bit_identical = true;
    for r in 0..d {
        for c in 0..d {
            if spec.mask_a[(r, c)] == 0.0 && composed[(r, c)].to_bits() != known_before[(r, c)].to_bits() {
                known_bit_identical = false;
            }
        }
    }
    let entries: Vec<(usize, usize, f64, f64)> = DynamicsSpec::LINEAR4_UNKNOWN
        .iter()
        .map(|&(r, c)| (r, c, truth[(r, c)], masked[(r, c)]))
        .collect();
    let max_abs_error = entries.iter().map(|e| (e.2 - e.3).abs()).fold(0.0, f64::max);
    Ok(UniquenessReport {
        seed,
        entries,
        max_abs_error,
        known_bit_identical,
        iterations: ucfg.iterations,
        final_loss,
    })
}

/// Header of a prediction dump: `source,traj,index,time,x0..`.
pub fn prediction_header(obs_dim: usize) -> Vec<String> {
    let mut h: Vec<String> = ["source", "traj", "index", "time"].iter().map(|s| s.to_string()).collect();
    h.extend((0..obs_dim).map(|k| format!("x{k}")));
    h
}

/// Writes truth, reconstruction (first `n_in` points) and extrapolation
/// (next `n_out`) rows for each trajectory.
pub fn write_prediction_dump(
    model: &PhySsmModel,
    trajs: &[IrregularTrajectory],
    n_in: usize,
    n_out: usize,
    path: &std::path::Path,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    let err = |e: csv::Error| Error::format(path.display().to_string(), e.to_string());
    w.write_record(prediction_header(model.obs_dim)).map_err(err)?;
    for (k, traj) in trajs.iter().enumerate() {
        let ff = model.forward_full(traj, n_in, n_out)?;
        let mut emit = |source: &str, i: usize, x: &[f64]| -> Result<()> {
            let mut rec = vec![source.to_string(), k.to_string(), traj.retained_indices[i].to_string(), format!("{}", traj.times[i])];
            rec.extend(x.iter().map(|v| format!("{v}")));
            w.write_record(&rec).map_err(err)
        };
        for i in 0..n_in + n_out {
            emit("truth", i, traj.clean_observations.column(i).as_slice())?;
        }
        for (i, x) in ff.recon.iter().enumerate() {
            emit("recon", i, x.as_slice())?;
        }
        for (i, x) in ff.extrap.iter().enumerate() {
            emit("extrap", n_in + i, x.as_slice())?;
        }
    }
    w.flush()?;
    Ok(())
}
