use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    integrate_rk4, pendulum_derivative, sir_derivative, PendulumParams, RateProfile, SirParams, System,
};
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Ground-truth trajectory. Matrices store one column per timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: DMatrix<f64>,
    pub observations: DMatrix<f64>,
    pub controls: DMatrix<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Corrupted, irregularly sampled view of a [`Trajectory`].
#[derive(Debug, Clone, PartialEq)]
pub struct IrregularTrajectory {
    pub times: Vec<f64>,
    /// Noisy observations at the retained timestamps.
    pub observations: DMatrix<f64>,
    /// Noise-free observations at the retained timestamps.
    pub clean_observations: DMatrix<f64>,
    pub controls: DMatrix<f64>,
    pub states: DMatrix<f64>,
    pub retained_indices: Vec<usize>,
    pub noise_sigma: f64,
    pub drop_rate: f64,
    pub seed: u64,
}

impl IrregularTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Uncorrupted view of a clean trajectory.
    pub fn from_clean(t: &Trajectory) -> Self {
        Self {
            times: t.times.clone(),
            observations: t.observations.clone(),
            clean_observations: t.observations.clone(),
            controls: t.controls.clone(),
            states: t.states.clone(),
            retained_indices: (0..t.len()).collect(),
            noise_sigma: 0.0,
            drop_rate: 0.0,
            seed: 0,
        }
    }
}

/// Per-trajectory parameters, kept for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "system", rename_all = "snake_case")]
pub enum SystemParams {
    Pendulum { params: PendulumParams, initial: Vec<f64> },
    Sir { params: SirParams, initial: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    pub system: System,
    pub dt: f64,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
    pub params: Vec<SystemParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendulumSampler {
    pub mass: f64,
    pub gravity: f64,
    pub damping: f64,
    pub length: (f64, f64),
    pub amplitude: (f64, f64),
    pub control_frequency: f64,
    pub theta0: (f64, f64),
    pub omega0: (f64, f64),
}

impl Default for PendulumSampler {
    fn default() -> Self {
        Self {
            mass: 1.0,
            gravity: 10.0,
            damping: 0.7,
            length: (1.0, 2.0),
            amplitude: (-5.0, 5.0),
            control_frequency: 0.2,
            theta0: (-PI, PI),
            omega0: (-1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SirSampler {
    pub contact_rate: (f64, f64),
    pub removal_rate: (f64, f64),
    pub population: f64,
    pub infected0: (f64, f64),
    /// Draw three-knot piecewise-linear rate profiles instead of constants.
    pub time_varying: bool,
}

impl Default for SirSampler {
    fn default() -> Self {
        Self {
            contact_rate: (0.2, 0.5),
            removal_rate: (0.05, 0.15),
            population: 1.0,
            infected0: (0.001, 0.01),
            time_varying: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamSampler {
    Pendulum(PendulumSampler),
    Sir(SirSampler),
}

impl ParamSampler {
    pub fn default_for(system: System) -> Self {
        match system {
            System::Pendulum => ParamSampler::Pendulum(PendulumSampler::default()),
            System::Sir => ParamSampler::Sir(SirSampler::default()),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..range.1)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn simulate_one(system: System, sampler: &ParamSampler, times: &[f64], dt: f64, rng: &mut ChaCha8Rng) -> Result<(Trajectory, SystemParams)> {
    let max_step = dt / 10.0;
    match (system, sampler) {
        (System::Pendulum, ParamSampler::Pendulum(s)) => {
            let params = PendulumParams {
                mass: s.mass,
                gravity: s.gravity,
                damping: s.damping,
                length: uniform(rng, s.length),
                control_amplitude: uniform(rng, s.amplitude),
                control_frequency: s.control_frequency,
            };
            params.validate()?;
            let z0 = DVector::from_vec(vec![uniform(rng, s.theta0), uniform(rng, s.omega0)]);
            let controls: Vec<DVector<f64>> =
                times.iter().map(|&t| DVector::from_element(1, params.control(t))).collect();
            let states = integrate_rk4(|z, _, t| pendulum_derivative(&params, z, t), &z0, times, &controls, max_step)?;
            let traj = assemble(system, times, &states, &controls, 1.0);
            Ok((traj, SystemParams::Pendulum { params, initial: z0.as_slice().to_vec() }))
        }
        (System::Sir, ParamSampler::Sir(s)) => {
            let n = s.population;
            let mut params = SirParams::constant(uniform(rng, s.contact_rate), uniform(rng, s.removal_rate), n);
            if s.time_varying {
                let end = times[times.len() - 1];
                let knots = |rng: &mut ChaCha8Rng, range| {
                    RateProfile {
                        knots: (0..3).map(|k| (end * k as f64 / 2.0, uniform(rng, range))).collect(),
                    }
                };
                params.contact_profile = Some(knots(rng, s.contact_rate));
                params.removal_profile = Some(knots(rng, s.removal_rate));
            }
            params.validate()?;
            let i0 = uniform(rng, s.infected0) * n;
            let z0 = DVector::from_vec(vec![n - i0, i0, 0.0]);
            let controls = vec![DVector::zeros(0); times.len()];
            let states = integrate_rk4(|z, _, t| sir_derivative(&params, z, t), &z0, times, &controls, max_step)?;
            let traj = assemble(system, times, &states, &controls, n);
            Ok((traj, SystemParams::Sir { params, initial: z0.as_slice().to_vec() }))
        }
        _ => Err(Error::config(format!("sampler does not match system '{}'", system.name()))),
    }
}

fn assemble(system: System, times: &[f64], states: &[DVector<f64>], controls: &[DVector<f64>], population: f64) -> Trajectory {
    let obs: Vec<DVector<f64>> = states.iter().map(|z| system.emit(z, population)).collect();
    Trajectory {
        times: times.to_vec(),
        states: DMatrix::from_columns(states),
        observations: DMatrix::from_columns(&obs),
        controls: if controls[0].is_empty() {
            DMatrix::zeros(0, times.len())
        } else {
            DMatrix::from_columns(controls)
        },
    }
}

/// Simulates `n_trajectories` ground-truth trajectories on the grid
/// `{0, dt, …, (horizon−1)·dt}`. Trajectory `k` draws its randomness from
/// stream `k` of the seed, so output is independent of scheduling.
pub fn generate_dataset(
    system: System,
    n_trajectories: usize,
    horizon: usize,
    dt: f64,
    sampler: &ParamSampler,
    seed: u64,
) -> Result<TrajectorySet> {
    if horizon < 2 {
        return Err(Error::config("horizon must be at least 2"));
    }
    if !(dt > 0.0) {
        return Err(Error::config("dt must be positive"));
    }
    let times: Vec<f64> = (0..horizon).map(|i| i as f64 * dt).collect();
    let results: Vec<Result<(Trajectory, SystemParams)>> = (0..n_trajectories)
        .into_par_iter()
        .map(|k| simulate_one(system, sampler, &times, dt, &mut stream_rng(seed, k as u64)))
        .collect();
    let mut trajectories = Vec::with_capacity(n_trajectories);
    let mut params = Vec::with_capacity(n_trajectories);
    for r in results {
        let (t, p) = r?;
        trajectories.push(t);
        params.push(p);
    }
    Ok(TrajectorySet {
        system,
        dt,
        seed,
        trajectories,
        params,
    })
}

/// Adds i.i.d. Gaussian noise to observations and drops a uniformly random
/// subset of indices other than the first.
pub fn corrupt(set: &TrajectorySet, noise_sigma: f64, drop_rate: f64, seed: u64) -> Result<Vec<IrregularTrajectory>> {
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(Error::config(format!("drop rate {drop_rate} outside [0, 1)")));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::config(format!("noise sigma {noise_sigma} must be non-negative")));
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    set.trajectories
        .iter()
        .enumerate()
        .map(|(k, traj)| {
            let len = traj.len();
            let n_drop = (drop_rate * len as f64).round() as usize;
            if len < 2 || len - n_drop < 2 {
                return Err(Error::config(format!(
                    "drop rate {drop_rate} leaves {} of {len} points",
                    len.saturating_sub(n_drop)
                )));
            }
            let mut rng = stream_rng(seed, k as u64);
            let mut noisy = traj.observations.clone();
            if noise_sigma > 0.0 {
                for v in noisy.iter_mut() {
                    *v += noise_sigma * normal.sample(&mut rng);
                }
            }
            let mut keep = vec![true; len];
            for i in rand::seq::index::sample(&mut rng, len - 1, n_drop).iter() {
                keep[i + 1] = false;
            }
            let retained: Vec<usize> = (0..len).filter(|&i| keep[i]).collect();
            let pick = |m: &DMatrix<f64>| m.select_columns(retained.iter());
            Ok(IrregularTrajectory {
                times: retained.iter().map(|&i| traj.times[i]).collect(),
                observations: pick(&noisy),
                clean_observations: pick(&traj.observations),
                controls: pick(&traj.controls),
                states: pick(&traj.states),
                retained_indices: retained,
                noise_sigma,
                drop_rate,
                seed,
            })
        })
        .collect()
}

/// Per-dimension z-score statistics of the observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn fit(set: &TrajectorySet) -> Self {
        let dim = set.trajectories[0].observations.nrows();
        let total: usize = set.trajectories.iter().map(|t| t.len()).sum();
        let mut mean = vec![0.0; dim];
        for t in &set.trajectories {
            for (d, m) in mean.iter_mut().enumerate() {
                *m += t.observations.row(d).sum();
            }
        }
        mean.iter_mut().for_each(|m| *m /= total as f64);
        let mut var = vec![0.0; dim];
        for t in &set.trajectories {
            for (d, v) in var.iter_mut().enumerate() {
                *v += t.observations.row(d).iter().map(|x| (x - mean[d]).powi(2)).sum::<f64>();
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / total as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, set: &mut TrajectorySet) {
        for t in &mut set.trajectories {
            for (d, mut row) in t.observations.row_iter_mut().enumerate() {
                row.iter_mut().for_each(|x| *x = (*x - self.mean[d]) / self.std[d]);
            }
        }
    }
}

/// Settings for a full train/validation/test dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub system: System,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub horizon: usize,
    pub dt: f64,
    pub seed: u64,
    pub noise_sigma: f64,
    pub drop_rate: f64,
    pub sampler: ParamSampler,
    /// Z-score observations with training-split statistics.
    pub normalize: bool,
}

impl DatasetConfig {
    /// Desk-scale pendulum protocol: 64/8/16 trajectories of 300 points at
    /// dt = 0.05, noise 0.3, 20% dropped.
    pub fn pendulum_default() -> Self {
        Self {
            system: System::Pendulum,
            n_train: 64,
            n_val: 8,
            n_test: 16,
            horizon: 300,
            dt: 0.05,
            seed: 0,
            noise_sigma: 0.3,
            drop_rate: 0.2,
            sampler: ParamSampler::default_for(System::Pendulum),
            normalize: false,
        }
    }

    pub fn sir_default() -> Self {
        Self {
            system: System::Sir,
            n_train: 64,
            n_val: 8,
            n_test: 16,
            horizon: 240,
            dt: 1.0,
            seed: 0,
            noise_sigma: 0.05,
            drop_rate: 0.2,
            sampler: ParamSampler::default_for(System::Sir),
            normalize: true,
        }
    }
}

/// Dataset manifest written as `manifest.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub split_seeds: SplitSeeds,
    pub normalization: Option<Normalization>,
    pub emission: String,
    pub columns: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSeeds {
    pub train: u64,
    pub val: u64,
    pub test: u64,
    pub corrupt_train: u64,
    pub corrupt_val: u64,
    pub corrupt_test: u64,
}

impl SplitSeeds {
    fn derive(seed: u64) -> Self {
        // splitmix64 finalizer over distinct tags
        let mix = |tag: u64| {
            let mut z = seed.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        };
        Self {
            train: mix(1),
            val: mix(2),
            test: mix(3),
            corrupt_train: mix(4),
            corrupt_val: mix(5),
            corrupt_test: mix(6),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub clean: TrajectorySet,
    pub corrupted: Vec<IrregularTrajectory>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

fn emission_doc(system: System, normalize: bool) -> String {
    let base = match system {
        System::Pendulum => "(sin theta, cos theta, omega)",
        System::Sir => "(S, I, R) / N",
    };
    if normalize {
        format!("{base}, z-scored with training statistics")
    } else {
        base.to_string()
    }
}

const COLUMN_DOC: &str = "clean: traj,index,time,x*,u*,z*; corrupted: traj,index,time,x*,u*,z*,xc* \
(index = original grid index; x = observation, u = control, z = state, xc = noise-free observation)";

pub fn build_dataset(config: &DatasetConfig) -> Result<Dataset> {
    let seeds = SplitSeeds::derive(config.seed);
    let gen = |n, seed| generate_dataset(config.system, n, config.horizon, config.dt, &config.sampler, seed);
    let mut train = gen(config.n_train, seeds.train)?;
    let mut val = gen(config.n_val, seeds.val)?;
    let mut test = gen(config.n_test, seeds.test)?;
    let normalization = if config.normalize {
        if train.trajectories.is_empty() {
            return Err(Error::config("normalization needs a non-empty training split"));
        }
        let stats = Normalization::fit(&train);
        for set in [&mut train, &mut val, &mut test] {
            stats.apply(set);
        }
        Some(stats)
    } else {
        None
    };
    let split = |clean: TrajectorySet, seed| -> Result<Split> {
        let corrupted = corrupt(&clean, config.noise_sigma, config.drop_rate, seed)?;
        Ok(Split { clean, corrupted })
    };
    Ok(Dataset {
        manifest: Manifest {
            format_version: DATASET_FORMAT_VERSION,
            config: config.clone(),
            split_seeds: seeds,
            normalization,
            emission: emission_doc(config.system, config.normalize),
            columns: COLUMN_DOC.to_string(),
        },
        train: split(train, seeds.corrupt_train)?,
        val: split(val, seeds.corrupt_val)?,
        test: split(test, seeds.corrupt_test)?,
    })
}

fn header(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}{i}"))
}

fn write_clean(path: &Path, set: &TrajectorySet) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    let t0 = &set.trajectories;
    let (dx, du, dz) = t0.first().map_or((0, 0, 0), |t| (t.observations.nrows(), t.controls.nrows(), t.states.nrows()));
    let mut head: Vec<String> = vec!["traj".into(), "index".into(), "time".into()];
    head.extend(header("x", dx).chain(header("u", du)).chain(header("z", dz)));
    w.write_record(&head).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    for (k, t) in set.trajectories.iter().enumerate() {
        for i in 0..t.len() {
            let mut row = vec![k.to_string(), i.to_string(), t.times[i].to_string()];
            row.extend(t.observations.column(i).iter().map(|v| v.to_string()));
            row.extend(t.controls.column(i).iter().map(|v| v.to_string()));
            row.extend(t.states.column(i).iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_corrupted(path: &Path, set: &[IrregularTrajectory]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    let (dx, du, dz) = set.first().map_or((0, 0, 0), |t| (t.observations.nrows(), t.controls.nrows(), t.states.nrows()));
    let mut head: Vec<String> = vec!["traj".into(), "index".into(), "time".into()];
    head.extend(header("x", dx).chain(header("u", du)).chain(header("z", dz)).chain(header("xc", dx)));
    w.write_record(&head).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    for (k, t) in set.iter().enumerate() {
        for i in 0..t.len() {
            let mut row = vec![k.to_string(), t.retained_indices[i].to_string(), t.times[i].to_string()];
            row.extend(t.observations.column(i).iter().map(|v| v.to_string()));
            row.extend(t.controls.column(i).iter().map(|v| v.to_string()));
            row.extend(t.states.column(i).iter().map(|v| v.to_string()));
            row.extend(t.clean_observations.column(i).iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Rows {
    traj: Vec<usize>,
    index: Vec<usize>,
    time: Vec<f64>,
    values: Vec<Vec<f64>>,
}

fn read_rows(path: &Path) -> Result<Rows> {
    let err = |e: &dyn std::fmt::Display| Error::format(path.display().to_string(), e.to_string());
    let mut r = csv::Reader::from_path(path).map_err(|e| err(&e))?;
    let mut rows = Rows { traj: vec![], index: vec![], time: vec![], values: vec![] };
    for rec in r.records() {
        let rec = rec.map_err(|e| err(&e))?;
        let num = |i: usize| -> Result<f64> { rec[i].parse::<f64>().map_err(|e| err(&e)) };
        rows.traj.push(rec[0].parse().map_err(|e| err(&e))?);
        rows.index.push(rec[1].parse().map_err(|e| err(&e))?);
        rows.time.push(num(2)?);
        rows.values.push((3..rec.len()).map(num).collect::<Result<_>>()?);
    }
    Ok(rows)
}

/// Groups consecutive rows by trajectory id.
fn group_rows(rows: &Rows) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=rows.traj.len() {
        if i == rows.traj.len() || rows.traj[i] != rows.traj[start] {
            out.push(start..i);
            start = i;
        }
    }
    if rows.traj.is_empty() {
        out.clear();
    }
    out
}

fn columns(rows: &Rows, range: std::ops::Range<usize>, offset: usize, dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(dim, range.len(), |r, c| rows.values[range.start + c][offset + r])
}

impl Dataset {
    /// Writes the dataset directory. Existing files are replaced only with `overwrite`.
    pub fn save(&self, dir: &Path, overwrite: bool) -> Result<()> {
        let manifest_path = dir.join("manifest.toml");
        if manifest_path.exists() && !overwrite {
            return Err(Error::config(format!("{} exists; pass --overwrite to replace it", dir.display())));
        }
        fs::create_dir_all(dir)?;
        let text = toml::to_string(&self.manifest).map_err(|e| Error::format(manifest_path.display().to_string(), e.to_string()))?;
        fs::write(&manifest_path, text)?;
        for (name, split) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            write_clean(&dir.join(format!("{name}_clean.csv")), &split.clean)?;
            write_corrupted(&dir.join(format!("{name}_corrupted.csv")), &split.corrupted)?;
            let mut f = fs::File::create(dir.join(format!("{name}_params.jsonl")))?;
            for p in &split.clean.params {
                writeln!(f, "{}", serde_json::to_string(p)?)?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.toml");
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::format(manifest_path.display().to_string(), e.to_string()))?;
        let manifest: Manifest =
            toml::from_str(&text).map_err(|e| Error::format(manifest_path.display().to_string(), e.to_string()))?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::format(
                manifest_path.display().to_string(),
                format!("unsupported format version {}", manifest.format_version),
            ));
        }
        let system = manifest.config.system;
        let dx = system.observation_dim();
        let du = system.control_dim();
        let dz = system.state_dim();
        let seeds = manifest.split_seeds;
        let load_split = |name: &str, seed: u64, cseed: u64| -> Result<Split> {
            let rows = read_rows(&dir.join(format!("{name}_clean.csv")))?;
            let trajectories = group_rows(&rows)
                .into_iter()
                .map(|r| Trajectory {
                    times: rows.time[r.clone()].to_vec(),
                    observations: columns(&rows, r.clone(), 0, dx),
                    controls: columns(&rows, r.clone(), dx, du),
                    states: columns(&rows, r, dx + du, dz),
                })
                .collect();
            let params_file = fs::File::open(dir.join(format!("{name}_params.jsonl")))?;
            let params = BufReader::new(params_file)
                .lines()
                .map(|l| Ok(serde_json::from_str(&l?)?))
                .collect::<Result<Vec<SystemParams>>>()?;
            let rows = read_rows(&dir.join(format!("{name}_corrupted.csv")))?;
            let corrupted = group_rows(&rows)
                .into_iter()
                .map(|r| IrregularTrajectory {
                    times: rows.time[r.clone()].to_vec(),
                    observations: columns(&rows, r.clone(), 0, dx),
                    controls: columns(&rows, r.clone(), dx, du),
                    states: columns(&rows, r.clone(), dx + du, dz),
                    clean_observations: columns(&rows, r.clone(), dx + du + dz, dx),
                    retained_indices: rows.index[r].to_vec(),
                    noise_sigma: manifest.config.noise_sigma,
                    drop_rate: manifest.config.drop_rate,
                    seed: cseed,
                })
                .collect();
            Ok(Split {
                clean: TrajectorySet { system, dt: manifest.config.dt, seed, trajectories, params },
                corrupted,
            })
        };
        Ok(Dataset {
            train: load_split("train", seeds.train, seeds.corrupt_train)?,
            val: load_split("val", seeds.val, seeds.corrupt_val)?,
            test: load_split("test", seeds.test, seeds.corrupt_test)?,
            manifest,
        })
    }
}
