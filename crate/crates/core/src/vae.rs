//! Sequential VAE: causal SSM encoder, physics prior through the Phy-SSM
//! unit, and an MLP decoder.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dynamics::{DynamicsSpec, IrregularTrajectory};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::objective::{kl_step, mean_of, recon_step, reg_step, RegMetric};
use crate::params::{Bound, ParamStore, TensorArchive};
use crate::ssm::{DeltaGroups, SsmStack, Timescale};
use crate::unit::{LearnerConfig, PhySsmUnit, UnitConstants, UnknownDynamicsLearner};

/// Which transition the prior uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorKind {
    /// The Phy-SSM unit with the spec's known matrix and masks.
    PhySsm,
    /// `z ← z + Δ·(W·SSM(z, u) + b)` with no physics knowledge.
    DataDriven { width: usize, state_size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder_width: usize,
    pub encoder_state: usize,
    pub encoder_layers: usize,
    pub mlp_hidden: usize,
    pub timescale: Timescale,
    pub learner: LearnerConfig,
    pub prior: PriorKind,
    pub logstd_min: f64,
    pub logstd_max: f64,
    /// Initial bias of the prior log-std head.
    pub prior_logstd_init: f64,
    /// Learn the map from the transition output to the prior mean. When off,
    /// the mean is the base-state block of the transition output and only the
    /// log-std map is learned.
    #[serde(default = "yes")]
    pub learn_prior_mean: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_width: 16,
            encoder_state: 16,
            encoder_layers: 2,
            mlp_hidden: 32,
            timescale: Timescale::RawGap,
            learner: LearnerConfig::default(),
            prior: PriorKind::PhySsm,
            logstd_min: -6.0,
            logstd_max: 2.0,
            prior_logstd_init: -2.0,
            learn_prior_mean: true,
        }
    }
}

fn yes() -> bool {
    true
}

/// Per-step diagonal Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSeq {
    pub means: Vec<DVector<f64>>,
    pub stds: Vec<DVector<f64>>,
    pub times: Vec<f64>,
}

impl GaussianSeq {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

/// `mean + std ⊙ ε`, with ε drawn from a generator seeded by `seed`.
pub fn reparameterize(g: &GaussianSeq, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    g.means
        .iter()
        .zip(&g.stds)
        .map(|(m, s)| {
            let eps = DVector::from_fn(m.len(), |_, _| StandardNormal.sample(&mut rng));
            m + s.component_mul(&eps)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Encoder {
    pub pre: Mlp,
    pub stack: SsmStack,
    pub head: Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Transition {
    Unit(PhySsmUnit),
    DataDriven { stack: SsmStack, head: Linear },
}

/// A batch of equal-length sequences, one column per trajectory.
#[derive(Debug, Clone)]
pub struct Batch {
    pub obs: Vec<DMatrix<f64>>,
    pub clean: Vec<DMatrix<f64>>,
    pub controls: Vec<DMatrix<f64>>,
    pub times: Vec<Vec<f64>>,
    /// `deltas[i][j]` is the gap before step `i` of item `j`; step 0 uses the nominal step.
    pub deltas: Vec<Vec<f64>>,
    pub groups: Vec<DeltaGroups>,
}

impl Batch {
    /// Takes the first `len` points of every trajectory.
    pub fn new(trajs: &[&IrregularTrajectory], len: usize, nominal_dt: f64) -> Result<Self> {
        if trajs.is_empty() {
            return Err(Error::shape("empty batch"));
        }
        if let Some(t) = trajs.iter().find(|t| t.len() < len) {
            return Err(Error::shape(format!(
                "trajectory has {} points, the window needs {len}",
                t.len()
            )));
        }
        let stack = |f: &dyn Fn(&IrregularTrajectory, usize) -> DVector<f64>, rows: usize| -> Vec<DMatrix<f64>> {
            (0..len)
                .map(|i| {
                    let mut m = DMatrix::zeros(rows, trajs.len());
                    for (j, t) in trajs.iter().enumerate() {
                        m.set_column(j, &f(t, i));
                    }
                    m
                })
                .collect()
        };
        let dx = trajs[0].observations.nrows();
        let du = trajs[0].controls.nrows();
        let obs = stack(&|t, i| t.observations.column(i).into_owned(), dx);
        let clean = stack(&|t, i| t.clean_observations.column(i).into_owned(), dx);
        let controls = stack(&|t, i| t.controls.column(i).into_owned(), du);
        let times: Vec<Vec<f64>> = (0..len).map(|i| trajs.iter().map(|t| t.times[i]).collect()).collect();
        let deltas: Vec<Vec<f64>> = (0..len)
            .map(|i| {
                trajs
                    .iter()
                    .map(|t| if i == 0 { nominal_dt } else { t.times[i] - t.times[i - 1] })
                    .collect()
            })
            .collect();
        if let Some(d) = deltas.iter().flatten().find(|d| !(**d > 0.0)) {
            return Err(Error::Domain(format!("step size must be positive, got {d}")));
        }
        let groups = deltas.iter().map(|d| DeltaGroups::new(d)).collect();
        Ok(Self {
            obs,
            clean,
            controls,
            times,
            deltas,
            groups,
        })
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn size(&self) -> usize {
        self.obs[0].ncols()
    }
}

/// How latent values are drawn inside a forward pass.
pub enum Sampling<'a> {
    /// Reparameterized samples from the given generator.
    Sample(&'a mut ChaCha8Rng),
    /// Means only.
    Mean,
}

/// Tape handles produced by [`PhySsmModel::forward`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub post_mean: Vec<Var>,
    pub post_logstd: Vec<Var>,
    pub post_z: Vec<Var>,
    pub prior_mean: Vec<Var>,
    pub prior_logstd: Vec<Var>,
    pub prior_z: Vec<Var>,
    /// Decoded posterior, one per interpolation step.
    pub recon: Vec<Var>,
    /// Decoded prior rollout, one per extrapolation step.
    pub extrap: Vec<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda: f64,
    pub metric: RegMetric,
    /// Compare augmented instead of base latent states in the regularizer.
    pub reg_augmented: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
    pub reg: Var,
}

/// Interpolation and extrapolation of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct FullForward {
    pub posterior: GaussianSeq,
    pub prior: GaussianSeq,
    pub recon: Vec<DVector<f64>>,
    pub extrap: Vec<DVector<f64>>,
}

/// Hidden memory of the prior transition for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorState {
    pub hidden: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct PhySsmModel {
    pub spec: DynamicsSpec,
    pub config: ModelConfig,
    pub obs_dim: usize,
    pub nominal_dt: f64,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub transition: Transition,
    pub prior_head: Linear,
    pub decoder: Mlp,
}

struct StepCtx {
    unit: Option<UnitConstants>,
}

impl PhySsmModel {
    pub fn new(spec: DynamicsSpec, obs_dim: usize, nominal_dt: f64, config: ModelConfig, seed: u64) -> Result<Self> {
        if !(nominal_dt > 0.0) {
            return Err(Error::config("nominal step must be positive"));
        }
        if !(config.logstd_min < config.logstd_max) {
            return Err(Error::config("logstd_min must be below logstd_max"));
        }
        if let Timescale::PerLayer { scales } = &config.timescale {
            if scales.len() != config.encoder_layers || scales.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::config("per-layer timescales must be positive, one per encoder layer"));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dz = spec.state_dim;
        let du = spec.control_dim;
        let c = &config;
        let encoder = Encoder {
            pre: Mlp::new(&mut store, "encoder/pre", &[obs_dim, c.mlp_hidden, c.encoder_width], &mut rng),
            stack: SsmStack::new(
                &mut store,
                "encoder/ssm",
                c.encoder_width,
                c.encoder_width,
                c.encoder_state,
                c.encoder_layers,
                c.timescale.clone(),
                &mut rng,
            ),
            head: Linear::new(&mut store, "encoder/head", c.encoder_width, 2 * dz, &mut rng),
        };
        let (transition, out_dim) = match &c.prior {
            PriorKind::PhySsm => {
                let learner = UnknownDynamicsLearner::ssm(&mut store, "unit", &spec, &c.learner, &mut rng);
                (Transition::Unit(PhySsmUnit::new(spec.clone(), learner)), spec.augmented_dim)
            }
            PriorKind::DataDriven { width, state_size } => {
                let stack = SsmStack::new(
                    &mut store,
                    "transition/ssm",
                    dz + du,
                    *width,
                    *state_size,
                    c.learner.layers,
                    Timescale::RawGap,
                    &mut rng,
                );
                let w = crate::params::uniform_matrix(&mut rng, dz, *width, c.learner.head_init);
                let head = Linear::with_weight(&mut store, "transition/head", w);
                (Transition::DataDriven { stack, head }, dz)
            }
        };
        let prior_head = if c.learn_prior_mean {
            let mut w = DMatrix::zeros(2 * dz, out_dim);
            for k in 0..dz {
                w[(k, k)] = 1.0;
            }
            let head = Linear::with_weight(&mut store, "prior/head", w);
            store.get_mut(head.b).rows_mut(dz, dz).fill(c.prior_logstd_init);
            head
        } else {
            let head = Linear::with_weight(&mut store, "prior/head", DMatrix::zeros(dz, out_dim));
            store.get_mut(head.b).fill(c.prior_logstd_init);
            head
        };
        let decoder = Mlp::new(&mut store, "decoder", &[dz, c.mlp_hidden, c.mlp_hidden, obs_dim], &mut rng);
        Ok(Self {
            spec,
            config,
            obs_dim,
            nominal_dt,
            store,
            encoder,
            transition,
            prior_head,
            decoder,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.state_dim
    }

    /// Parameters of the prior transition and its output map.
    pub fn transition_param_count(&self) -> usize {
        let prefix = match self.transition {
            Transition::Unit(_) => "unit/",
            Transition::DataDriven { .. } => "transition/",
        };
        self.store.scalar_count_with_prefix(prefix) + self.store.scalar_count_with_prefix("prior/")
    }

    fn ctx(&self, g: &mut Graph) -> StepCtx {
        StepCtx {
            unit: match &self.transition {
                Transition::Unit(u) => Some(u.constants(g)),
                Transition::DataDriven { .. } => None,
            },
        }
    }

    fn zero_transition_hidden(&self, g: &mut Graph, batch: usize) -> Vec<Var> {
        match &self.transition {
            Transition::Unit(u) => u.learner.zero_hidden(g, batch),
            Transition::DataDriven { stack, .. } => stack.zero_state(g, batch),
        }
    }

    fn gaussian_head(&self, g: &mut Graph, p: &Bound, head: &Linear, x: Var) -> (Var, Var) {
        let dz = self.latent_dim();
        let out = head.forward(g, p, x);
        let mean = g.slice_rows(out, 0, dz);
        let ls = g.slice_rows(out, dz, dz);
        let ls = g.clamp(ls, self.config.logstd_min, self.config.logstd_max);
        (mean, ls)
    }

    fn encoder_step(&self, g: &mut Graph, p: &Bound, x: &DMatrix<f64>, hidden: &mut [Var], groups: &DeltaGroups) -> Result<(Var, Var)> {
        let xv = g.constant(x.clone());
        let h = self.encoder.pre.forward(g, p, xv);
        let y = self.encoder.stack.step(g, p, h, hidden, groups)?;
        Ok(self.gaussian_head(g, p, &self.encoder.head, y))
    }

    /// One prior step from latent `z` (d_z × B): returns (mean, log-std).
    fn prior_step(
        &self,
        g: &mut Graph,
        p: &Bound,
        ctx: &StepCtx,
        z: Var,
        u: &DMatrix<f64>,
        hidden: &mut [Var],
        deltas: &[f64],
        groups: &DeltaGroups,
    ) -> Result<(Var, Var)> {
        let uv = g.constant(u.clone());
        let out = match &self.transition {
            Transition::Unit(unit) => {
                let zbar = self.spec.augment_graph(g, z);
                let c = ctx.unit.as_ref().expect("unit constants");
                unit.step(g, p, c, zbar, uv, hidden, deltas, groups)?
            }
            Transition::DataDriven { stack, head } => {
                let x = if u.nrows() > 0 { g.concat_rows(&[z, uv]) } else { z };
                let y = stack.step(g, p, x, hidden, groups)?;
                let v = head.forward(g, p, y);
                let dmat = g.constant(DMatrix::from_fn(self.latent_dim(), deltas.len(), |_, j| deltas[j]));
                let dz = g.mul(v, dmat);
                g.add(z, dz)
            }
        };
        if self.config.learn_prior_mean {
            return Ok(self.gaussian_head(g, p, &self.prior_head, out));
        }
        let dz = self.latent_dim();
        let mean = g.slice_rows(out, 0, dz);
        let ls = self.prior_head.forward(g, p, out);
        let ls = g.clamp(ls, self.config.logstd_min, self.config.logstd_max);
        Ok((mean, ls))
    }

    fn draw(&self, g: &mut Graph, mean: Var, logstd: Var, sampling: &mut Sampling) -> Var {
        match sampling {
            Sampling::Mean => mean,
            Sampling::Sample(rng) => {
                let (r, c) = g.value(mean).shape();
                let eps = DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(*rng));
                let eps = g.constant(eps);
                let std = g.exp(logstd);
                let noise = g.mul(std, eps);
                g.add(mean, noise)
            }
        }
    }

    /// Runs the encoder and the prior over `n_in` interpolation steps, then
    /// rolls the prior forward `n_out` extrapolation steps.
    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &Batch, n_in: usize, n_out: usize, mut sampling: Sampling) -> Result<ForwardVars> {
        if n_in == 0 {
            return Err(Error::config("interpolation window must be non-empty"));
        }
        if batch.len() < n_in + n_out {
            return Err(Error::shape(format!(
                "batch has {} steps, windows need {}",
                batch.len(),
                n_in + n_out
            )));
        }
        let b = batch.size();
        let dz = self.latent_dim();
        let ctx = self.ctx(g);
        let mut enc_hidden = self.encoder.stack.zero_state(g, b);
        let mut tr_hidden = self.zero_transition_hidden(g, b);
        let mut fv = ForwardVars {
            post_mean: Vec::with_capacity(n_in),
            post_logstd: Vec::with_capacity(n_in),
            post_z: Vec::with_capacity(n_in),
            prior_mean: Vec::with_capacity(n_in),
            prior_logstd: Vec::with_capacity(n_in),
            prior_z: Vec::with_capacity(n_in),
            recon: Vec::with_capacity(n_in),
            extrap: Vec::with_capacity(n_out),
        };
        let zero = g.constant(DMatrix::zeros(dz, b));
        for i in 0..n_in {
            let (qm, qls) = self.encoder_step(g, p, &batch.obs[i], &mut enc_hidden, &batch.groups[i])?;
            let zq = self.draw(g, qm, qls, &mut sampling);
            if i == 0 {
                fv.prior_mean.push(zero);
                fv.prior_logstd.push(zero);
                fv.prior_z.push(zq);
            } else {
                let z_prev = fv.post_z[i - 1];
                let (pm, pls) = self.prior_step(
                    g,
                    p,
                    &ctx,
                    z_prev,
                    &batch.controls[i - 1],
                    &mut tr_hidden,
                    &batch.deltas[i],
                    &batch.groups[i],
                )?;
                let zp = self.draw(g, pm, pls, &mut sampling);
                fv.prior_mean.push(pm);
                fv.prior_logstd.push(pls);
                fv.prior_z.push(zp);
            }
            check_finite(g, qm, i, "posterior mean")?;
            fv.post_mean.push(qm);
            fv.post_logstd.push(qls);
            fv.post_z.push(zq);
            let x = self.decoder.forward(g, p, zq);
            fv.recon.push(x);
        }
        let mut z = fv.post_z[n_in - 1];
        for i in n_in..n_in + n_out {
            let (pm, pls) = self.prior_step(
                g,
                p,
                &ctx,
                z,
                &batch.controls[i - 1],
                &mut tr_hidden,
                &batch.deltas[i],
                &batch.groups[i],
            )?;
            check_finite(g, pm, i, "prior mean")?;
            z = self.draw(g, pm, pls, &mut sampling);
            let x = self.decoder.forward(g, p, pm);
            fv.extrap.push(x);
        }
        Ok(fv)
    }

    /// Loss over the interpolation window.
    pub fn loss(&self, g: &mut Graph, fv: &ForwardVars, batch: &Batch, w: &LossWeights) -> LossVars {
        let n = fv.post_mean.len();
        let recon: Vec<Var> = (0..n).map(|i| recon_step(g, fv.recon[i], &batch.obs[i])).collect();
        let kl: Vec<Var> = (0..n)
            .map(|i| kl_step(g, fv.post_mean[i], fv.post_logstd[i], fv.prior_mean[i], fv.prior_logstd[i]))
            .collect();
        let reg: Vec<Var> = (0..n)
            .map(|i| {
                let (a, b) = if w.reg_augmented {
                    (self.spec.augment_graph(g, fv.prior_z[i]), self.spec.augment_graph(g, fv.post_z[i]))
                } else {
                    (fv.prior_z[i], fv.post_z[i])
                };
                reg_step(g, a, b, w.metric)
            })
            .collect();
        let recon = mean_of(g, &recon);
        let kl = mean_of(g, &kl);
        let reg = mean_of(g, &reg);
        let bkl = g.scale(kl, w.beta);
        let lreg = g.scale(reg, w.lambda);
        let total = g.add(recon, bkl);
        let total = g.add(total, lreg);
        LossVars { total, recon, kl, reg }
    }

    /// Posterior over one sequence; `deltas[0]` is the step before the first point.
    pub fn encode_posterior(&self, observations: &[DVector<f64>], deltas: &[f64]) -> Result<GaussianSeq> {
        if observations.len() != deltas.len() {
            return Err(Error::shape(format!(
                "{} observations for {} steps",
                observations.len(),
                deltas.len()
            )));
        }
        if let Some(o) = observations.iter().find(|o| o.len() != self.obs_dim) {
            return Err(Error::shape(format!("observation of length {}, expected {}", o.len(), self.obs_dim)));
        }
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let mut hidden = self.encoder.stack.zero_state(&mut g, 1);
        let mut seq = GaussianSeq { means: vec![], stds: vec![], times: vec![] };
        let mut t = 0.0;
        for (i, (x, &d)) in observations.iter().zip(deltas).enumerate() {
            if !(d > 0.0) {
                return Err(Error::Domain(format!("step size must be positive, got {d}")));
            }
            if i > 0 {
                t += d;
            }
            let xm = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
            let (m, ls) = self.encoder_step(&mut g, &p, &xm, &mut hidden, &DeltaGroups::new(&[d]))?;
            check_finite(&g, m, i, "posterior mean")?;
            seq.means.push(g.value(m).column(0).into_owned());
            seq.stds.push(g.value(ls).column(0).map(f64::exp));
            seq.times.push(t);
        }
        Ok(seq)
    }

    pub fn prior_state(&self) -> PriorState {
        let hidden = match &self.transition {
            Transition::Unit(u) => match &u.learner {
                UnknownDynamicsLearner::Ssm { stack, .. } => vec![DMatrix::zeros(stack.state_size, 1); stack.layers.len()],
                UnknownDynamicsLearner::Constant { .. } => vec![],
            },
            Transition::DataDriven { stack, .. } => vec![DMatrix::zeros(stack.state_size, 1); stack.layers.len()],
        };
        PriorState { hidden }
    }

    /// One prior step for one sequence: returns `(μ_z, σ_z)`.
    pub fn prior_predict(
        &self,
        state: &mut PriorState,
        z_prev: &DVector<f64>,
        u: &DVector<f64>,
        delta: f64,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        if z_prev.len() != self.latent_dim() || u.len() != self.spec.control_dim {
            return Err(Error::shape("prior_predict: latent or control dimension mismatch"));
        }
        if !(delta > 0.0) {
            return Err(Error::Domain(format!("step size must be positive, got {delta}")));
        }
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let ctx = self.ctx(&mut g);
        let z = g.constant(DMatrix::from_column_slice(z_prev.len(), 1, z_prev.as_slice()));
        let um = DMatrix::from_column_slice(u.len(), 1, u.as_slice());
        let mut hidden: Vec<Var> = state.hidden.iter().map(|h| g.constant(h.clone())).collect();
        let (m, ls) = self.prior_step(&mut g, &p, &ctx, z, &um, &mut hidden, &[delta], &DeltaGroups::new(&[delta]))?;
        state.hidden = hidden.iter().map(|&h| g.value(h).clone()).collect();
        Ok((g.value(m).column(0).into_owned(), g.value(ls).column(0).map(f64::exp)))
    }

    /// Decoder means for a latent sequence, computed as one batch.
    pub fn decode(&self, z: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        if z.is_empty() {
            return Ok(vec![]);
        }
        if let Some(v) = z.iter().find(|v| v.len() != self.latent_dim()) {
            return Err(Error::shape(format!("latent of length {}, expected {}", v.len(), self.latent_dim())));
        }
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let zm = g.constant(DMatrix::from_columns(z));
        let out = self.decoder.forward(&mut g, &p, zm);
        Ok(g.value(out).column_iter().map(|c| c.into_owned()).collect())
    }

    /// Evaluation pass on one trajectory with posterior and prior means.
    pub fn forward_full(&self, traj: &IrregularTrajectory, n_in: usize, n_out: usize) -> Result<FullForward> {
        let batch = Batch::new(&[traj], n_in + n_out, self.nominal_dt)?;
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let fv = self.forward(&mut g, &p, &batch, n_in, n_out, Sampling::Mean)?;
        let col = |v: Var| g.value(v).column(0).into_owned();
        let times = traj.times[..n_in].to_vec();
        Ok(FullForward {
            posterior: GaussianSeq {
                means: fv.post_mean.iter().map(|&v| col(v)).collect(),
                stds: fv.post_logstd.iter().map(|&v| col(v).map(f64::exp)).collect(),
                times: times.clone(),
            },
            prior: GaussianSeq {
                means: fv.prior_mean.iter().map(|&v| col(v)).collect(),
                stds: fv.prior_logstd.iter().map(|&v| col(v).map(f64::exp)).collect(),
                times,
            },
            recon: fv.recon.iter().map(|&v| col(v)).collect(),
            extrap: fv.extrap.iter().map(|&v| col(v)).collect(),
        })
    }

    /// Batched evaluation: decoded posterior means over the first `n_in`
    /// steps and decoded prior means over the next `n_out`.
    pub fn predict_batch(&self, batch: &Batch, n_in: usize, n_out: usize) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let fv = self.forward(&mut g, &p, batch, n_in, n_out, Sampling::Mean)?;
        Ok((
            fv.recon.iter().map(|&v| g.value(v).clone()).collect(),
            fv.extrap.iter().map(|&v| g.value(v).clone()).collect(),
        ))
    }

    pub fn save(&self, path: &Path, extra: BTreeMap<String, String>) -> Result<()> {
        let mut meta = extra;
        meta.insert("spec".into(), serde_json::to_string(&self.spec)?);
        meta.insert("model_config".into(), serde_json::to_string(&self.config)?);
        meta.insert("obs_dim".into(), self.obs_dim.to_string());
        meta.insert("nominal_dt".into(), serde_json::to_string(&self.nominal_dt)?);
        meta.insert("encoder_timescale".into(), self.config.timescale.describe());
        self.store.to_archive(meta).save(path)
    }

    /// Rebuilds a model from an archive written by [`PhySsmModel::save`].
    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let archive = TensorArchive::load(path)?;
        let field = |k: &str| {
            archive
                .metadata
                .get(k)
                .ok_or_else(|| Error::format(path.display().to_string(), format!("missing metadata '{k}'")))
        };
        let spec: DynamicsSpec = serde_json::from_str(field("spec")?)?;
        let config: ModelConfig = serde_json::from_str(field("model_config")?)?;
        let obs_dim: usize = field("obs_dim")?
            .parse()
            .map_err(|_| Error::format(path.display().to_string(), "bad obs_dim"))?;
        let dt: f64 = serde_json::from_str(field("nominal_dt")?)?;
        let mut model = PhySsmModel::new(spec, obs_dim, dt, config, 0)?;
        model
            .store
            .load_archive(&archive)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        Ok((model, archive.metadata))
    }
}

fn check_finite(g: &Graph, v: Var, step: usize, what: &str) -> Result<()> {
    if g.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            step,
            what: format!("non-finite {what}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{
        corrupt, generate_dataset, integrate_rk4, pendulum_derivative, ParamSampler, PendulumParams, System,
    };

    fn pendulum_model(seed: u64) -> PhySsmModel {
        PhySsmModel::new(DynamicsSpec::pendulum(), 3, 0.05, ModelConfig::default(), seed).unwrap()
    }

    fn pendulum_trajs(n: usize, horizon: usize) -> Vec<IrregularTrajectory> {
        let set = generate_dataset(System::Pendulum, n, horizon, 0.05, &ParamSampler::default_for(System::Pendulum), 5)
            .unwrap();
        corrupt(&set, 0.3, 0.2, 6).unwrap()
    }

    fn obs_and_deltas(t: &IrregularTrajectory, dt: f64) -> (Vec<DVector<f64>>, Vec<f64>) {
        let obs = t.observations.column_iter().map(|c| c.into_owned()).collect();
        let deltas = (0..t.len()).map(|i| if i == 0 { dt } else { t.times[i] - t.times[i - 1] }).collect();
        (obs, deltas)
    }

    #[test]
    fn posterior_is_causal() {
        let model = pendulum_model(1);
        let t = &pendulum_trajs(1, 30)[0];
        let (mut obs, deltas) = obs_and_deltas(t, 0.05);
        let base = model.encode_posterior(&obs, &deltas).unwrap();
        obs[5][1] += 3.0;
        let perturbed = model.encode_posterior(&obs, &deltas).unwrap();
        for i in 0..5 {
            assert_eq!(base.means[i], perturbed.means[i]);
            assert_eq!(base.stds[i], perturbed.stds[i]);
        }
        assert_ne!(base.means[5], perturbed.means[5]);
    }

    #[test]
    fn posterior_is_positive_and_deterministic() {
        let model = pendulum_model(2);
        let t = &pendulum_trajs(1, 30)[0];
        let (obs, deltas) = obs_and_deltas(t, 0.05);
        let a = model.encode_posterior(&obs, &deltas).unwrap();
        assert!(a.stds.iter().flatten().all(|&s| s > 0.0));
        assert_eq!(a, model.encode_posterior(&obs, &deltas).unwrap());
        assert!(model.encode_posterior(&obs[1..], &deltas).is_err());
    }

    #[test]
    fn reparameterize_examples() {
        let g = GaussianSeq {
            means: vec![DVector::from_vec(vec![1.0, -2.0]); 3],
            stds: vec![DVector::zeros(2); 3],
            times: vec![0.0, 1.0, 2.0],
        };
        assert_eq!(reparameterize(&g, 4), g.means);
        let n = 100_000;
        let g = GaussianSeq {
            means: vec![DVector::from_vec(vec![0.7]); n],
            stds: vec![DVector::from_vec(vec![1.5]); n],
            times: vec![0.0; n],
        };
        let s = reparameterize(&g, 9);
        let mean = s.iter().map(|v| v[0]).sum::<f64>() / n as f64;
        assert!((mean - 0.7).abs() < 3.0 * 1.5 / (n as f64).sqrt());
        assert_eq!(s, reparameterize(&g, 9));
    }

    #[test]
    fn reparameterized_gradient_passes_through_mean() {
        // f = Σ (μ + σ ε)²; ∂f/∂μ = 2(μ + σ ε).
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = DMatrix::from_fn(3, 2, |_, _| StandardNormal.sample(&mut rng));
        let mu0 = DMatrix::from_row_slice(3, 2, &[0.1, -0.4, 1.2, 0.0, 0.3, -0.9]);
        let ls = DMatrix::from_element(3, 2, -0.5);
        let f = |mu: &DMatrix<f64>| -> (f64, DMatrix<f64>) {
            let mut g = Graph::new();
            let m = g.param(mu.clone());
            let l = g.constant(ls.clone());
            let e = g.constant(eps.clone());
            let s = g.exp(l);
            let n = g.mul(s, e);
            let z = g.add(m, n);
            let z2 = g.square(z);
            let out = g.sum_all(z2);
            let grads = g.backward(out);
            (g.scalar(out), grads.get(m).unwrap().clone())
        };
        let (_, grad) = f(&mu0);
        let h = 1e-5;
        for k in 0..mu0.len() {
            let mut up = mu0.clone();
            up[k] += h;
            let mut dn = mu0.clone();
            dn[k] -= h;
            let fd = (f(&up).0 - f(&dn).0) / (2.0 * h);
            assert!((fd - grad[k]).abs() / grad[k].abs().max(1e-8) < 1e-4);
        }
    }

    #[test]
    fn prior_tracks_true_pendulum() {
        let params = PendulumParams::default();
        let spec = DynamicsSpec::pendulum_with_truth(&params);
        let mut model = PhySsmModel::new(spec, 3, 0.01, ModelConfig::default(), 0).unwrap();
        // Freeze the learner at zero output and make σ tiny.
        if let Transition::Unit(u) = &model.transition {
            if let UnknownDynamicsLearner::Ssm { head_a, head_b, .. } = &u.learner {
                let ids = [head_a.w, head_a.b, head_b.as_ref().unwrap().w, head_b.as_ref().unwrap().b];
                for id in ids {
                    model.store.get_mut(id).fill(0.0);
                }
            }
        }
        model.store.get_mut(model.prior_head.b).rows_mut(2, 2).fill(-6.0);
        let mut state = model.prior_state();
        let mut z = DVector::from_vec(vec![0.6, 0.2]);
        let dt = 0.01;
        let zero = DVector::zeros(1);
        for k in 0..20 {
            let (m, s) = model.prior_predict(&mut state, &z, &zero, dt).unwrap();
            assert!(s.iter().all(|&v| v > 0.0 && v < 0.01));
            let truth = integrate_rk4(
                |x, _, t| pendulum_derivative(&params, x, t),
                &z,
                &[k as f64 * dt, (k + 1) as f64 * dt],
                &[zero.clone(), zero.clone()],
                dt / 10.0,
            )
            .unwrap();
            assert!((&m - &truth[1]).amax() < dt * dt, "step {k}");
            z = m;
        }
    }

    #[test]
    fn fixed_prior_mean_is_the_unit_base_state() {
        let params = PendulumParams::default();
        let spec = DynamicsSpec::pendulum_with_truth(&params);
        let config = ModelConfig {
            learn_prior_mean: false,
            ..ModelConfig::default()
        };
        let model = PhySsmModel::new(spec.clone(), 3, 0.05, config, 3).unwrap();
        assert_eq!(model.store.get(model.prior_head.w).nrows(), 2);
        let z = DVector::from_vec(vec![0.4, -0.3]);
        let u = DVector::from_vec(vec![0.5]);
        let (m, s) = model.prior_predict(&mut model.prior_state(), &z, &u, 0.05).unwrap();
        let Transition::Unit(unit) = &model.transition else { panic!("unit prior expected") };
        let state = unit.init_state(&z);
        let (a, b) = unit.learn_unknown(&model.store, &mut state.clone(), &u, 0.05).unwrap();
        let a = crate::unit::apply_knowledge_mask(&a, &spec.mask_a).unwrap();
        let b = crate::unit::apply_knowledge_mask(&b.unwrap(), &spec.mask_b).unwrap();
        let next = crate::unit::compose_and_step(&spec, &state, &a, Some(&b), &u, 0.05).unwrap();
        assert!((&m - next.zbar.rows(0, 2)).amax() < 1e-12);
        assert!(s.iter().all(|&v| (v - (-2.0f64).exp()).abs() < 1e-12));
    }

    #[test]
    fn prior_predict_is_deterministic_and_positive() {
        let model = pendulum_model(3);
        let z = DVector::from_vec(vec![0.2, -0.1]);
        let u = DVector::from_vec(vec![0.5]);
        let mut s1 = model.prior_state();
        let mut s2 = model.prior_state();
        let a = model.prior_predict(&mut s1, &z, &u, 0.05).unwrap();
        let b = model.prior_predict(&mut s2, &z, &u, 0.05).unwrap();
        assert_eq!(a, b);
        assert!(a.1.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn decode_is_batch_transparent() {
        let model = pendulum_model(4);
        let zs = vec![DVector::zeros(2), DVector::from_vec(vec![1.0, -3.0]), DVector::from_vec(vec![0.3, 0.3])];
        let batched = model.decode(&zs).unwrap();
        assert!(batched[0].iter().all(|v| v.is_finite()));
        for (z, b) in zs.iter().zip(&batched) {
            let single = model.decode(std::slice::from_ref(z)).unwrap();
            assert!((&single[0] - b).amax() < 1e-14);
        }
    }

    #[test]
    fn window_lengths() {
        let model = pendulum_model(5);
        let t = &pendulum_trajs(1, 300)[0];
        assert_eq!(t.len(), 240);
        let out = model.forward_full(t, 160, 80).unwrap();
        assert_eq!(out.recon.len(), 160);
        assert_eq!(out.extrap.len(), 80);
        assert_eq!(out.posterior.len(), out.prior.len());
        assert_eq!(out.posterior.times, out.prior.times);
        let out = model.forward_full(t, 160, 0).unwrap();
        assert!(out.extrap.is_empty());
        assert!(model.forward_full(t, 200, 80).is_err());
    }

    #[test]
    fn batched_forward_matches_single() {
        let model = pendulum_model(6);
        let trajs = pendulum_trajs(3, 60);
        let refs: Vec<&IrregularTrajectory> = trajs.iter().collect();
        let batch = Batch::new(&refs, 40, 0.05).unwrap();
        let (recon, extrap) = model.predict_batch(&batch, 30, 10).unwrap();
        for (j, t) in trajs.iter().enumerate() {
            let single = model.forward_full(t, 30, 10).unwrap();
            assert!((recon[7].column(j) - &single.recon[7]).amax() < 1e-12);
            assert!((extrap[9].column(j) - &single.extrap[9]).amax() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let model = pendulum_model(7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path, BTreeMap::new()).unwrap();
        let (back, meta) = PhySsmModel::load(&path).unwrap();
        assert_eq!(meta["encoder_timescale"], "raw_gap");
        let t = &pendulum_trajs(1, 40)[0];
        assert_eq!(model.forward_full(t, 20, 5).unwrap(), back.forward_full(t, 20, 5).unwrap());
    }
}
