//! The Phy-SSM unit: a learner for the unknown part of the state matrix,
//! the knowledge mask, composition with the known matrix, and the
//! discretized update of the augmented latent state.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dynamics::DynamicsSpec;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{uniform_matrix, Bound, ParamId, ParamStore};
use crate::ssm::{discretize_bilinear, DeltaGroups, SsmStack, Timescale};

/// Sizes of the SSM learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub width: usize,
    pub state_size: usize,
    pub layers: usize,
    /// Scale of the uniform initialization of the output projection.
    pub head_init: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            width: 16,
            state_size: 16,
            layers: 2,
            head_init: 0.01,
        }
    }
}

/// Produces the raw unknown matrices, flattened row-major with one column
/// per batch item.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum UnknownDynamicsLearner {
    /// SSM stack on `(z̄, u)` followed by one fully connected layer per matrix.
    Ssm {
        stack: SsmStack,
        head_a: Linear,
        head_b: Option<Linear>,
    },
    /// Time-invariant matrices, used for identifiability experiments.
    Constant { a: ParamId, b: Option<ParamId> },
}

impl UnknownDynamicsLearner {
    pub fn ssm(
        store: &mut ParamStore,
        prefix: &str,
        spec: &DynamicsSpec,
        cfg: &LearnerConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = spec.augmented_dim;
        let m = spec.control_dim;
        let stack = SsmStack::new(
            store,
            &format!("{prefix}/stack"),
            d + m,
            cfg.width,
            cfg.state_size,
            cfg.layers,
            Timescale::RawGap,
            rng,
        );
        let head = |store: &mut ParamStore, name: &str, rows: usize, rng: &mut ChaCha8Rng| {
            let w = uniform_matrix(rng, rows, cfg.width, cfg.head_init);
            Linear::with_weight(store, &format!("{prefix}/{name}"), w)
        };
        let head_a = head(store, "head_a", d * d, rng);
        let head_b = (m > 0).then(|| head(store, "head_b", d * m, rng));
        UnknownDynamicsLearner::Ssm { stack, head_a, head_b }
    }

    /// Constant learner initialized to the given matrices.
    pub fn constant(store: &mut ParamStore, prefix: &str, a: &DMatrix<f64>, b: Option<&DMatrix<f64>>) -> Self {
        let a = store.add(format!("{prefix}/A"), crate::dynamics::flatten_row_major(a));
        let b = b.map(|b| store.add(format!("{prefix}/B"), crate::dynamics::flatten_row_major(b)));
        UnknownDynamicsLearner::Constant { a, b }
    }

    pub fn zero_hidden(&self, g: &mut Graph, batch: usize) -> Vec<Var> {
        match self {
            UnknownDynamicsLearner::Ssm { stack, .. } => stack.zero_state(g, batch),
            UnknownDynamicsLearner::Constant { .. } => Vec::new(),
        }
    }

    /// Advances the learner one step on `(z̄, u)` and returns the raw
    /// unknown matrices before masking.
    pub fn learn_unknown(
        &self,
        g: &mut Graph,
        p: &Bound,
        zbar: Var,
        u: Var,
        hidden: &mut [Var],
        deltas: &DeltaGroups,
    ) -> Result<(Var, Option<Var>)> {
        let batch = g.value(zbar).ncols();
        match self {
            UnknownDynamicsLearner::Ssm { stack, head_a, head_b } => {
                let x = if g.value(u).nrows() > 0 {
                    g.concat_rows(&[zbar, u])
                } else {
                    zbar
                };
                let y = stack.step(g, p, x, hidden, deltas)?;
                let a = head_a.forward(g, p, y);
                let b = head_b.as_ref().map(|h| h.forward(g, p, y));
                Ok((a, b))
            }
            UnknownDynamicsLearner::Constant { a, b } => {
                let broadcast = |g: &mut Graph, id: ParamId| {
                    let rows = g.value(p.var(id)).nrows();
                    let zero = g.constant(DMatrix::zeros(rows, batch));
                    g.add_col(zero, p.var(id))
                };
                let av = broadcast(g, *a);
                let bv = b.map(|b| broadcast(g, b));
                Ok((av, bv))
            }
        }
    }
}

/// `raw ⊙ mask`.
pub fn apply_knowledge_mask(raw: &DMatrix<f64>, mask: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if raw.shape() != mask.shape() {
        return Err(Error::shape(format!(
            "mask is {:?} but matrix is {:?}",
            mask.shape(),
            raw.shape()
        )));
    }
    Ok(raw.component_mul(mask))
}

/// Latent state of one sequence inside the unit.
#[derive(Debug, Clone, PartialEq)]
pub struct PhySsmState {
    pub zbar: DVector<f64>,
    pub learner_hidden: Vec<DMatrix<f64>>,
    pub t: f64,
}

/// `A = A_knw(z̄) + F(z̄) ⊙ A_unk`, `B = B_knw + B_unk`, one bilinear step.
/// The known matrix is evaluated at the pre-step state.
pub fn compose_and_step(
    spec: &DynamicsSpec,
    state: &PhySsmState,
    a_unk: &DMatrix<f64>,
    b_unk: Option<&DMatrix<f64>>,
    u: &DVector<f64>,
    delta: f64,
) -> Result<PhySsmState> {
    let d = spec.augmented_dim;
    if state.zbar.len() != d || a_unk.shape() != (d, d) || u.len() != spec.control_dim {
        return Err(Error::shape(format!(
            "compose_and_step: state {}, A_unk {:?}, control {} for a {}-dim spec with {} controls",
            state.zbar.len(),
            a_unk.shape(),
            u.len(),
            d,
            spec.control_dim
        )));
    }
    if !(delta > 0.0) {
        return Err(Error::Domain(format!("step size must be positive, got {delta}")));
    }
    let a = spec.compose(&state.zbar, state.t, a_unk);
    let b = match b_unk {
        Some(b) => &spec.known_b + b,
        None => spec.known_b.clone(),
    };
    let (abar, bbar) = discretize_bilinear(&a, &b, delta)?;
    let zbar = &abar * &state.zbar + bbar * u;
    Ok(PhySsmState {
        zbar,
        learner_hidden: state.learner_hidden.clone(),
        t: state.t + delta,
    })
}

/// Spec-derived constants placed on a tape once per forward pass.
#[derive(Debug, Clone, Copy)]
pub struct UnitConstants {
    known_e: Option<Var>,
    known_c: Var,
    factor: Option<(Var, Var)>,
    mask_a: Var,
    mask_b: Var,
    known_b: Var,
}

/// Knowledge spec plus learner.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhySsmUnit {
    pub spec: DynamicsSpec,
    pub learner: UnknownDynamicsLearner,
}

impl PhySsmUnit {
    pub fn new(spec: DynamicsSpec, learner: UnknownDynamicsLearner) -> Self {
        Self { spec, learner }
    }

    pub fn constants(&self, g: &mut Graph) -> UnitConstants {
        let (e, c) = self.spec.known_operator();
        let known_e = (e.iter().any(|&v| v != 0.0)).then(|| g.constant(e));
        let known_c = g.constant(c);
        let factor = self.spec.has_factors().then(|| {
            let (e, c) = self.spec.factor_operator();
            (g.constant(e), g.constant(c))
        });
        UnitConstants {
            known_e,
            known_c,
            factor,
            mask_a: g.constant(self.spec.mask_a_flat()),
            mask_b: g.constant(self.spec.mask_b_flat()),
            known_b: g.constant(self.spec.known_b_flat()),
        }
    }

    /// Composed continuous-time matrices (row-major flattened) for a batch.
    pub fn composed(
        &self,
        g: &mut Graph,
        c: &UnitConstants,
        zbar: Var,
        raw_a: Var,
        raw_b: Option<Var>,
    ) -> (Var, Option<Var>) {
        let batch = g.value(zbar).ncols();
        let masked = g.mul_col(raw_a, c.mask_a);
        let known = match c.known_e {
            Some(e) => {
                let k = g.matmul(e, zbar);
                g.add_col(k, c.known_c)
            }
            None => {
                let rows = g.value(c.known_c).nrows();
                let zero = g.constant(DMatrix::zeros(rows, batch));
                g.add_col(zero, c.known_c)
            }
        };
        let unknown = match c.factor {
            Some((fe, fc)) => {
                let f = g.matmul(fe, zbar);
                let f = g.add_col(f, fc);
                g.mul(f, masked)
            }
            None => masked,
        };
        let a = g.add(known, unknown);
        let b = (self.spec.control_dim > 0).then(|| match raw_b {
            Some(rb) => {
                let mb = g.mul_col(rb, c.mask_b);
                g.add_col(mb, c.known_b)
            }
            None => {
                let zero = g.constant(DMatrix::zeros(self.spec.augmented_dim * self.spec.control_dim, batch));
                g.add_col(zero, c.known_b)
            }
        });
        (a, b)
    }

    /// One batched step of the unit: learn, mask, compose, discretize, advance.
    pub fn step(
        &self,
        g: &mut Graph,
        p: &Bound,
        c: &UnitConstants,
        zbar: Var,
        u: Var,
        hidden: &mut [Var],
        deltas: &[f64],
        groups: &DeltaGroups,
    ) -> Result<Var> {
        let (raw_a, raw_b) = self.learner.learn_unknown(g, p, zbar, u, hidden, groups)?;
        let (a, b) = self.composed(g, c, zbar, raw_a, raw_b);
        g.state_step(a, b, zbar, u, deltas)
    }

    /// Fresh state for one sequence: `z̄ = augment(z)`, zero learner memory.
    pub fn init_state(&self, z: &DVector<f64>) -> PhySsmState {
        let hidden = match &self.learner {
            UnknownDynamicsLearner::Ssm { stack, .. } => {
                vec![DMatrix::zeros(stack.state_size, 1); stack.layers.len()]
            }
            UnknownDynamicsLearner::Constant { .. } => Vec::new(),
        };
        PhySsmState {
            zbar: self.spec.augment(z),
            learner_hidden: hidden,
            t: 0.0,
        }
    }

    /// Single-sequence learner step; updates the hidden state in place.
    pub fn learn_unknown(
        &self,
        store: &ParamStore,
        state: &mut PhySsmState,
        u: &DVector<f64>,
        delta: f64,
    ) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
        let d = self.spec.augmented_dim;
        let m = self.spec.control_dim;
        if state.zbar.len() != d || u.len() != m {
            return Err(Error::shape(format!(
                "learn_unknown: state {} and control {}, expected {d} and {m}",
                state.zbar.len(),
                u.len()
            )));
        }
        if !(delta > 0.0) {
            return Err(Error::Domain(format!("step size must be positive, got {delta}")));
        }
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let zv = g.constant(DMatrix::from_column_slice(d, 1, state.zbar.as_slice()));
        let uv = g.constant(DMatrix::from_column_slice(m, 1, u.as_slice()));
        let mut hidden: Vec<Var> = state.learner_hidden.iter().map(|h| g.constant(h.clone())).collect();
        let (a, b) = self.learner.learn_unknown(&mut g, &p, zv, uv, &mut hidden, &DeltaGroups::new(&[delta]))?;
        state.learner_hidden = hidden.iter().map(|&h| g.value(h).clone()).collect();
        let a = crate::autodiff::column_as_matrix(g.value(a), 0, d, d);
        let b = b.map(|b| crate::autodiff::column_as_matrix(g.value(b), 0, d, m));
        Ok((a, b))
    }

    /// Autoregressive rollout from `z̄_init`; returns the states after each step.
    pub fn rollout(
        &self,
        store: &ParamStore,
        zbar_init: &DVector<f64>,
        controls: &[DVector<f64>],
        deltas: &[f64],
    ) -> Result<Vec<DVector<f64>>> {
        if controls.len() != deltas.len() {
            return Err(Error::shape(format!(
                "rollout: {} controls for {} steps",
                controls.len(),
                deltas.len()
            )));
        }
        let mut state = self.init_state(&zbar_init.rows(0, self.spec.state_dim).into_owned());
        state.zbar = zbar_init.clone();
        let mut out = Vec::with_capacity(deltas.len());
        for (step, (u, &delta)) in controls.iter().zip(deltas).enumerate() {
            let wrap = |e| Error::Rollout {
                step,
                source: Box::new(e),
            };
            let (a, b) = self.learn_unknown(store, &mut state, u, delta).map_err(wrap)?;
            let a = apply_knowledge_mask(&a, &self.spec.mask_a).map_err(wrap)?;
            let b = match b {
                Some(b) => Some(apply_knowledge_mask(&b, &self.spec.mask_b).map_err(wrap)?),
                None => None,
            };
            state = compose_and_step(&self.spec, &state, &a, b.as_ref(), u, delta).map_err(wrap)?;
            if state.zbar.iter().any(|v| !v.is_finite()) {
                return Err(wrap(Error::Numeric {
                    step,
                    what: "non-finite latent state".into(),
                }));
            }
            out.push(state.zbar.clone());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{integrate_rk4, pendulum_derivative, PendulumParams};
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn pendulum_unit(store: &mut ParamStore) -> PhySsmUnit {
        let spec = DynamicsSpec::pendulum();
        let learner = UnknownDynamicsLearner::ssm(store, "unit", &spec, &LearnerConfig::default(), &mut rng());
        PhySsmUnit::new(spec, learner)
    }

    #[test]
    fn learner_outputs_have_spec_shape() {
        let mut store = ParamStore::new();
        let unit = pendulum_unit(&mut store);
        let mut state = unit.init_state(&DVector::zeros(2));
        let (a, b) = unit.learn_unknown(&store, &mut state, &DVector::zeros(1), 0.05).unwrap();
        assert_eq!(a.shape(), (4, 4));
        assert_eq!(b.as_ref().unwrap().shape(), (4, 1));
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn learner_is_deterministic() {
        let mut store = ParamStore::new();
        let unit = pendulum_unit(&mut store);
        let mut s1 = unit.init_state(&DVector::from_vec(vec![0.4, -0.2]));
        let mut s2 = s1.clone();
        let u = DVector::from_vec(vec![1.5]);
        let r1 = unit.learn_unknown(&store, &mut s1, &u, 0.05).unwrap();
        let r2 = unit.learn_unknown(&store, &mut s2, &u, 0.05).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn mask_examples() {
        let raw = DMatrix::from_fn(4, 4, |r, c| (r * 4 + c) as f64 + 1.0);
        assert_eq!(apply_knowledge_mask(&raw, &DMatrix::zeros(4, 4)).unwrap(), DMatrix::zeros(4, 4));
        assert_eq!(apply_knowledge_mask(&raw, &DMatrix::from_element(4, 4, 1.0)).unwrap(), raw);
        let masked = apply_knowledge_mask(&raw, &DynamicsSpec::pendulum().mask_a).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(masked[(r, c)] != 0.0, r == 1);
            }
        }
        assert!(apply_knowledge_mask(&raw, &DMatrix::zeros(3, 4)).is_err());
    }

    proptest::proptest! {
        #[test]
        fn mask_is_idempotent(vals in proptest::collection::vec(-10.0..10.0f64, 16),
                              bits in proptest::collection::vec(0..2u8, 16)) {
            let x = DMatrix::from_vec(4, 4, vals);
            let m = DMatrix::from_iterator(4, 4, bits.iter().map(|&b| b as f64));
            let once = apply_knowledge_mask(&x, &m).unwrap();
            proptest::prop_assert_eq!(apply_knowledge_mask(&once, &m).unwrap(), once);
        }
    }

    #[test]
    fn true_pendulum_step_matches_rk4() {
        let p = PendulumParams { control_amplitude: 0.0, ..Default::default() };
        let spec = DynamicsSpec::pendulum_with_truth(&p);
        let z0 = DVector::from_vec(vec![0.8, -0.3]);
        let state = PhySsmState { zbar: spec.augment(&z0), learner_hidden: vec![], t: 0.0 };
        let dt = 0.01;
        let next = compose_and_step(&spec, &state, &DMatrix::zeros(4, 4), None, &DVector::zeros(1), dt).unwrap();
        let truth = integrate_rk4(|z, _, t| pendulum_derivative(&p, z, t), &z0, &[0.0, dt], &vec![DVector::zeros(1); 2], dt / 10.0)
            .unwrap();
        let err = (next.zbar.rows(0, 2) - &truth[1]).amax();
        // Local error of a one-step linearization is O(Δ²·|ż̈|); well under Δ² here.
        assert!(err < dt * dt, "err {err}");
        assert_eq!(next.t, dt);
    }

    #[test]
    fn origin_is_a_fixed_point() {
        let spec = DynamicsSpec::linear4();
        let state = PhySsmState { zbar: DVector::zeros(4), learner_hidden: vec![], t: 0.0 };
        let a = DMatrix::from_fn(4, 4, |r, c| (r as f64 - c as f64) * 0.3);
        let a = apply_knowledge_mask(&a, &spec.mask_a).unwrap();
        let next = compose_and_step(&spec, &state, &a, None, &DVector::zeros(0), 0.1).unwrap();
        assert_eq!(next.zbar, DVector::zeros(4));
    }

    #[test]
    fn sir_step_conserves_population() {
        let spec = DynamicsSpec::sir();
        // Masked entries chosen so each column of the composed matrix sums to zero:
        // A(0,0)·(−I) + A(1,0)·(+I) = 0 needs A(0,0) = A(1,0) = β;
        // column 1: A(1,1) = −γ, A(2,1) = γ.
        let (beta, gamma) = (0.4, 0.1);
        let mut a = DMatrix::zeros(3, 3);
        a[(0, 0)] = beta;
        a[(1, 0)] = beta;
        a[(1, 1)] = -gamma;
        a[(2, 1)] = gamma;
        let mut state = PhySsmState {
            zbar: DVector::from_vec(vec![0.9, 0.1, 0.0]),
            learner_hidden: vec![],
            t: 0.0,
        };
        for _ in 0..50 {
            state = compose_and_step(&spec, &state, &a, None, &DVector::zeros(0), 0.5).unwrap();
            assert!((state.zbar.sum() - 1.0).abs() < 1e-12);
        }
        assert!(state.zbar[2] > 0.0);
    }

    #[test]
    fn wrong_shapes_are_rejected() {
        let spec = DynamicsSpec::pendulum();
        let state = PhySsmState { zbar: DVector::zeros(4), learner_hidden: vec![], t: 0.0 };
        assert!(compose_and_step(&spec, &state, &DMatrix::zeros(3, 3), None, &DVector::zeros(1), 0.1).is_err());
        assert!(compose_and_step(&spec, &state, &DMatrix::zeros(4, 4), None, &DVector::zeros(1), 0.0).is_err());
    }

    #[test]
    fn empty_rollout() {
        let mut store = ParamStore::new();
        let unit = pendulum_unit(&mut store);
        assert!(unit.rollout(&store, &DVector::zeros(4), &[], &[]).unwrap().is_empty());
        assert!(unit.rollout(&store, &DVector::zeros(4), &[DVector::zeros(1)], &[]).is_err());
    }

    #[test]
    fn rollout_of_two_equals_manual_steps() {
        let mut store = ParamStore::new();
        let unit = pendulum_unit(&mut store);
        let z0 = unit.spec.augment(&DVector::from_vec(vec![0.5, 0.1]));
        let controls = vec![DVector::from_vec(vec![1.0]), DVector::from_vec(vec![-2.0])];
        let deltas = [0.05, 0.1];
        let out = unit.rollout(&store, &z0, &controls, &deltas).unwrap();
        let mut state = unit.init_state(&DVector::from_vec(vec![0.5, 0.1]));
        for k in 0..2 {
            let (a, b) = unit.learn_unknown(&store, &mut state, &controls[k], deltas[k]).unwrap();
            let a = apply_knowledge_mask(&a, &unit.spec.mask_a).unwrap();
            let b = apply_knowledge_mask(&b.unwrap(), &unit.spec.mask_b).unwrap();
            state = compose_and_step(&unit.spec, &state, &a, Some(&b), &controls[k], deltas[k]).unwrap();
            assert_eq!(state.zbar, out[k]);
        }
    }

    #[test]
    fn constant_learner_rollout_is_matrix_power() {
        let spec = DynamicsSpec::linear4();
        let truth = DynamicsSpec::linear4_truth();
        let mut store = ParamStore::new();
        let learner = UnknownDynamicsLearner::constant(&mut store, "c", &truth, None);
        let unit = PhySsmUnit::new(spec.clone(), learner);
        let z0 = DVector::from_vec(vec![1.0, 0.0, -0.5, 0.2]);
        let n = 6;
        let out = unit.rollout(&store, &z0, &vec![DVector::zeros(0); n], &vec![0.1; n]).unwrap();
        let a = spec.compose(&z0, 0.0, &apply_knowledge_mask(&truth, &spec.mask_a).unwrap());
        let (abar, _) = discretize_bilinear(&a, &DMatrix::zeros(4, 0), 0.1).unwrap();
        let mut z = z0.clone();
        for k in 0..n {
            z = &abar * z;
            assert!((&z - &out[k]).amax() < 1e-12);
        }
    }

    #[test]
    fn tape_step_matches_plain_step() {
        let mut store = ParamStore::new();
        let unit = pendulum_unit(&mut store);
        let z = DVector::from_vec(vec![0.3, 0.7]);
        let u = DVector::from_vec(vec![2.0]);
        let state = unit.init_state(&z);
        let (a, b) = unit.learn_unknown(&store, &mut state.clone(), &u, 0.05).unwrap();
        let a = apply_knowledge_mask(&a, &unit.spec.mask_a).unwrap();
        let b = apply_knowledge_mask(&b.unwrap(), &unit.spec.mask_b).unwrap();
        let plain = compose_and_step(&unit.spec, &state, &a, Some(&b), &u, 0.05).unwrap();

        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let c = unit.constants(&mut g);
        let zv = g.constant(DMatrix::from_column_slice(4, 1, state.zbar.as_slice()));
        let uv = g.constant(DMatrix::from_column_slice(1, 1, u.as_slice()));
        let mut hidden = unit.learner.zero_hidden(&mut g, 1);
        let out = unit.step(&mut g, &p, &c, zv, uv, &mut hidden, &[0.05], &DeltaGroups::new(&[0.05])).unwrap();
        assert!((g.value(out).column(0) - &plain.zbar).amax() < 1e-12);
    }

    #[test]
    fn learner_parameters_never_reach_known_entries() {
        let mut store = ParamStore::new();
        let unit = pendulum_unit(&mut store);
        let zbar = unit.spec.augment(&DVector::from_vec(vec![0.9, -1.1]));
        let composed = |store: &ParamStore| {
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let c = unit.constants(&mut g);
            let zv = g.constant(DMatrix::from_column_slice(4, 1, zbar.as_slice()));
            let uv = g.constant(DMatrix::from_element(1, 1, 0.5));
            let mut hidden = unit.learner.zero_hidden(&mut g, 1);
            let (ra, rb) = unit.learner.learn_unknown(&mut g, &p, zv, uv, &mut hidden, &DeltaGroups::new(&[0.05])).unwrap();
            let (a, _) = unit.composed(&mut g, &c, zv, ra, rb);
            crate::autodiff::column_as_matrix(g.value(a), 0, 4, 4)
        };
        let before = composed(&store);
        let mut r = rng();
        for v in store.values_mut() {
            *v += uniform_matrix(&mut r, v.nrows(), v.ncols(), 0.5);
        }
        let after = composed(&store);
        for i in 0..4 {
            for j in 0..4 {
                if unit.spec.mask_a[(i, j)] == 0.0 {
                    assert_eq!(before[(i, j)], after[(i, j)]);
                } else {
                    assert_ne!(before[(i, j)], after[(i, j)]);
                }
            }
        }
    }
}
