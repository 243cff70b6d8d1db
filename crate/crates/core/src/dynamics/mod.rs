//! Synthetic dynamical systems, their ground-truth integrator, partial
//! knowledge specifications, and the noise/irregularity pipeline.

mod dataset;
mod spec;

use std::f64::consts::PI;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{
    build_dataset, corrupt, generate_dataset, Dataset, DatasetConfig, IrregularTrajectory,
    Manifest, Normalization, ParamSampler, PendulumSampler, SirSampler, Split, SplitSeeds,
    SystemParams, Trajectory, TrajectorySet, DATASET_FORMAT_VERSION,
};
pub use spec::{Affine, DynamicsSpec, Feature};
pub(crate) use spec::flatten_row_major;

/// Controlled damped pendulum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    pub mass: f64,
    pub gravity: f64,
    pub damping: f64,
    pub length: f64,
    pub control_amplitude: f64,
    /// Hz.
    pub control_frequency: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            gravity: 10.0,
            damping: 0.7,
            length: 1.0,
            control_amplitude: 0.0,
            control_frequency: 0.2,
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.mass > 0.0
            && self.gravity > 0.0
            && self.length > 0.0
            && self.damping >= 0.0
            && [self.control_amplitude, self.control_frequency]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid pendulum parameters {self:?}")))
        }
    }

    /// The applied control signal `A·cos(2π α t)`.
    pub fn control(&self, t: f64) -> f64 {
        self.control_amplitude * (2.0 * PI * self.control_frequency * t).cos()
    }

    /// `½ m l² ω² + m g l (1 − cos θ)`.
    pub fn energy(&self, state: &DVector<f64>) -> f64 {
        let (theta, omega) = (state[0], state[1]);
        0.5 * self.mass * self.length.powi(2) * omega.powi(2)
            + self.mass * self.gravity * self.length * (1.0 - theta.cos())
    }
}

/// `(θ̇, ω̇)` for the controlled damped pendulum.
pub fn pendulum_derivative(params: &PendulumParams, state: &DVector<f64>, t: f64) -> DVector<f64> {
    let (theta, omega) = (state[0], state[1]);
    let p = params;
    let domega = -(p.gravity / p.length) * theta.sin() - (p.damping / p.mass) * omega
        + p.control(t) / (p.mass * p.length * p.length);
    DVector::from_vec(vec![omega, domega])
}

/// Piecewise-linear profile over time; constant beyond the end knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateProfile {
    pub knots: Vec<(f64, f64)>,
}

impl RateProfile {
    pub fn at(&self, t: f64) -> f64 {
        let k = &self.knots;
        if t <= k[0].0 {
            return k[0].1;
        }
        for w in k.windows(2) {
            let ((t0, v0), (t1, v1)) = (w[0], w[1]);
            if t <= t1 {
                return v0 + (v1 - v0) * (t - t0) / (t1 - t0);
            }
        }
        k[k.len() - 1].1
    }
}

/// SIR epidemic parameters. Profiles, when present, replace the constant rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SirParams {
    pub contact_rate: f64,
    pub removal_rate: f64,
    pub population: f64,
    pub contact_profile: Option<RateProfile>,
    pub removal_profile: Option<RateProfile>,
}

impl SirParams {
    pub fn constant(contact_rate: f64, removal_rate: f64, population: f64) -> Self {
        Self {
            contact_rate,
            removal_rate,
            population,
            contact_profile: None,
            removal_profile: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.contact_rate >= 0.0 && self.removal_rate >= 0.0 && self.population > 0.0 {
            Ok(())
        } else {
            Err(Error::config(format!("invalid SIR parameters {self:?}")))
        }
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.contact_profile.as_ref().map_or(self.contact_rate, |p| p.at(t))
    }

    pub fn gamma(&self, t: f64) -> f64 {
        self.removal_profile.as_ref().map_or(self.removal_rate, |p| p.at(t))
    }
}

/// `(Ṡ, İ, Ṙ) = (−βSI/N, βSI/N − γI, γI)`.
pub fn sir_derivative(params: &SirParams, state: &DVector<f64>, t: f64) -> DVector<f64> {
    let (s, i) = (state[0], state[1]);
    let infection = params.beta(t) * s * i / params.population;
    let removal = params.gamma(t) * i;
    DVector::from_vec(vec![-infection, infection - removal, removal])
}

/// Classical RK4 with at most `max_step` per substep; `controls[i]` is held
/// over `[times[i], times[i+1])`.
pub fn integrate_rk4<F>(
    derivative: F,
    z0: &DVector<f64>,
    times: &[f64],
    controls: &[DVector<f64>],
    max_step: f64,
) -> Result<Vec<DVector<f64>>>
where
    F: Fn(&DVector<f64>, &DVector<f64>, f64) -> DVector<f64>,
{
    if times.is_empty() {
        return Ok(Vec::new());
    }
    if controls.len() != times.len() {
        return Err(Error::shape(format!(
            "integrate_rk4: {} controls for {} timestamps",
            controls.len(),
            times.len()
        )));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::config("integrate_rk4: timestamps must be strictly increasing"));
    }
    if !(max_step > 0.0) {
        return Err(Error::config("integrate_rk4: max step must be positive"));
    }
    let eval = |z: &DVector<f64>, u: &DVector<f64>, t: f64| -> Result<DVector<f64>> {
        let d = derivative(z, u, t);
        if d.iter().all(|v| v.is_finite()) {
            Ok(d)
        } else {
            Err(Error::IntegrationDiverged { time: t })
        }
    };
    let mut states = Vec::with_capacity(times.len());
    let mut z = z0.clone();
    states.push(z.clone());
    for i in 0..times.len() - 1 {
        let (t0, t1) = (times[i], times[i + 1]);
        let gap = t1 - t0;
        let n_sub = ((gap / max_step) - 1e-9).ceil().max(1.0) as usize;
        let h = gap / n_sub as f64;
        let u = &controls[i];
        for k in 0..n_sub {
            let t = t0 + k as f64 * h;
            let k1 = eval(&z, u, t)?;
            let k2 = eval(&(&z + &k1 * (h / 2.0)), u, t + h / 2.0)?;
            let k3 = eval(&(&z + &k2 * (h / 2.0)), u, t + h / 2.0)?;
            let k4 = eval(&(&z + &k3 * h), u, t + h)?;
            z += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        states.push(z.clone());
    }
    Ok(states)
}

/// Systems known to the catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Pendulum,
    Sir,
}

impl System {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "pendulum" => Ok(System::Pendulum),
            "sir" => Ok(System::Sir),
            other => Err(Error::config(format!("unknown system '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            System::Pendulum => "pendulum",
            System::Sir => "sir",
        }
    }

    pub fn spec(self) -> DynamicsSpec {
        match self {
            System::Pendulum => DynamicsSpec::pendulum(),
            System::Sir => DynamicsSpec::sir(),
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            System::Pendulum => 2,
            System::Sir => 3,
        }
    }

    pub fn observation_dim(self) -> usize {
        3
    }

    pub fn control_dim(self) -> usize {
        match self {
            System::Pendulum => 1,
            System::Sir => 0,
        }
    }

    /// Default emission before normalization: pendulum `(sin θ, cos θ, ω)`,
    /// SIR `(S, I, R)/N`.
    pub fn emit(self, state: &DVector<f64>, population: f64) -> DVector<f64> {
        match self {
            System::Pendulum => {
                DVector::from_vec(vec![state[0].sin(), state[0].cos(), state[1]])
            }
            System::Sir => state / population,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_vec(x.to_vec())
    }

    #[test]
    fn zero_derivative_keeps_state() {
        let times: Vec<f64> = (0..7).map(|i| i as f64 * 0.3).collect();
        let controls = vec![v(&[0.0]); times.len()];
        let out = integrate_rk4(|z, _, _| z * 0.0, &v(&[1.0, 2.0]), &times, &controls, 0.01).unwrap();
        assert!(out.iter().all(|z| *z == v(&[1.0, 2.0])));
    }

    #[test]
    fn exponential_growth_matches_closed_form() {
        let out = integrate_rk4(|z, _, _| z.clone(), &v(&[1.0]), &[0.0, 1.0], &[v(&[0.0]), v(&[0.0])], 0.01)
            .unwrap();
        assert!((out[1][0] - std::f64::consts::E).abs() < 1e-6);
    }

    #[test]
    fn undamped_pendulum_conserves_energy() {
        let p = PendulumParams {
            damping: 0.0,
            length: 1.3,
            ..Default::default()
        };
        let times: Vec<f64> = (0..=300).map(|i| i as f64 * 0.05).collect();
        let controls = vec![v(&[0.0]); times.len()];
        let z0 = v(&[1.2, 0.4]);
        let out = integrate_rk4(|z, _, t| pendulum_derivative(&p, z, t), &z0, &times, &controls, 0.005)
            .unwrap();
        let e0 = p.energy(&z0);
        let drift = out.iter().map(|z| (p.energy(z) - e0).abs() / e0).fold(0.0, f64::max);
        assert!(drift < 1e-6, "relative energy drift {drift}");
    }

    #[test]
    fn rk4_convergence_order_on_pendulum() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let p = PendulumParams {
                length: rng.random_range(1.0..2.0),
                control_amplitude: rng.random_range(-5.0..5.0),
                ..Default::default()
            };
            let z0 = v(&[rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0)]);
            let times = [0.0, 3.0];
            let controls = vec![v(&[0.0]); 2];
            let run = |h: f64| {
                integrate_rk4(|z, _, t| pendulum_derivative(&p, z, t), &z0, &times, &controls, h)
                    .unwrap()[1]
                    .clone()
            };
            let reference = run(0.1 / 64.0);
            let coarse = (run(0.1) - &reference).norm();
            let fine = (run(0.05) - &reference).norm();
            assert!(coarse / fine >= 12.0, "ratio {}", coarse / fine);
        }
    }

    #[test]
    fn divergence_is_reported_with_time() {
        let times = [0.0, 1.0, 2.0];
        let controls = vec![v(&[0.0]); 3];
        let err = integrate_rk4(
            |z, _, t| if t > 0.5 { z * f64::NAN } else { z.clone() },
            &v(&[1.0]),
            &times,
            &controls,
            0.25,
        )
        .unwrap_err();
        assert!(matches!(err, Error::IntegrationDiverged { time } if time > 0.5));
    }

    #[test]
    fn pendulum_derivative_examples() {
        let p = PendulumParams::default();
        assert_eq!(pendulum_derivative(&p, &v(&[0.0, 0.0]), 0.0), v(&[0.0, 0.0]));
        let d = pendulum_derivative(&p, &v(&[std::f64::consts::FRAC_PI_2, 0.0]), 0.0);
        assert_eq!(d[0], 0.0);
        assert_relative_eq!(d[1], -10.0, epsilon = 1e-12);
        let p = PendulumParams {
            damping: 0.0,
            control_amplitude: 5.0,
            control_frequency: 0.0,
            ..Default::default()
        };
        assert_eq!(pendulum_derivative(&p, &v(&[0.0, 0.0]), 0.0), v(&[0.0, 5.0]));
    }

    #[test]
    fn sir_derivative_examples() {
        let p = SirParams::constant(0.3, 0.1, 1.0);
        assert_eq!(sir_derivative(&p, &v(&[0.9, 0.0, 0.1]), 0.0), v(&[0.0, 0.0, 0.0]));
        let d = sir_derivative(&p, &v(&[0.9, 0.1, 0.0]), 0.0);
        assert_relative_eq!(d[0], -0.027, epsilon = 1e-15);
        assert_relative_eq!(d[1], 0.017, epsilon = 1e-15);
        assert_relative_eq!(d[2], 0.01, epsilon = 1e-15);
    }

    #[test]
    fn param_validation() {
        assert!(PendulumParams { mass: 0.0, ..Default::default() }.validate().is_err());
        assert!(PendulumParams { damping: -0.1, ..Default::default() }.validate().is_err());
        assert!(PendulumParams::default().validate().is_ok());
        assert!(SirParams::constant(0.3, 0.1, 0.0).validate().is_err());
        assert!(SirParams::constant(-0.3, 0.1, 1.0).validate().is_err());
    }

    #[test]
    fn rate_profile_interpolates() {
        let p = RateProfile { knots: vec![(0.0, 1.0), (10.0, 3.0)] };
        assert_eq!(p.at(-1.0), 1.0);
        assert_eq!(p.at(5.0), 2.0);
        assert_eq!(p.at(20.0), 3.0);
    }

    proptest::proptest! {
        #[test]
        fn sir_flows_sum_to_zero(s in 0.0..1.0f64, i in 0.0..1.0f64, r in 0.0..1.0f64,
                                 beta in 0.0..2.0f64, gamma in 0.0..1.0f64) {
            let p = SirParams::constant(beta, gamma, 1.0);
            let d = sir_derivative(&p, &v(&[s, i, r]), 0.0);
            proptest::prop_assert!(d.sum().abs() < 1e-14);
        }
    }
}
