use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dynamics::PendulumParams;
use crate::error::{Error, Result};

/// `constant + Σ coeff·z̄[index]`: an entry of a state-dependent matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub constant: f64,
    pub terms: Vec<(usize, f64)>,
}

impl Affine {
    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn constant(c: f64) -> Self {
        Self {
            constant: c,
            terms: Vec::new(),
        }
    }

    /// `coeff·z̄[index]`.
    pub fn state(index: usize, coeff: f64) -> Self {
        Self {
            constant: 0.0,
            terms: vec![(index, coeff)],
        }
    }

    pub fn is_identically_zero(&self) -> bool {
        self.constant == 0.0 && self.terms.iter().all(|&(_, c)| c == 0.0)
    }

    pub fn eval(&self, zbar: &DVector<f64>) -> f64 {
        self.terms
            .iter()
            .fold(self.constant, |acc, &(i, c)| acc + c * zbar[i])
    }
}

/// Nonlinear extension term appended to the base state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Feature {
    Sin(usize),
    Cos(usize),
}

/// Partial-knowledge description of a system in augmented linear form
/// `dz̄/dt = (A_knw(z̄) + F(z̄) ⊙ M_A ⊙ Ã_unk) z̄ + (B_knw + M_B ⊙ B̃_unk) u`.
///
/// `F` holds the known factors of partially known entries (1 elsewhere).
/// Construction rejects masks that overlap a known entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSpec {
    pub name: String,
    pub state_dim: usize,
    pub augmented_dim: usize,
    pub control_dim: usize,
    pub features: Vec<Feature>,
    known: Vec<Affine>,
    factors: Vec<Affine>,
    pub mask_a: DMatrix<f64>,
    pub mask_b: DMatrix<f64>,
    pub known_b: DMatrix<f64>,
}

impl DynamicsSpec {
    /// `known` and `factors` are row-major `d̄ × d̄`; an empty `factors` means
    /// no partially known entries.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        state_dim: usize,
        control_dim: usize,
        features: Vec<Feature>,
        known: Vec<Affine>,
        factors: Vec<Affine>,
        mask_a: DMatrix<f64>,
        mask_b: DMatrix<f64>,
        known_b: DMatrix<f64>,
    ) -> Result<Self> {
        let name = name.into();
        let d = state_dim + features.len();
        let factors = if factors.is_empty() {
            vec![Affine::constant(1.0); d * d]
        } else {
            factors
        };
        if known.len() != d * d || factors.len() != d * d {
            return Err(Error::shape(format!("{name}: known/factor tables must have {} entries", d * d)));
        }
        if mask_a.shape() != (d, d) || mask_b.shape() != (d, control_dim) || known_b.shape() != (d, control_dim) {
            return Err(Error::shape(format!("{name}: mask or B_knw shape mismatch")));
        }
        if mask_a.iter().chain(mask_b.iter()).any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::config(format!("{name}: mask entries must be 0 or 1")));
        }
        let index_ok = |a: &Affine| a.terms.iter().all(|&(i, _)| i < d);
        if !known.iter().chain(&factors).all(index_ok) {
            return Err(Error::config(format!("{name}: affine entry references a state index >= {d}")));
        }
        if let Some(f) = features.iter().find(|f| match f {
            Feature::Sin(i) | Feature::Cos(i) => *i >= state_dim,
        }) {
            return Err(Error::config(format!("{name}: feature {f:?} outside the base state")));
        }
        for r in 0..d {
            for c in 0..d {
                if mask_a[(r, c)] == 1.0 && !known[r * d + c].is_identically_zero() {
                    return Err(Error::SupportOverlap { system: name, row: r, col: c });
                }
            }
            for c in 0..control_dim {
                if mask_b[(r, c)] == 1.0 && known_b[(r, c)] != 0.0 {
                    return Err(Error::SupportOverlap { system: name, row: r, col: c });
                }
            }
        }
        Ok(Self {
            name,
            state_dim,
            augmented_dim: d,
            control_dim,
            features,
            known,
            factors,
            mask_a,
            mask_b,
            known_b,
        })
    }

    /// Pendulum with augmented state `(θ, ω, sin θ, cos θ)`; the ω-row is learned.
    pub fn pendulum() -> Self {
        let d = 4;
        let mut known = vec![Affine::zero(); d * d];
        known[1] = Affine::constant(1.0); // θ̇ = ω
        known[2 * d + 3] = Affine::state(1, 1.0); // ṡ = ω c
        known[3 * d + 2] = Affine::state(1, -1.0); // ċ = −ω s
        let mut mask_a = DMatrix::zeros(d, d);
        mask_a.row_mut(1).fill(1.0);
        let mut mask_b = DMatrix::zeros(d, 1);
        mask_b[(1, 0)] = 1.0;
        Self::new(
            "pendulum",
            2,
            1,
            vec![Feature::Sin(0), Feature::Cos(0)],
            known,
            Vec::new(),
            mask_a,
            mask_b,
            DMatrix::zeros(d, 1),
        )
        .expect("pendulum spec is consistent")
    }

    /// Pendulum with every term known: row ω is `(0, −b/m, −g/l, 0)` and the
    /// control gain `1/(m l²)` sits in `B_knw`. Nothing is learnable.
    pub fn pendulum_with_truth(p: &PendulumParams) -> Self {
        let base = Self::pendulum();
        let d = 4;
        let mut known = base.known.clone();
        known[d + 1] = Affine::constant(-p.damping / p.mass);
        known[d + 2] = Affine::constant(-p.gravity / p.length);
        let mut known_b = DMatrix::zeros(d, 1);
        known_b[(1, 0)] = 1.0 / (p.mass * p.length * p.length);
        Self::new(
            "pendulum-truth",
            2,
            1,
            base.features.clone(),
            known,
            Vec::new(),
            DMatrix::zeros(d, d),
            DMatrix::zeros(d, 1),
            known_b,
        )
        .expect("pendulum truth spec is consistent")
    }

    /// SIR with learnable (1,1), (2,1), (2,2), (2,3), (3,2) (1-indexed); the
    /// first column carries the known factors `∓I/N`.
    pub fn sir() -> Self {
        Self::sir_with_population(1.0)
    }

    pub fn sir_with_population(population: f64) -> Self {
        let d = 3;
        let mut mask_a = DMatrix::zeros(d, d);
        for (r, c) in [(0, 0), (1, 0), (1, 1), (1, 2), (2, 1)] {
            mask_a[(r, c)] = 1.0;
        }
        let mut factors = vec![Affine::constant(1.0); d * d];
        factors[0] = Affine::state(1, -1.0 / population);
        factors[d] = Affine::state(1, 1.0 / population);
        Self::new(
            "sir",
            3,
            0,
            Vec::new(),
            vec![Affine::zero(); d * d],
            factors,
            mask_a,
            DMatrix::zeros(d, 0),
            DMatrix::zeros(d, 0),
        )
        .expect("SIR spec is consistent")
    }

    /// Four-dimensional linear system with two known kinematic couplings and
    /// five learnable constant entries; see [`DynamicsSpec::linear4_truth`].
    pub fn linear4() -> Self {
        let d = 4;
        let mut known = vec![Affine::zero(); d * d];
        known[1] = Affine::constant(1.0);
        known[2 * d + 3] = Affine::constant(1.0);
        let mut mask_a = DMatrix::zeros(d, d);
        for (r, c) in Self::LINEAR4_UNKNOWN {
            mask_a[(r, c)] = 1.0;
        }
        Self::new(
            "linear4",
            4,
            0,
            Vec::new(),
            known,
            Vec::new(),
            mask_a,
            DMatrix::zeros(d, 0),
            DMatrix::zeros(d, 0),
        )
        .expect("linear4 spec is consistent")
    }

    pub const LINEAR4_UNKNOWN: [(usize, usize); 5] = [(1, 0), (1, 1), (3, 0), (3, 2), (3, 3)];

    /// Ground-truth unknown part of [`DynamicsSpec::linear4`].
    pub fn linear4_truth() -> DMatrix<f64> {
        let mut a = DMatrix::zeros(4, 4);
        a[(1, 0)] = -2.0;
        a[(1, 1)] = -0.3;
        a[(3, 0)] = 0.5;
        a[(3, 2)] = -1.5;
        a[(3, 3)] = -0.2;
        a
    }

    pub fn known_entry(&self, row: usize, col: usize) -> &Affine {
        &self.known[row * self.augmented_dim + col]
    }

    pub fn factor_entry(&self, row: usize, col: usize) -> &Affine {
        &self.factors[row * self.augmented_dim + col]
    }

    pub fn has_factors(&self) -> bool {
        self.factors.iter().any(|f| *f != Affine::constant(1.0))
    }

    /// `z̄ = [z, ψ(z)]`.
    pub fn augment(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.augmented_dim);
        out.extend(z.iter().take(self.state_dim));
        out.extend(self.features.iter().map(|f| match *f {
            Feature::Sin(i) => z[i].sin(),
            Feature::Cos(i) => z[i].cos(),
        }));
        DVector::from_vec(out)
    }

    /// Batched augmentation on the tape (`z` is state_dim × B).
    pub fn augment_graph(&self, g: &mut Graph, z: Var) -> Var {
        if self.features.is_empty() {
            return z;
        }
        let mut parts = vec![z];
        for f in &self.features {
            let part = match *f {
                Feature::Sin(i) => {
                    let s = g.slice_rows(z, i, 1);
                    g.sin(s)
                }
                Feature::Cos(i) => {
                    let s = g.slice_rows(z, i, 1);
                    g.cos(s)
                }
            };
            parts.push(part);
        }
        g.concat_rows(&parts)
    }

    /// Largest deviation between the extension terms of `zbar` and ψ of its base part.
    pub fn augmentation_residual(&self, zbar: &DVector<f64>) -> f64 {
        let expected = self.augment(&zbar.rows(0, self.state_dim).into_owned());
        (expected - zbar).amax()
    }

    /// `A_knw(z̄, t)`. The catalog's known matrices do not depend on `t`.
    pub fn known_matrix(&self, zbar: &DVector<f64>, _t: f64) -> DMatrix<f64> {
        let d = self.augmented_dim;
        DMatrix::from_fn(d, d, |r, c| self.known[r * d + c].eval(zbar))
    }

    pub fn factor_matrix(&self, zbar: &DVector<f64>) -> DMatrix<f64> {
        let d = self.augmented_dim;
        DMatrix::from_fn(d, d, |r, c| self.factors[r * d + c].eval(zbar))
    }

    /// `A(t) = A_knw(z̄) + F(z̄) ⊙ masked`.
    pub fn compose(&self, zbar: &DVector<f64>, t: f64, masked_unknown: &DMatrix<f64>) -> DMatrix<f64> {
        self.known_matrix(zbar, t) + self.factor_matrix(zbar).component_mul(masked_unknown)
    }

    /// Row-major flattening of an affine table as `(E, c)` with `flat = E z̄ + c`.
    fn operator(&self, table: &[Affine]) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = self.augmented_dim;
        let mut e = DMatrix::zeros(d * d, d);
        let mut c = DMatrix::zeros(d * d, 1);
        for (k, a) in table.iter().enumerate() {
            c[(k, 0)] = a.constant;
            for &(i, coeff) in &a.terms {
                e[(k, i)] += coeff;
            }
        }
        (e, c)
    }

    pub fn known_operator(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        self.operator(&self.known)
    }

    pub fn factor_operator(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        self.operator(&self.factors)
    }

    /// Row-major flattened `M_A` as a column.
    pub fn mask_a_flat(&self) -> DMatrix<f64> {
        flatten_row_major(&self.mask_a)
    }

    pub fn mask_b_flat(&self) -> DMatrix<f64> {
        flatten_row_major(&self.mask_b)
    }

    pub fn known_b_flat(&self) -> DMatrix<f64> {
        flatten_row_major(&self.known_b)
    }
}

pub(crate) fn flatten_row_major(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_iterator(m.len(), 1, m.transpose().iter().copied())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pendulum_known_rows() {
        let spec = DynamicsSpec::pendulum();
        let zbar = DVector::from_vec(vec![0.3, 2.0, 0.3f64.sin(), 0.3f64.cos()]);
        let k = spec.known_matrix(&zbar, 0.0);
        assert_eq!(k.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(k.row(2).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 0.0, 2.0]);
        assert_eq!(k.row(3).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, -2.0, 0.0]);
        assert!(spec.mask_a.row(0).iter().all(|&m| m == 0.0));
        assert!(spec.mask_a.row(1).iter().all(|&m| m == 1.0));
        assert_eq!(spec.mask_b.column(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn disjoint_support_holds_for_catalog() {
        for spec in [DynamicsSpec::pendulum(), DynamicsSpec::sir(), DynamicsSpec::linear4()] {
            for omega in [-3.0, 0.0, 1.7] {
                let zbar = DVector::from_element(spec.augmented_dim, omega);
                let prod = spec.known_matrix(&zbar, 0.0).component_mul(&spec.mask_a);
                assert!(prod.iter().all(|&v| v == 0.0), "{}", spec.name);
            }
        }
    }

    #[test]
    fn overlapping_support_is_rejected() {
        let spec = DynamicsSpec::pendulum();
        let mut mask = spec.mask_a.clone();
        mask[(0, 1)] = 1.0;
        let err = DynamicsSpec::new(
            "bad",
            2,
            1,
            spec.features.clone(),
            spec.known.clone(),
            Vec::new(),
            mask,
            spec.mask_b.clone(),
            spec.known_b.clone(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::SupportOverlap { row: 0, col: 1, .. }));
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        let mut mask = DMatrix::zeros(4, 4);
        mask[(1, 1)] = 0.5;
        let base = DynamicsSpec::linear4();
        assert!(DynamicsSpec::new(
            "x", 4, 0, Vec::new(), base.known.clone(), Vec::new(), mask,
            DMatrix::zeros(4, 0), DMatrix::zeros(4, 0)
        )
        .is_err());
    }

    #[test]
    fn sir_mask_and_factors() {
        let spec = DynamicsSpec::sir();
        assert_eq!(spec.mask_a[(0, 1)], 0.0);
        assert_eq!(spec.mask_a[(2, 1)], 1.0);
        assert_eq!(spec.mask_a.sum(), 5.0);
        // With I = 0 the learned first-column entries vanish.
        let zbar = DVector::from_vec(vec![0.9, 0.0, 0.1]);
        let a = spec.compose(&zbar, 0.0, &spec.mask_a.clone());
        assert_eq!(a[(0, 0)], 0.0);
        assert_eq!(a[(1, 0)], 0.0);
        assert_eq!(a[(1, 1)], 1.0);
        let zbar = DVector::from_vec(vec![0.9, 0.2, 0.1]);
        let a = spec.compose(&zbar, 0.0, &spec.mask_a.clone());
        assert_eq!(a[(0, 0)], -0.2);
        assert_eq!(a[(1, 0)], 0.2);
    }

    #[test]
    fn operators_match_direct_evaluation() {
        let spec = DynamicsSpec::pendulum();
        let zbar = DVector::from_vec(vec![0.1, -0.7, 0.2, 0.9]);
        let (e, c) = spec.known_operator();
        let flat = &e * &zbar + c;
        assert_eq!(flat, flatten_row_major(&spec.known_matrix(&zbar, 0.0)));
        let spec = DynamicsSpec::sir();
        let zbar = DVector::from_vec(vec![0.6, 0.3, 0.1]);
        let (e, c) = spec.factor_operator();
        let flat = &e * &zbar + c;
        assert_eq!(flat, flatten_row_major(&spec.factor_matrix(&zbar)));
    }

    #[test]
    fn augmentation() {
        let spec = DynamicsSpec::pendulum();
        let z = DVector::from_vec(vec![0.5, 1.0]);
        let zbar = spec.augment(&z);
        assert_eq!(zbar.len(), 4);
        assert_eq!(zbar[2], 0.5f64.sin());
        assert_eq!(zbar[3], 0.5f64.cos());
        assert_eq!(spec.augmentation_residual(&zbar), 0.0);
        let mut g = Graph::new();
        let zv = g.constant(DMatrix::from_column_slice(2, 1, z.as_slice()));
        let out = spec.augment_graph(&mut g, zv);
        assert_eq!(g.value(out).column(0).into_owned(), zbar);
    }
}
