//! Training objective: reconstruction, step-wise KL, and the physics-state
//! regularizer, weighted by β and λ.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Distance used by the physics-state regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegMetric {
    /// Squared Euclidean norm of the difference.
    #[default]
    Euclidean,
    /// Squared max-abs of the difference (a subgradient at ties).
    Chebyshev,
    /// `1 − cos` between the two vectors.
    Cosine,
}

impl RegMetric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(RegMetric::Euclidean),
            "chebyshev" => Ok(RegMetric::Chebyshev),
            "cosine" => Ok(RegMetric::Cosine),
            other => Err(Error::config(format!("unknown regularizer metric '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RegMetric::Euclidean => "euclidean",
            RegMetric::Chebyshev => "chebyshev",
            RegMetric::Cosine => "cosine",
        }
    }

    pub fn distance(self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let d = a - b;
        match self {
            RegMetric::Euclidean => d.norm_squared(),
            RegMetric::Chebyshev => d.amax().powi(2),
            RegMetric::Cosine => {
                let (na, nb) = (a.norm(), b.norm());
                if na == 0.0 && nb == 0.0 {
                    0.0
                } else {
                    1.0 - a.dot(b) / (na * nb).max(f64::MIN_POSITIVE)
                }
            }
        }
    }
}

const COSINE_EPS: f64 = 1e-12;

fn check_pairs(what: &str, a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{what}: {} vs {} steps", a.len(), b.len())));
    }
    if let Some(i) = (0..a.len()).find(|&i| a[i].len() != b[i].len()) {
        return Err(Error::shape(format!(
            "{what}: step {i} has dimensions {} and {}",
            a[i].len(),
            b[i].len()
        )));
    }
    Ok(())
}

/// KL(q‖p) for diagonal Gaussians, summed over dimensions and averaged over steps.
pub fn kl_gaussian_diag(
    q_mean: &[DVector<f64>],
    q_std: &[DVector<f64>],
    p_mean: &[DVector<f64>],
    p_std: &[DVector<f64>],
) -> Result<f64> {
    check_pairs("kl", q_mean, p_mean)?;
    check_pairs("kl", q_mean, q_std)?;
    check_pairs("kl", p_mean, p_std)?;
    if q_mean.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..q_mean.len() {
        for k in 0..q_mean[i].len() {
            let (qs, ps) = (q_std[i][k], p_std[i][k]);
            if !(qs > 0.0 && ps > 0.0) {
                return Err(Error::Domain(format!("standard deviation must be positive at step {i}")));
            }
            let dm = q_mean[i][k] - p_mean[i][k];
            total += (ps / qs).ln() + (qs * qs + dm * dm) / (2.0 * ps * ps) - 0.5;
        }
    }
    Ok(total / q_mean.len() as f64)
}

/// `(1/(n+1)) Σᵢ dist(z(tᵢ), z*(tᵢ))`.
pub fn physics_state_reg(prior: &[DVector<f64>], posterior: &[DVector<f64>], metric: RegMetric) -> Result<f64> {
    check_pairs("regularizer", prior, posterior)?;
    if prior.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = prior.iter().zip(posterior).map(|(a, b)| metric.distance(a, b)).sum();
    Ok(sum / prior.len() as f64)
}

/// Loss components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub reg: f64,
    pub total: f64,
    pub beta: f64,
    pub lambda: f64,
}

/// `total = recon + β·kl + λ·reg`.
pub fn total_loss(recon: f64, kl: f64, reg: f64, beta: f64, lambda: f64) -> Result<LossBreakdown> {
    if ![recon, kl, reg, beta, lambda].iter().all(|v| v.is_finite()) {
        return Err(Error::Domain(format!(
            "non-finite loss input: recon {recon}, kl {kl}, reg {reg}, beta {beta}, lambda {lambda}"
        )));
    }
    Ok(LossBreakdown {
        recon,
        kl,
        reg,
        total: recon + beta * kl + lambda * reg,
        beta,
        lambda,
    })
}

/// Mean over the batch of the per-item KL summed over dimensions; inputs
/// are means and log-stds (dims × batch). Returns a 1×1 node.
pub fn kl_step(g: &mut Graph, q_mean: Var, q_logstd: Var, p_mean: Var, p_logstd: Var) -> Var {
    let batch = g.value(q_mean).ncols() as f64;
    // log σp − log σq + ½(σq² + (μq − μp)²)/σp² − ½
    let dl = g.sub(p_logstd, q_logstd);
    let two_dl = g.scale(dl, -2.0);
    let ratio = g.exp(two_dl);
    let dm = g.sub(q_mean, p_mean);
    let dm2 = g.square(dm);
    let inv_p = g.scale(p_logstd, -2.0);
    let inv_p = g.exp(inv_p);
    let mterm = g.mul(dm2, inv_p);
    let quad = g.add(ratio, mterm);
    let quad = g.scale(quad, 0.5);
    let per = g.add(dl, quad);
    let per = g.offset(per, -0.5);
    let s = g.sum_all(per);
    g.scale(s, 1.0 / batch)
}

/// Mean over the batch of `metric(a, b)` between columns. Returns a 1×1 node.
pub fn reg_step(g: &mut Graph, a: Var, b: Var, metric: RegMetric) -> Var {
    let batch = g.value(a).ncols() as f64;
    let per = match metric {
        RegMetric::Euclidean => {
            let d = g.sub(a, b);
            let d2 = g.square(d);
            g.sum_rows(d2)
        }
        RegMetric::Chebyshev => {
            let d = g.sub(a, b);
            let m = g.max_abs_rows(d);
            g.square(m)
        }
        RegMetric::Cosine => {
            let ab = g.mul(a, b);
            let dot = g.sum_rows(ab);
            let a2 = g.square(a);
            let a2 = g.sum_rows(a2);
            let a2 = g.offset(a2, COSINE_EPS);
            let b2 = g.square(b);
            let b2 = g.sum_rows(b2);
            let b2 = g.offset(b2, COSINE_EPS);
            let norms = g.mul(a2, b2);
            let norms = g.sqrt(norms);
            let cos = g.div(dot, norms);
            let neg = g.scale(cos, -1.0);
            g.offset(neg, 1.0)
        }
    };
    let s = g.sum_all(per);
    g.scale(s, 1.0 / batch)
}

/// `½ Σ_dims (pred − target)²`, averaged over the batch. Returns a 1×1 node.
pub fn recon_step(g: &mut Graph, pred: Var, target: &DMatrix<f64>) -> Var {
    let batch = target.ncols() as f64;
    let t = g.constant(target.clone());
    let d = g.sub(pred, t);
    let d2 = g.square(d);
    let s = g.sum_all(d2);
    g.scale(s, 0.5 / batch)
}

/// Averages a list of 1×1 nodes.
pub fn mean_of(g: &mut Graph, terms: &[Var]) -> Var {
    assert!(!terms.is_empty(), "mean of an empty list");
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// One row of the per-epoch metrics file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_extrap_mse: f64,
}

pub const METRICS_HEADER: &str = "epoch,recon,kl,reg,total,val_extrap_mse";

/// Writes `epoch,recon,kl,reg,total,val_extrap_mse` rows.
pub fn write_metrics_file(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{METRICS_HEADER}")?;
    for r in history {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.epoch, r.loss.recon, r.loss.kl, r.loss.reg, r.loss.total, r.val_extrap_mse
        )?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_vec(x.to_vec())
    }

    #[test]
    fn kl_examples() {
        let m = vec![v(&[0.3, -1.0])];
        let s = vec![v(&[0.5, 2.0])];
        assert_eq!(kl_gaussian_diag(&m, &s, &m, &s).unwrap(), 0.0);
        let kl = kl_gaussian_diag(&[v(&[1.0])], &[v(&[1.0])], &[v(&[0.0])], &[v(&[1.0])]).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
        assert!(kl_gaussian_diag(&[v(&[1.0])], &[v(&[0.0])], &[v(&[0.0])], &[v(&[1.0])]).is_err());
    }

    #[test]
    fn kl_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let qm = v(&[rng.random_range(-5.0..5.0)]);
            let pm = v(&[rng.random_range(-5.0..5.0)]);
            let qs = v(&[rng.random_range(-6.0f64..2.0).exp()]);
            let ps = v(&[rng.random_range(-6.0f64..2.0).exp()]);
            assert!(kl_gaussian_diag(&[qm], &[qs], &[pm], &[ps]).unwrap() >= 0.0);
        }
    }

    #[test]
    fn kl_graph_matches_closed_form() {
        let mut g = Graph::new();
        let qm = g.constant(DMatrix::from_row_slice(2, 2, &[0.1, 1.0, -0.3, 0.2]));
        let qs = g.constant(DMatrix::from_row_slice(2, 2, &[-0.5, 0.1, 0.3, -1.0]));
        let pm = g.constant(DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.2, 0.2]));
        let ps = g.constant(DMatrix::from_row_slice(2, 2, &[0.0, -0.2, 0.1, 0.4]));
        let kl = kl_step(&mut g, qm, qs, pm, ps);
        let col = |var: Var, j: usize, exp: bool| {
            let c = g.value(var).column(j).into_owned();
            if exp {
                c.map(f64::exp)
            } else {
                c
            }
        };
        let mut expect = 0.0;
        for j in 0..2 {
            expect += kl_gaussian_diag(&[col(qm, j, false)], &[col(qs, j, true)], &[col(pm, j, false)], &[col(ps, j, true)])
                .unwrap();
        }
        assert!((g.scalar(kl) - expect / 2.0).abs() < 1e-12);
    }

    #[test]
    fn reg_examples() {
        let z = vec![v(&[1.0, 2.0]), v(&[-0.5, 0.3])];
        for m in [RegMetric::Euclidean, RegMetric::Chebyshev, RegMetric::Cosine] {
            assert!(physics_state_reg(&z, &z, m).unwrap().abs() < 1e-12);
        }
        assert_eq!(physics_state_reg(&[v(&[1.0, 0.0])], &[v(&[0.0, 0.0])], RegMetric::Euclidean).unwrap(), 1.0);
        let a = vec![v(&[1.0, 0.0]), v(&[1.0, 1.0, 1.0])];
        let b = vec![v(&[0.0, 0.0]), v(&[0.0, 0.0, 0.0])];
        assert_eq!(physics_state_reg(&a, &b, RegMetric::Euclidean).unwrap(), 2.0);
        assert!(physics_state_reg(&a[..1], &b, RegMetric::Euclidean).is_err());
        assert_eq!(physics_state_reg(&[v(&[3.0, -4.0])], &[v(&[0.0, 0.0])], RegMetric::Chebyshev).unwrap(), 16.0);
        let cos = physics_state_reg(&[v(&[1.0, 0.0])], &[v(&[0.0, 2.0])], RegMetric::Cosine).unwrap();
        assert!((cos - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reg_graph_matches_plain() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, -0.4, 0.7, 0.3, -2.0]);
        let b = DMatrix::from_row_slice(3, 2, &[0.5, 0.1, 0.4, -0.7, 0.3, 1.0]);
        for m in [RegMetric::Euclidean, RegMetric::Chebyshev, RegMetric::Cosine] {
            let mut g = Graph::new();
            let av = g.constant(a.clone());
            let bv = g.constant(b.clone());
            let r = reg_step(&mut g, av, bv, m);
            let expect = (0..2)
                .map(|j| m.distance(&a.column(j).into_owned(), &b.column(j).into_owned()))
                .sum::<f64>()
                / 2.0;
            assert!((g.scalar(r) - expect).abs() < 1e-9, "{m:?}");
        }
    }

    #[test]
    fn total_loss_composition() {
        let l = total_loss(2.0, 3.0, 5.0, 0.0, 0.0).unwrap();
        assert_eq!(l.total, 2.0);
        let l = total_loss(2.0, 3.0, 5.0, 1.0, 100.0).unwrap();
        assert_eq!(l.total, 2.0 + 3.0 + 500.0);
        let l = total_loss(2.0, 3.0, 5.0, 0.1, 1.0).unwrap();
        assert_eq!(l.total, 2.0 + 0.1 * 3.0 + 5.0);
        assert!(total_loss(f64::NAN, 0.0, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn metrics_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let rec = EpochRecord {
            epoch: 3,
            loss: total_loss(1.0, 0.5, 0.25, 0.1, 1.0).unwrap(),
            val_extrap_mse: 0.125,
        };
        write_metrics_file(&path, &[rec]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epoch,recon,kl,reg,total,val_extrap_mse\n3,1,0.5,0.25,1.3,0.125\n");
    }
}
