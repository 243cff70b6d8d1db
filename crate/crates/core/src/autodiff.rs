//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value is a `DMatrix<f64>`; batched tensors put features on rows and
//! batch items on columns. The tape records one node per operation and
//! `Graph::backward` walks it in reverse. Two fused kernels carry the
//! bilinear state update: [`Graph::grouped_step`] for layers whose
//! discretization depends only on the step size, and [`Graph::state_step`]
//! for the per-column time-varying matrices of the physics unit.

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::ssm::discretize_bilinear;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Sin(Var),
    Cos(Var),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SumAll(Var),
    SumRows(Var),
    MaxAbsRows(Var, Vec<usize>),
    BilinearA(Var, f64),
    BilinearB(Var, Var, f64, Var),
    GroupedStep {
        abar: Vec<Var>,
        bbar: Vec<Var>,
        group: Vec<usize>,
        h: Var,
        u: Var,
    },
    StateStep {
        a: Var,
        b: Option<Var>,
        z: Var,
        u: Var,
        deltas: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: DMatrix<f64>,
    op: Op,
    needs_grad: bool,
}

/// A gradient tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bilinear_cache: HashMap<(Var, Var, u64), (Var, Var)>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<DMatrix<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&DMatrix<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<DMatrix<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(grads: &mut [Option<DMatrix<f64>>], v: Var, g: DMatrix<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += g,
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).component_mul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).component_div(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Div(a, b), ng)
    }

    /// Adds the column vector `b` to every column of `x`.
    pub fn add_col(&mut self, x: Var, b: Var) -> Var {
        let bv = self.value(b);
        assert_eq!(bv.ncols(), 1, "add_col expects a column vector");
        let mut value = self.value(x).clone();
        for mut col in value.column_iter_mut() {
            col += bv.column(0);
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(value, Op::AddCol(x, b), ng)
    }

    /// Multiplies every column of `x` elementwise by the column vector `c`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Var {
        let cv = self.value(c);
        assert_eq!(cv.ncols(), 1, "mul_col expects a column vector");
        let mut value = self.value(x).clone();
        for mut col in value.column_iter_mut() {
            col.component_mul_assign(&cv.column(0));
        }
        let ng = self.needs(x) || self.needs(c);
        self.push(value, Op::MulCol(x, c), ng)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x) * k;
        let ng = self.needs(x);
        self.push(value, Op::Scale(x, k), ng)
    }

    /// `x + k` elementwise.
    pub fn offset(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).add_scalar(k);
        let ng = self.needs(x);
        self.push(value, Op::Offset(x), ng)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let ng = self.needs(x);
        self.push(value, op, ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, f64::sin, Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, f64::cos, Op::Cos(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let ncols = self.value(parts[0]).ncols();
        let nrows: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut value = DMatrix::zeros(nrows, ncols);
        let mut r = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.ncols(), ncols, "concat_rows column mismatch");
            value.rows_mut(r, pv.nrows()).copy_from(pv);
            r += pv.nrows();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).rows(start, len).into_owned();
        let ng = self.needs(x);
        self.push(value, Op::SliceRows(x, start), ng)
    }

    /// Sum of every entry, as a 1×1 value.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = DMatrix::from_element(1, 1, self.value(x).sum());
        let ng = self.needs(x);
        self.push(value, Op::SumAll(x), ng)
    }

    /// Column sums, as a 1×B row.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = DMatrix::from_iterator(1, xv.ncols(), xv.column_iter().map(|c| c.sum()));
        let ng = self.needs(x);
        self.push(value, Op::SumRows(x), ng)
    }

    /// Per-column maximum absolute entry, as a 1×B row. Subgradient at ties.
    pub fn max_abs_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut arg = Vec::with_capacity(xv.ncols());
        let mut vals = Vec::with_capacity(xv.ncols());
        for c in xv.column_iter() {
            let (i, v) = c
                .iter()
                .map(|v| v.abs())
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                });
            arg.push(i);
            vals.push(v);
        }
        let value = DMatrix::from_row_slice(1, vals.len(), &vals);
        let ng = self.needs(x);
        self.push(value, Op::MaxAbsRows(x, arg), ng)
    }

    /// Bilinear discretization of a dense state matrix and its input matrix
    /// at one step size. Repeated requests for the same `(a, b, delta)` on
    /// this tape return the cached pair.
    pub fn bilinear(&mut self, a: Var, b: Var, delta: f64) -> Result<(Var, Var)> {
        let key = (a, b, delta.to_bits());
        if let Some(&pair) = self.bilinear_cache.get(&key) {
            return Ok(pair);
        }
        let (abar, bbar) = discretize_bilinear(self.value(a), self.value(b), delta)?;
        let ng = self.needs(a) || self.needs(b);
        let na = self.needs(a);
        let abar_v = self.push(abar, Op::BilinearA(a, delta), na);
        let bbar_v = self.push(bbar, Op::BilinearB(a, b, delta, abar_v), ng);
        self.bilinear_cache.insert(key, (abar_v, bbar_v));
        Ok((abar_v, bbar_v))
    }

    /// Column `j` of the output is `abar[group[j]] * h_j + bbar[group[j]] * u_j`.
    pub fn grouped_step(
        &mut self,
        abar: &[Var],
        bbar: &[Var],
        group: &[usize],
        h: Var,
        u: Var,
    ) -> Var {
        let hv = self.value(h);
        let uv = self.value(u);
        let n = self.value(abar[0]).nrows();
        let batch = hv.ncols();
        assert_eq!(group.len(), batch);
        let value = if abar.len() == 1 {
            self.value(abar[0]) * hv + self.value(bbar[0]) * uv
        } else {
            let mut out = DMatrix::zeros(n, batch);
            for j in 0..batch {
                let g = group[j];
                let col = self.value(abar[g]) * hv.column(j) + self.value(bbar[g]) * uv.column(j);
                out.set_column(j, &col);
            }
            out
        };
        let ng = self.needs(h)
            || self.needs(u)
            || abar.iter().chain(bbar).any(|&v| self.needs(v));
        self.push(
            value,
            Op::GroupedStep {
                abar: abar.to_vec(),
                bbar: bbar.to_vec(),
                group: group.to_vec(),
                h,
                u,
            },
            ng,
        )
    }

    /// Per-column bilinear update of a time-varying linear system.
    ///
    /// `a` holds one row-major d×d matrix per column (d² rows), `b` one
    /// row-major d×m matrix per column, `z` the d-dim states and `u` the
    /// m-dim inputs. Column `j` advances by `deltas[j]`.
    pub fn state_step(
        &mut self,
        a: Var,
        b: Option<Var>,
        z: Var,
        u: Var,
        deltas: &[f64],
    ) -> Result<Var> {
        let zv = self.value(z);
        let uv = self.value(u);
        let d = zv.nrows();
        let m = uv.nrows();
        let batch = zv.ncols();
        let av = self.value(a);
        if av.nrows() != d * d || av.ncols() != batch || deltas.len() != batch {
            return Err(Error::shape(format!(
                "state_step: A is {}x{}, expected {}x{} with {} deltas",
                av.nrows(),
                av.ncols(),
                d * d,
                batch,
                deltas.len()
            )));
        }
        let mut out = DMatrix::zeros(d, batch);
        for j in 0..batch {
            let dt = deltas[j];
            let amat = column_as_matrix(av, j, d, d);
            let mut rhs = &zv.column(j) + (&amat * zv.column(j)) * (0.5 * dt);
            if let Some(b) = b {
                let bmat = column_as_matrix(self.value(b), j, d, m);
                rhs += (bmat * uv.column(j)) * dt;
            }
            let lhs = DMatrix::identity(d, d) - amat * (0.5 * dt);
            let lu = lhs.lu();
            let sol = lu.solve(&rhs).ok_or(Error::DiscretizationSingular {
                delta: dt,
                condition: f64::INFINITY,
            })?;
            out.set_column(j, &sol);
        }
        let ng = self.needs(a) || self.needs(z) || self.needs(u) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            Op::StateStep {
                a,
                b,
                z,
                u,
                deltas: deltas.to_vec(),
            },
            ng,
        ))
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(DMatrix::from_element(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn backprop_node(&self, node: &Node, g: &DMatrix<f64>, grads: &mut [Option<DMatrix<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if need(*a) {
                    accumulate(grads, *a, g * val(*b).transpose());
                }
                if need(*b) {
                    accumulate(grads, *b, val(*a).tr_mul(g));
                }
            }
            Op::Add(a, b) => {
                if need(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if need(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if need(*b) {
                    accumulate(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    accumulate(grads, *a, g.component_mul(val(*b)));
                }
                if need(*b) {
                    accumulate(grads, *b, g.component_mul(val(*a)));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if need(*a) {
                    accumulate(grads, *a, g.component_div(bv));
                }
                if need(*b) {
                    let gb = g
                        .component_mul(&node.value)
                        .component_div(bv)
                        .map(|v| -v);
                    accumulate(grads, *b, gb);
                }
            }
            Op::AddCol(x, b) => {
                if need(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if need(*b) {
                    accumulate(grads, *b, col_sum(&g));
                }
            }
            Op::MulCol(x, c) => {
                let cv = val(*c);
                if need(*x) {
                    let mut gx = g.clone();
                    for mut col in gx.column_iter_mut() {
                        col.component_mul_assign(&cv.column(0));
                    }
                    accumulate(grads, *x, gx);
                }
                if need(*c) {
                    accumulate(grads, *c, col_sum(&g.component_mul(val(*x))));
                }
            }
            Op::Scale(x, k) => accumulate(grads, *x, g * *k),
            Op::Offset(x) => accumulate(grads, *x, g.clone()),
            Op::Gelu(x) => {
                let d = val(*x).map(|v| {
                    let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v)
                });
                accumulate(grads, *x, g.component_mul(&d));
            }
            Op::Tanh(x) => {
                let d = node.value.map(|t| 1.0 - t * t);
                accumulate(grads, *x, g.component_mul(&d));
            }
            Op::Exp(x) => accumulate(grads, *x, g.component_mul(&node.value)),
            Op::Sin(x) => accumulate(grads, *x, g.component_mul(&val(*x).map(f64::cos))),
            Op::Cos(x) => accumulate(grads, *x, g.component_mul(&val(*x).map(|v| -v.sin()))),
            Op::Square(x) => accumulate(grads, *x, g.component_mul(val(*x)) * 2.0),
            Op::Sqrt(x) => {
                let d = node.value.map(|s| 0.5 / s);
                accumulate(grads, *x, g.component_mul(&d));
            }
            Op::Abs(x) => {
                let d = val(*x).map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
                accumulate(grads, *x, g.component_mul(&d));
            }
            Op::Clamp(x, lo, hi) => {
                let d = val(*x).map(|v| if v >= *lo && v <= *hi { 1.0 } else { 0.0 });
                accumulate(grads, *x, g.component_mul(&d));
            }
            Op::ConcatRows(parts) => {
                let mut r = 0;
                for &p in parts {
                    let n = val(p).nrows();
                    if need(p) {
                        accumulate(grads, p, g.rows(r, n).into_owned());
                    }
                    r += n;
                }
            }
            Op::SliceRows(x, start) => {
                let xv = val(*x);
                let mut gx = DMatrix::zeros(xv.nrows(), xv.ncols());
                gx.rows_mut(*start, g.nrows()).copy_from(g);
                accumulate(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let xv = val(*x);
                accumulate(grads, *x, DMatrix::from_element(xv.nrows(), xv.ncols(), g[(0, 0)]));
            }
            Op::SumRows(x) => {
                let xv = val(*x);
                let gx = DMatrix::from_fn(xv.nrows(), xv.ncols(), |_, j| g[(0, j)]);
                accumulate(grads, *x, gx);
            }
            Op::MaxAbsRows(x, arg) => {
                let xv = val(*x);
                let mut gx = DMatrix::zeros(xv.nrows(), xv.ncols());
                for (j, &i) in arg.iter().enumerate() {
                    gx[(i, j)] = g[(0, j)] * xv[(i, j)].signum();
                }
                accumulate(grads, *x, gx);
            }
            Op::BilinearA(a, delta) => {
                // dA = (Δ/2) S (I + Āᵀ), S = M⁻ᵀ G
                let s = solve_transposed(val(*a), *delta, g);
                let n = g.nrows();
                let ga = (&s * (DMatrix::identity(n, n) + node.value.transpose())) * (0.5 * delta);
                accumulate(grads, *a, ga);
            }
            Op::BilinearB(a, b, delta, _abar) => {
                let s = solve_transposed(val(*a), *delta, g);
                if need(*b) {
                    accumulate(grads, *b, &s * *delta);
                }
                if need(*a) {
                    accumulate(grads, *a, (&s * node.value.transpose()) * (0.5 * delta));
                }
            }
            Op::GroupedStep {
                abar,
                bbar,
                group,
                h,
                u,
            } => {
                let hv = val(*h);
                let uv = val(*u);
                if abar.len() == 1 {
                    let (a0, b0) = (abar[0], bbar[0]);
                    if need(a0) {
                        accumulate(grads, a0, g * hv.transpose());
                    }
                    if need(b0) {
                        accumulate(grads, b0, g * uv.transpose());
                    }
                    if need(*h) {
                        accumulate(grads, *h, val(a0).tr_mul(g));
                    }
                    if need(*u) {
                        accumulate(grads, *u, val(b0).tr_mul(g));
                    }
                } else {
                    let mut gh = DMatrix::zeros(hv.nrows(), hv.ncols());
                    let mut gu = DMatrix::zeros(uv.nrows(), uv.ncols());
                    let mut ga: Vec<DMatrix<f64>> = abar
                        .iter()
                        .map(|&v| DMatrix::zeros(val(v).nrows(), val(v).ncols()))
                        .collect();
                    let mut gb: Vec<DMatrix<f64>> = bbar
                        .iter()
                        .map(|&v| DMatrix::zeros(val(v).nrows(), val(v).ncols()))
                        .collect();
                    for (j, &k) in group.iter().enumerate() {
                        let gc = g.column(j);
                        ga[k].ger(1.0, &gc, &hv.column(j), 1.0);
                        gb[k].ger(1.0, &gc, &uv.column(j), 1.0);
                        gh.set_column(j, &val(abar[k]).tr_mul(&gc));
                        gu.set_column(j, &val(bbar[k]).tr_mul(&gc));
                    }
                    for (k, m) in ga.into_iter().enumerate() {
                        if need(abar[k]) {
                            accumulate(grads, abar[k], m);
                        }
                    }
                    for (k, m) in gb.into_iter().enumerate() {
                        if need(bbar[k]) {
                            accumulate(grads, bbar[k], m);
                        }
                    }
                    if need(*h) {
                        accumulate(grads, *h, gh);
                    }
                    if need(*u) {
                        accumulate(grads, *u, gu);
                    }
                }
            }
            Op::StateStep { a, b, z, u, deltas } => {
                let av = val(*a);
                let zv = val(*z);
                let uv = val(*u);
                let d = zv.nrows();
                let m = uv.nrows();
                let batch = zv.ncols();
                let mut ga = DMatrix::zeros(d * d, batch);
                let mut gb = b.map(|_| DMatrix::zeros(d * m, batch));
                let mut gz = DMatrix::zeros(d, batch);
                let mut gu = DMatrix::zeros(m, batch);
                for j in 0..batch {
                    let dt = deltas[j];
                    let amat = column_as_matrix(av, j, d, d);
                    let lhs = DMatrix::identity(d, d) - &amat * (0.5 * dt);
                    let s = lhs
                        .transpose()
                        .lu()
                        .solve(&g.column(j).into_owned())
                        .expect("state_step backward: matrix was invertible in forward");
                    let zsum = zv.column(j) + node.value.column(j);
                    let da = (&s * zsum.transpose()) * (0.5 * dt);
                    write_matrix_to_column(&mut ga, j, &da);
                    let dz = &s + amat.tr_mul(&s) * (0.5 * dt);
                    gz.set_column(j, &dz);
                    if let (Some(bvar), Some(gb)) = (b, gb.as_mut()) {
                        let bmat = column_as_matrix(val(*bvar), j, d, m);
                        let db = (&s * uv.column(j).transpose()) * dt;
                        write_matrix_to_column(gb, j, &db);
                        gu.set_column(j, &(bmat.tr_mul(&s) * dt));
                    }
                }
                if need(*a) {
                    accumulate(grads, *a, ga);
                }
                if need(*z) {
                    accumulate(grads, *z, gz);
                }
                if let (Some(bvar), Some(gb)) = (b, gb) {
                    if need(*bvar) {
                        accumulate(grads, *bvar, gb);
                    }
                    if need(*u) {
                        accumulate(grads, *u, gu);
                    }
                }
            }
        }
    }
}

/// Solves `(I − Δ/2·A)ᵀ S = G`.
fn solve_transposed(a: &DMatrix<f64>, delta: f64, g: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let lhs = (DMatrix::identity(n, n) - a * (0.5 * delta)).transpose();
    lhs.lu()
        .solve(g)
        .expect("bilinear backward: matrix was invertible in forward")
}

/// Reads column `j` of `flat` as a row-major `rows × cols` matrix.
pub fn column_as_matrix(flat: &DMatrix<f64>, j: usize, rows: usize, cols: usize) -> DMatrix<f64> {
    let col = flat.column(j);
    DMatrix::from_fn(rows, cols, |r, c| col[r * cols + c])
}

fn write_matrix_to_column(flat: &mut DMatrix<f64>, j: usize, m: &DMatrix<f64>) {
    let cols = m.ncols();
    for r in 0..m.nrows() {
        for c in 0..cols {
            flat[(r * cols + c, j)] = m[(r, c)];
        }
    }
}


fn col_sum(m: &DMatrix<f64>) -> DMatrix<f64> {
    let s = m.column_sum();
    DMatrix::from_column_slice(s.len(), 1, s.as_slice())
}
