//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Parameter leaves
//! point into a [`ParamStore`] rather than copying it; [`Tape::backward`]
//! returns one gradient per stored parameter.

use super::mat::{matmul, matmul_acc, matmul_nt, matmul_nt_acc, matmul_tn_acc, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors with a per-tensor trainable flag.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub values: Vec<Mat>,
    pub trainable: Vec<bool>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.trainable.push(true);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn count_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Mat> {
        self.values.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Mat::is_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    KlDiv(Var, Mat, f64),
    Nmse(Var, Mat, Vec<f64>),
    GatherSqErr(Var, Vec<(usize, usize, f64)>),
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Option<Mat>,
    op: Op,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax; entries at -inf become exactly zero.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Additive causal mask for an n x n score matrix.
pub fn causal_mask(n: usize) -> Mat {
    let mut m = Mat::zeros(n, n);
    for r in 0..n {
        for c in r + 1..n {
            *m.at_mut(r, c) = f64::NEG_INFINITY;
        }
    }
    m
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape { params, nodes: Vec::with_capacity(512) }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0] {
            Node { value: Some(m), .. } => m,
            Node { op: Op::Param(id), .. } => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// a b^T.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_nt(self.value(a), self.value(b));
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds the 1 x C row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let row = self.value(b);
        assert_eq!((1, self.value(a).cols), row.shape(), "row broadcast shape");
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            for (x, y) in v.row_mut(r).iter_mut().zip(&row.data) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, b))
    }

    /// Multiplies every row of `a` elementwise by the 1 x C row `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let row = self.value(b);
        assert_eq!((1, self.value(a).cols), row.shape(), "row broadcast shape");
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            for (x, y) in v.row_mut(r).iter_mut().zip(&row.data) {
                *x *= y;
            }
        }
        self.push(v, Op::MulRow(a, b))
    }

    /// a x W + b.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scaled(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for y in row.iter_mut() {
                *y = (*y - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(v, Op::LayerNorm(a, inv_std))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols, cols, "concat_rows width mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut c0 = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows, rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[c0..c0 + m.cols].copy_from_slice(m.row(r));
            }
            c0 += m.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let v = self.value(a).slice_rows(r0, r1);
        self.push(v, Op::SliceRows(a, r0))
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let v = self.value(a).slice_cols(c0, c1);
        self.push(v, Op::SliceCols(a, c0))
    }

    /// Row-mean of sum_c p log(p / max(q, eps)) with q = `a`; terms with
    /// p = 0 contribute nothing.
    pub fn kl_div(&mut self, a: Var, target: Mat, eps: f64) -> Var {
        let v = kl_rows_mean(self.value(a), &target, eps);
        self.push(Mat::from_vec(1, 1, vec![v]), Op::KlDiv(a, target, eps))
    }

    /// Row-mean of |a_r - t_r|^2 / max(|t_r|^2, eps).
    pub fn nmse(&mut self, a: Var, target: Mat, eps: f64) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), target.shape(), "nmse shape");
        let denom: Vec<f64> = (0..target.rows).map(|r| target.row(r).iter().map(|v| v * v).sum::<f64>().max(eps)).collect();
        let mut s = 0.0;
        for r in 0..x.rows {
            let e: f64 = x.row(r).iter().zip(target.row(r)).map(|(p, q)| (p - q) * (p - q)).sum();
            s += e / denom[r];
        }
        let v = s / x.rows as f64;
        self.push(Mat::from_vec(1, 1, vec![v]), Op::Nmse(a, target, denom))
    }

    /// Mean over `entries` of (a[r, c] - t)^2.
    pub fn gather_sq_err(&mut self, a: Var, entries: Vec<(usize, usize, f64)>) -> Var {
        let x = self.value(a);
        let v = entries.iter().map(|(r, c, t)| (x.at(*r, *c) - t).powi(2)).sum::<f64>() / entries.len() as f64;
        self.push(Mat::from_vec(1, 1, vec![v]), Op::GatherSqErr(a, entries))
    }

    /// sum_k w_k x_k over 1 x 1 inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v = terms.iter().map(|(x, w)| w * self.value(*x).scalar()).sum();
        self.push(Mat::from_vec(1, 1, vec![v]), Op::WeightedSum(terms.to_vec()))
    }

    /// Gradients of the 1 x 1 node `loss` with respect to every parameter in
    /// the store (zeros for parameters the pass did not touch).
    pub fn backward(&self, loss: Var) -> Vec<Mat> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut out = self.params.zeros_like();
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let acc = |v: Var, d: Mat, grads: &mut Vec<Option<Mat>>| match &mut grads[v.0] {
                Some(m) => m.add_assign(&d),
                slot => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Mat::zeros(av.rows, av.cols);
                    matmul_nt_acc(&g, bv, &mut ga);
                    let mut gb = Mat::zeros(bv.rows, bv.cols);
                    matmul_tn_acc(av, &g, &mut gb);
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::MatMulNT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Mat::zeros(av.rows, av.cols);
                    matmul_acc(&g, bv, &mut ga);
                    let mut gb = Mat::zeros(bv.rows, bv.cols);
                    matmul_tn_acc(&g, av, &mut gb);
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Add(a, b) => {
                    acc(*b, g.clone(), &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::AddRow(a, b) => {
                    acc(*b, g.col_sums(), &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::MulRow(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = g.clone();
                    let mut gb = Mat::zeros(1, bv.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            *ga.at_mut(r, c) *= bv.data[c];
                            gb.data[c] += g.at(r, c) * av.at(r, c);
                        }
                    }
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Scale(a, s) => acc(*a, g.scaled(*s), &mut grads),
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let d = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&x.data).map(|(gv, xv)| gv * gelu_grad(*xv)).collect());
                    acc(*a, d, &mut grads);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().unwrap();
                    let d = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&y.data).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect());
                    acc(*a, d, &mut grads);
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut d = Mat::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum();
                        for c in 0..g.cols {
                            *d.at_mut(r, c) = y.at(r, c) * (g.at(r, c) - dot);
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = node.value.as_ref().unwrap();
                    let n = g.cols as f64;
                    let mut d = Mat::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let mg = g.row(r).iter().sum::<f64>() / n;
                        let mgy = g.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum::<f64>() / n;
                        for c in 0..g.cols {
                            *d.at_mut(r, c) = inv_std[r] * (g.at(r, c) - mg - y.at(r, c) * mgy);
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for p in parts {
                        let rows = self.value(*p).rows;
                        acc(*p, g.slice_rows(r0, r0 + rows), &mut grads);
                        r0 += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for p in parts {
                        let cols = self.value(*p).cols;
                        acc(*p, g.slice_cols(c0, c0 + cols), &mut grads);
                        c0 += cols;
                    }
                }
                Op::SliceRows(a, r0) => {
                    let x = self.value(*a);
                    let mut d = Mat::zeros(x.rows, x.cols);
                    d.data[r0 * x.cols..(r0 + g.rows) * x.cols].copy_from_slice(&g.data);
                    acc(*a, d, &mut grads);
                }
                Op::SliceCols(a, c0) => {
                    let x = self.value(*a);
                    let mut d = Mat::zeros(x.rows, x.cols);
                    for r in 0..g.rows {
                        d.row_mut(r)[*c0..c0 + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(*a, d, &mut grads);
                }
                Op::KlDiv(a, t, eps) => {
                    let q = self.value(*a);
                    let s = g.scalar() / q.rows as f64;
                    let d = Mat::from_vec(
                        q.rows,
                        q.cols,
                        q.data.iter().zip(&t.data).map(|(qv, pv)| if *pv > 0.0 && *qv > *eps { -s * pv / qv } else { 0.0 }).collect(),
                    );
                    acc(*a, d, &mut grads);
                }
                Op::Nmse(a, t, denom) => {
                    let x = self.value(*a);
                    let s = g.scalar() / x.rows as f64;
                    let mut d = Mat::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        for c in 0..x.cols {
                            *d.at_mut(r, c) = s * 2.0 * (x.at(r, c) - t.at(r, c)) / denom[r];
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::GatherSqErr(a, entries) => {
                    let x = self.value(*a);
                    let s = g.scalar() / entries.len() as f64;
                    let mut d = Mat::zeros(x.rows, x.cols);
                    for (r, c, t) in entries {
                        *d.at_mut(*r, *c) += s * 2.0 * (x.at(*r, *c) - t);
                    }
                    acc(*a, d, &mut grads);
                }
                Op::WeightedSum(terms) => {
                    for (x, w) in terms {
                        acc(*x, Mat::filled(1, 1, g.scalar() * w), &mut grads);
                    }
                }
            }
        }
        out
    }
}

/// Value-level KL used by both the tape op and the loss functions.
pub fn kl_rows_mean(q: &Mat, p: &Mat, eps: f64) -> f64 {
    assert_eq!(q.shape(), p.shape(), "kl shape");
    let mut s = 0.0;
    for (qv, pv) in q.data.iter().zip(&p.data) {
        if *pv > 0.0 {
            s += pv * (pv / qv.max(eps)).ln();
        }
    }
    s / q.rows as f64
}
