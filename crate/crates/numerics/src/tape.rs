//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every forward operation as a node holding its output
//! value. Node inputs always have smaller indices than the node itself, so a
//! single reverse sweep over the node list visits each node once after all of
//! its consumers.

use std::collections::HashMap;

use crate::error::{NumericsError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Slope of the negative half of [`Graph::leaky_relu`].
pub const LEAKY_SLOPE: f64 = 0.01;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    LeakyRelu(Var),
    Clamp(Var, f64, f64),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    SelectRows(Vec<bool>, Var, Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | AddRow(a, b) | Sub(a, b) | Mul(a, b) | MulCol(a, b) => {
                vec![*a, *b]
            }
            SelectRows(_, a, b) => vec![*a, *b],
            Scale(a, _)
            | AddScalar(a)
            | Tanh(a)
            | Sigmoid(a)
            | Softplus(a)
            | Exp(a)
            | LeakyRelu(a)
            | Clamp(a, _, _)
            | Slice(a, _, _)
            | Sum(a)
            | Mean(a)
            | SumCols(a) => {
                vec![*a]
            }
            Concat(v) => v.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// The tape. Rebuilt for every training step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
}

/// Gradients of a scalar loss with respect to every node on a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn check_finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(NumericsError::NonFinite(op))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(NumericsError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: &'static str, value: Tensor, rec: Op) -> Result<Var> {
        let value = check_finite(op, value)?;
        let id = self.nodes.len();
        if rec.inputs().iter().any(|i| i.0 >= id) {
            return Err(NumericsError::TapeOrder(id));
        }
        self.nodes.push(Node { value, op: rec });
        Ok(Var(id))
    }

    /// A non-trainable input.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf)
    }

    /// Brings a named parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push("param", value, Op::Leaf)?;
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        Ok(v)
    }

    /// Parameters touched by this graph, in first-use order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.param_order
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", out, Op::Add(a, b))
    }

    /// Adds a `[1, n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (_, n) = ta.dims2()?;
        if tr.shape() != [1, n] {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                lhs: ta.shape().to_vec(),
                rhs: tr.shape().to_vec(),
            });
        }
        let mut out = ta.clone();
        let bias = tr.data().to_vec();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(&bias) {
                *o += b;
            }
        }
        self.push("add_row", out, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b))
    }

    /// Scales row `i` of `a` by `col[i]`, where `col` is `[rows, 1]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        let (r, n) = ta.dims2()?;
        if tc.shape() != [r, 1] {
            return Err(NumericsError::ShapeMismatch {
                op: "mul_col",
                lhs: ta.shape().to_vec(),
                rhs: tc.shape().to_vec(),
            });
        }
        let mut out = ta.clone();
        for (i, chunk) in out.data_mut().chunks_mut(n).enumerate() {
            let s = tc.data()[i];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        self.push("mul_col", out, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * k);
        self.push("scale", out, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + k);
        self.push("add_scalar", out, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(softplus);
        self.push("softplus", out, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push("exp", out, Op::Exp(a))
    }

    pub fn leaky_relu(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .map(|x| if x > 0.0 { x } else { LEAKY_SLOPE * x });
        self.push("leaky_relu", out, Op::LeakyRelu(a))
    }

    /// Hard clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push("clamp", out, Op::Clamp(a, lo, hi))
    }

    /// Concatenates 2-D tensors with equal row counts along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(NumericsError::InvalidArgument("concat of nothing".into()));
        };
        let rows = self.value(*first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.value(*p).dims2()?;
            if r != rows {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    lhs: vec![rows],
                    rhs: vec![r],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        self.push("concat", out, Op::Concat(parts.to_vec()))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = ta.dims2()?;
        if start >= end || end > cols {
            return Err(NumericsError::InvalidArgument(format!(
                "slice {start}..{end} of {cols} columns"
            )));
        }
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&ta.row_slice(r)[start..end]);
        }
        let out = Tensor::new(vec![rows, end - start], data)?;
        self.push("slice", out, Op::Slice(a, start, end))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(NumericsError::InvalidArgument(
                "mean of empty tensor".into(),
            ));
        }
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push("mean", out, Op::Mean(a))
    }

    /// Row sums: `[rows, cols] -> [rows, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (rows, _) = ta.dims2()?;
        let data = (0..rows).map(|r| ta.row_slice(r).iter().sum()).collect();
        let out = Tensor::new(vec![rows, 1], data)?;
        self.push("sum_cols", out, Op::SumCols(a))
    }

    /// Row `i` comes from `on_true` where `mask[i]`, otherwise from `on_false`.
    pub fn select_rows(&mut self, mask: &[bool], on_true: Var, on_false: Var) -> Result<Var> {
        let (a, b) = (self.value(on_true), self.value(on_false));
        same_shape("select_rows", a, b)?;
        let (rows, _) = a.dims2()?;
        if mask.len() != rows {
            return Err(NumericsError::ShapeMismatch {
                op: "select_rows",
                lhs: vec![mask.len()],
                rhs: vec![rows],
            });
        }
        let mut data = Vec::with_capacity(a.len());
        for (r, &m) in mask.iter().enumerate() {
            data.extend_from_slice(if m { a.row_slice(r) } else { b.row_slice(r) });
        }
        let out = Tensor::new(a.shape().to_vec(), data)?;
        self.push(
            "select_rows",
            out,
            Op::SelectRows(mask.to_vec(), on_true, on_false),
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(NumericsError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            for input in node.op.inputs() {
                if input.0 >= id {
                    return Err(NumericsError::TapeOrder(id));
                }
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        fn acc(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        }
        let val = |v: Var| &self.nodes[v.0].value;

        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(grads, *a, g.matmul_t(val(*b)));
                acc(grads, *b, val(*a).t_matmul(g));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                let n = g.cols();
                let mut col_sums = vec![0.0; n];
                for chunk in g.data().chunks(n) {
                    for (s, v) in col_sums.iter_mut().zip(chunk) {
                        *s += v;
                    }
                }
                acc(grads, *row, Tensor::row(&col_sums));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                acc(grads, *b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::MulCol(a, col) => {
                let n = g.cols();
                let c = val(*col);
                let mut ga = g.clone();
                for (i, chunk) in ga.data_mut().chunks_mut(n).enumerate() {
                    let s = c.data()[i];
                    chunk.iter_mut().for_each(|v| *v *= s);
                }
                acc(grads, *a, ga);
                let ta = val(*a);
                let gc: Vec<f64> = g
                    .data()
                    .chunks(n)
                    .zip(ta.data().chunks(n))
                    .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                    .collect();
                acc(
                    grads,
                    *col,
                    Tensor::new(c.shape().to_vec(), gc).expect("col shape"),
                );
            }
            Op::Scale(a, k) => acc(grads, *a, g.map(|x| x * k)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::Tanh(a) => acc(grads, *a, g.zip_map(out, |gv, y| gv * (1.0 - y * y))),
            Op::Sigmoid(a) => acc(grads, *a, g.zip_map(out, |gv, y| gv * y * (1.0 - y))),
            Op::Softplus(a) => acc(grads, *a, g.zip_map(val(*a), |gv, x| gv * sigmoid(x))),
            Op::Exp(a) => acc(grads, *a, g.zip_map(out, |gv, y| gv * y)),
            Op::LeakyRelu(a) => acc(
                grads,
                *a,
                g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { gv * LEAKY_SLOPE }),
            ),
            Op::Clamp(a, lo, hi) => acc(
                grads,
                *a,
                g.zip_map(val(*a), |gv, x| if x >= *lo && x <= *hi { gv } else { 0.0 }),
            ),
            Op::Concat(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    let mut data = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        data.extend_from_slice(
                            &g.data()[r * total + offset..r * total + offset + w],
                        );
                    }
                    acc(
                        grads,
                        *p,
                        Tensor::new(vec![rows, w], data).expect("concat grad"),
                    );
                    offset += w;
                }
            }
            Op::Slice(a, start, end) => {
                let ta = val(*a);
                let (rows, cols) = (ta.rows(), ta.cols());
                let w = end - start;
                let mut ga = Tensor::zeros(ta.shape());
                for r in 0..rows {
                    ga.data_mut()[r * cols + start..r * cols + end]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                acc(grads, *a, ga);
            }
            Op::Sum(a) => acc(grads, *a, Tensor::full(val(*a).shape(), g.data()[0])),
            Op::Mean(a) => {
                let ta = val(*a);
                acc(
                    grads,
                    *a,
                    Tensor::full(ta.shape(), g.data()[0] / ta.len() as f64),
                );
            }
            Op::SumCols(a) => {
                let ta = val(*a);
                let cols = ta.cols();
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v, cols))
                    .collect();
                acc(
                    grads,
                    *a,
                    Tensor::new(ta.shape().to_vec(), data).expect("sum_cols grad"),
                );
            }
            Op::SelectRows(mask, t, f) => {
                let cols = g.cols();
                let mut gt = g.clone();
                let mut gf = g.clone();
                for (r, &m) in mask.iter().enumerate() {
                    let zero = if m { &mut gf } else { &mut gt };
                    zero.data_mut()[r * cols..(r + 1) * cols].fill(0.0);
                }
                acc(grads, *t, gt);
                acc(grads, *f, gf);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn closed_form_activations() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::row(&[0.0, -1.0])).unwrap();
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        let l = g.leaky_relu(z).unwrap();
        assert_eq!(g.value(l).data()[1], -0.01);
        let sp = g.softplus(z).unwrap();
        assert!((g.value(sp).data()[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn matmul_by_identity() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let i = g.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let p = g.matmul(a, i).unwrap();
        assert_eq!(g.value(p), g.value(a));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::row(&[1.0, 2.0, 3.0])).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn independent_parameter_gets_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::row(&[1.0])).unwrap();
        store.insert("p", Tensor::row(&[5.0])).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let _p = g.param(&store, "p").unwrap();
        let loss = g.sum(w).unwrap();
        let grads = g.backward(loss).unwrap();
        store.zero_grad();
        store.accumulate(&g, &grads).unwrap();
        assert_eq!(store.grad("p").unwrap().data(), &[0.0]);
        assert_eq!(store.grad("w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn param_is_memoised() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::row(&[1.0])).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, "w").unwrap();
        let b = g.param(&store, "w").unwrap();
        assert_eq!(a, b);
        assert_eq!(g.params().len(), 1);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(&[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(a), Err(NumericsError::NotScalar(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(&[1000.0])).unwrap();
        assert!(matches!(g.exp(a), Err(NumericsError::NonFinite("exp"))));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, a).is_err());
        assert!(g.select_rows(&[true], a, a).is_err());
    }

    #[test]
    fn select_rows_routes_gradient() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[1.0], &[2.0]])).unwrap();
        let b = g.constant(m(&[&[10.0], &[20.0]])).unwrap();
        let s = g.select_rows(&[true, false], a, b).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 20.0]);
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[0.0, 1.0]);
    }
}
