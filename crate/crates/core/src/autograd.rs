//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters live in a
//! [`ParamStore`] and enter the graph through [`Graph::param`]; only those
//! marked trainable on the graph get gradients, and nodes that do not depend
//! on a trainable parameter are skipped during the backward sweep.

use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter arrays. Names are unique and stable; they are the keys
/// used by the checkpoint format.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Ids whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.names
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Tanh,
    Sigmoid,
    LogSigmoid,
    Exp,
    Ln,
    Sqrt,
    Square,
    Recip,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::LogSigmoid => log_sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Recip => 1.0 / x,
        }
    }

    /// d out / d in, given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::LogSigmoid => sigmoid(-x),
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
            Unary::Recip => -y * y,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without underflow for large negative `x`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a[n,c] + b[1,c]`
    AddRow(Var, Var),
    /// `a[n,c] * b[1,c]`
    MulRow(Var, Var),
    /// `a[n,c] + b[n,1]`
    AddCol(Var, Var),
    /// `a[n,c] * b[n,1]`
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SumAll(Var),
    /// sum over columns, `n×1`
    SumRows(Var),
    /// sum over rows, `1×c`
    SumCols(Var),
    Transpose(Var),
    GatherFlat(Var, Rc<Vec<usize>>),
    GatherRows(Var, Rc<Vec<usize>>),
    RowSelect(Var, Rc<Vec<usize>>),
    GroupMatMul(Var, Var, Rc<Vec<usize>>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    KthLargest(Var, Rc<Vec<usize>>),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// A single forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    trainable: Option<Rc<Vec<bool>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph where every parameter is trainable.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            trainable: None,
        }
    }

    /// A graph where only parameters flagged in `mask` (indexed by
    /// `ParamId`) receive gradients.
    pub fn with_trainable(mask: Rc<Vec<bool>>) -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            trainable: Some(mask),
        }
    }

    /// A graph that tracks no gradients at all (inference).
    pub fn inference() -> Self {
        Self::with_trainable(Rc::new(Vec::new()))
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient; used by tests to differentiate with
    /// respect to inputs.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let needs = match &self.trainable {
            None => true,
            Some(mask) => mask.get(id.0).copied().unwrap_or(false),
        };
        let v = self.push(store.get(id).clone(), Op::Leaf, needs);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    fn binary_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let v = self.value(a).zip_map(self.value(b), f);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (n, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row: bias must be 1x{c}");
        let mut v = self.value(a).clone();
        let r = &self.value(row).data;
        for i in 0..n {
            for (x, b) in v.row_mut(i).iter_mut().zip(r) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (n, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row: scale must be 1x{c}");
        let mut v = self.value(a).clone();
        let r = &self.value(row).data;
        for i in 0..n {
            for (x, b) in v.row_mut(i).iter_mut().zip(r) {
                *x *= b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::MulRow(a, row), ng)
    }

    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (n, _) = self.shape(a);
        assert_eq!(self.shape(col), (n, 1), "add_col: column must be {n}x1");
        let mut v = self.value(a).clone();
        for i in 0..n {
            let s = self.value(col).data[i];
            v.row_mut(i).iter_mut().for_each(|x| *x += s);
        }
        let ng = self.ng(a) || self.ng(col);
        self.push(v, Op::AddCol(a, col), ng)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (n, _) = self.shape(a);
        assert_eq!(self.shape(col), (n, 1), "mul_col: column must be {n}x1");
        let mut v = self.value(a).clone();
        for i in 0..n {
            let s = self.value(col).data[i];
            v.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        let ng = self.ng(a) || self.ng(col);
        self.push(v, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let v = self.value(a).map(|x| f.apply(x));
        let ng = self.ng(a);
        self.push(v, Op::Unary(a, f), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::LogSigmoid)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for i in 0..v.rows {
            softmax_in_place(v.row_mut(i));
        }
        let ng = self.ng(a);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for i in 0..v.rows {
            let row = v.row_mut(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let ng = self.ng(a);
        self.push(v, Op::LogSoftmaxRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Mat::from_vec(
            m.rows,
            1,
            (0..m.rows).map(|i| m.row(i).iter().sum()).collect(),
        );
        let ng = self.ng(a);
        self.push(v, Op::SumRows(a), ng)
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = vec![0.0; m.cols];
        for i in 0..m.rows {
            for (o, x) in out.iter_mut().zip(m.row(i)) {
                *o += x;
            }
        }
        let v = Mat::from_vec(1, m.cols, out);
        let ng = self.ng(a);
        self.push(v, Op::SumCols(a), ng)
    }

    pub fn mean_cols(&mut self, a: Var) -> Var {
        let n = self.value(a).rows as f64;
        let s = self.sum_cols(a);
        self.scale(s, 1.0 / n)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    /// `out.data[k] = a.data[index[k]]`, reshaped to `rows × cols`. Covers
    /// reshapes, axis permutations and replication.
    pub fn gather_flat(&mut self, a: Var, index: Rc<Vec<usize>>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather_flat: index length");
        let src = &self.value(a).data;
        let v = Mat::from_vec(rows, cols, index.iter().map(|&k| src[k]).collect());
        let ng = self.ng(a);
        self.push(v, Op::GatherFlat(a, index), ng)
    }

    /// Pure reshape (row-major order unchanged).
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let n = self.value(a).len();
        assert_eq!(n, rows * cols, "reshape: element count");
        let idx = Rc::new((0..n).collect());
        self.gather_flat(a, idx, rows, cols)
    }

    /// `out[i,:] = a[index[i],:]`
    pub fn gather_rows(&mut self, a: Var, index: Rc<Vec<usize>>) -> Var {
        let m = self.value(a);
        let mut out = Mat::zeros(index.len(), m.cols);
        for (i, &r) in index.iter().enumerate() {
            out.row_mut(i).copy_from_slice(m.row(r));
        }
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, index), ng)
    }

    /// `out[i,0] = a[i, cols[i]]`
    pub fn row_select(&mut self, a: Var, cols: Rc<Vec<usize>>) -> Var {
        let m = self.value(a);
        assert_eq!(cols.len(), m.rows, "row_select: one column per row");
        let v = Mat::from_vec(
            m.rows,
            1,
            cols.iter().enumerate().map(|(i, &c)| m.get(i, c)).collect(),
        );
        let ng = self.ng(a);
        self.push(v, Op::RowSelect(a, cols), ng)
    }

    /// The `k`-th largest entry of each row, as an `n×1` column. The gradient
    /// flows to the selected entry.
    pub fn kth_largest_rows(&mut self, a: Var, k: usize) -> Var {
        let m = self.value(a);
        assert!(
            k >= 1 && k <= m.cols,
            "kth_largest_rows: k={k} out of 1..={}",
            m.cols
        );
        let mut idx = Vec::with_capacity(m.rows);
        let mut order: Vec<usize> = Vec::with_capacity(m.cols);
        for i in 0..m.rows {
            let row = m.row(i);
            order.clear();
            order.extend(0..m.cols);
            order.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
            idx.push(order[k - 1]);
        }
        let idx = Rc::new(idx);
        let v = Mat::from_vec(
            m.rows,
            1,
            idx.iter().enumerate().map(|(i, &c)| m.get(i, c)).collect(),
        );
        let ng = self.ng(a);
        self.push(v, Op::KthLargest(a, idx), ng)
    }

    /// Row-grouped product: `out[i,:] = x[i,:] · r_{group[i]}` where
    /// `r` stacks `G` blocks of shape `k×c` vertically (`G·k × c`).
    pub fn group_matmul(&mut self, x: Var, r: Var, group: Rc<Vec<usize>>) -> Var {
        let (n, k) = self.shape(x);
        let (gk, c) = self.shape(r);
        assert_eq!(group.len(), n, "group_matmul: one group per row");
        assert_eq!(gk % k, 0, "group_matmul: stacked blocks must have {k} rows");
        let xm = &self.value(x).data;
        let rm = &self.value(r).data;
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let g = group[i];
            assert!((g + 1) * k <= gk, "group_matmul: group {g} out of range");
            matmul_into(
                &xm[i * k..(i + 1) * k],
                &rm[g * k * c..(g + 1) * k * c],
                &mut out[i * c..(i + 1) * c],
                1,
                k,
                c,
            );
        }
        let ng = self.ng(x) || self.ng(r);
        self.push(Mat::from_vec(n, c, out), Op::GroupMatMul(x, r, group), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Mat::zeros(n, total);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows, n, "concat_cols: row mismatch");
            for i in 0..n {
                out.row_mut(i)[off..off + m.cols].copy_from_slice(m.row(i));
            }
            off += m.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice_cols(start, end);
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    /// Reverse sweep from a scalar node. Returns gradients for every
    /// gradient-tracking node that was reached.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut by_param = HashMap::new();
        for (&pid, &var) in &self.param_nodes {
            if let Some(g) = grads[var.0].take() {
                if self.nodes[var.0].needs_grad {
                    by_param.insert(pid, g);
                }
            }
        }
        Gradients {
            nodes: grads,
            by_param,
        }
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut ga = vec![0.0; av.len()];
                    matmul_nt_into(&g.data, &bv.data, &mut ga, av.rows, bv.cols, bv.rows);
                    accum(grads, *a, Mat::from_vec(av.rows, av.cols, ga));
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; bv.len()];
                    matmul_tn_into(&av.data, &g.data, &mut gb, av.rows, av.cols, bv.cols);
                    accum(grads, *b, Mat::from_vec(bv.rows, bv.cols, gb));
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accum(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accum(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    accum(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    accum(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, r) => {
                if self.ng(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.ng(*r) {
                    accum(grads, *r, col_sums(g));
                }
            }
            Op::MulRow(a, r) => {
                let rv = self.value(*r);
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows {
                        for (x, s) in ga.row_mut(i).iter_mut().zip(&rv.data) {
                            *x *= s;
                        }
                    }
                    accum(grads, *a, ga);
                }
                if self.ng(*r) {
                    accum(
                        grads,
                        *r,
                        col_sums(&g.zip_map(self.value(*a), |x, y| x * y)),
                    );
                }
            }
            Op::AddCol(a, c) => {
                if self.ng(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.ng(*c) {
                    accum(grads, *c, row_sums(g));
                }
            }
            Op::MulCol(a, c) => {
                let cv = self.value(*c);
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows {
                        let s = cv.data[i];
                        ga.row_mut(i).iter_mut().for_each(|x| *x *= s);
                    }
                    accum(grads, *a, ga);
                }
                if self.ng(*c) {
                    accum(
                        grads,
                        *c,
                        row_sums(&g.zip_map(self.value(*a), |x, y| x * y)),
                    );
                }
            }
            Op::Scale(a, s) => accum(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => accum(grads, *a, g.clone()),
            Op::Unary(a, f) => {
                let x = self.value(*a);
                let ga = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&x.data)
                        .zip(&out.data)
                        .map(|((&gi, &xi), &yi)| gi * f.deriv(xi, yi))
                        .collect(),
                );
                accum(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Mat::zeros(g.rows, g.cols);
                for i in 0..g.rows {
                    let y = out.row(i);
                    let gr = g.row(i);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yi), &gi) in ga.row_mut(i).iter_mut().zip(y).zip(gr) {
                        *o = yi * (gi - dot);
                    }
                }
                accum(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Mat::zeros(g.rows, g.cols);
                for i in 0..g.rows {
                    let y = out.row(i);
                    let gr = g.row(i);
                    let gs: f64 = gr.iter().sum();
                    for ((o, &yi), &gi) in ga.row_mut(i).iter_mut().zip(y).zip(gr) {
                        *o = gi - yi.exp() * gs;
                    }
                }
                accum(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                accum(grads, *a, Mat::filled(r, c, g.item()));
            }
            Op::SumRows(a) => {
                let (r, c) = self.shape(*a);
                let mut ga = Mat::zeros(r, c);
                for i in 0..r {
                    let s = g.data[i];
                    ga.row_mut(i).iter_mut().for_each(|x| *x = s);
                }
                accum(grads, *a, ga);
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                let mut ga = Mat::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i).copy_from_slice(&g.data);
                }
                accum(grads, *a, ga);
            }
            Op::Transpose(a) => accum(grads, *a, g.transpose()),
            Op::GatherFlat(a, index) => {
                let (r, c) = self.shape(*a);
                let mut ga = Mat::zeros(r, c);
                for (k, &src) in index.iter().enumerate() {
                    ga.data[src] += g.data[k];
                }
                accum(grads, *a, ga);
            }
            Op::GatherRows(a, index) => {
                let (r, c) = self.shape(*a);
                let mut ga = Mat::zeros(r, c);
                for (i, &src) in index.iter().enumerate() {
                    for (o, x) in ga.row_mut(src).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                accum(grads, *a, ga);
            }
            Op::RowSelect(a, cols) | Op::KthLargest(a, cols) => {
                let (r, c) = self.shape(*a);
                let mut ga = Mat::zeros(r, c);
                for (i, &col) in cols.iter().enumerate() {
                    ga.data[i * c + col] += g.data[i];
                }
                accum(grads, *a, ga);
            }
            Op::GroupMatMul(x, r, group) => {
                let (xv, rv) = (self.value(*x), self.value(*r));
                let (n, k) = xv.shape();
                let c = rv.cols;
                if self.ng(*x) {
                    let mut gx = vec![0.0; n * k];
                    for i in 0..n {
                        let gi = group[i];
                        matmul_nt_into(
                            &g.data[i * c..(i + 1) * c],
                            &rv.data[gi * k * c..(gi + 1) * k * c],
                            &mut gx[i * k..(i + 1) * k],
                            1,
                            c,
                            k,
                        );
                    }
                    accum(grads, *x, Mat::from_vec(n, k, gx));
                }
                if self.ng(*r) {
                    let mut gr = vec![0.0; rv.len()];
                    for i in 0..n {
                        let gi = group[i];
                        matmul_tn_into(
                            &xv.data[i * k..(i + 1) * k],
                            &g.data[i * c..(i + 1) * c],
                            &mut gr[gi * k * c..(gi + 1) * k * c],
                            1,
                            k,
                            c,
                        );
                    }
                    accum(grads, *r, Mat::from_vec(rv.rows, c, gr));
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.ng(p) {
                        accum(grads, p, g.slice_cols(off, off + w));
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let mut ga = Mat::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[*start..*start + g.cols].copy_from_slice(g.row(i));
                }
                accum(grads, *a, ga);
            }
        }
    }
}

fn accum(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn col_sums(g: &Mat) -> Mat {
    let mut out = vec![0.0; g.cols];
    for i in 0..g.rows {
        for (o, x) in out.iter_mut().zip(g.row(i)) {
            *o += x;
        }
    }
    Mat::from_vec(1, g.cols, out)
}

fn row_sums(g: &Mat) -> Mat {
    Mat::from_vec(
        g.rows,
        1,
        (0..g.rows).map(|i| g.row(i).iter().sum()).collect(),
    )
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
}

pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    by_param: HashMap<ParamId, Mat>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.by_param.get(&id)
    }

    /// Gradient of an input created with [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Mat, f: &dyn Fn(&Mat) -> f64) -> Mat {
        let h = 1e-6;
        let mut g = Mat::zeros(x.rows, x.cols);
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data[i] += h;
            let mut m = x.clone();
            m.data[i] -= h;
            g.data[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn check(x: Mat, build: impl Fn(&mut Graph, Var) -> Var) {
        let f = |m: &Mat| {
            let mut g = Graph::new();
            let v = g.constant(m.clone());
            let out = build(&mut g, v);
            g.value(out).item()
        };
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let out = build(&mut g, v);
        let grads = g.backward(out);
        let analytic = grads.wrt(v).unwrap();
        let numeric = numeric_grad(&x, &f);
        for (a, n) in analytic.data.iter().zip(&numeric.data) {
            assert!(
                (a - n).abs() <= 1e-6 * (1.0 + n.abs()),
                "analytic {a} vs numeric {n}"
            );
        }
    }

    fn rand_mat(r: usize, c: usize, seed: u64) -> Mat {
        Mat::randn(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn matmul_and_broadcast_grads() {
        let w = rand_mat(4, 3, 1);
        let b = rand_mat(1, 3, 2);
        check(rand_mat(5, 4, 3), |g, x| {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let h = g.matmul(x, wv);
            let h = g.add_row(h, bv);
            let h = g.gelu(h);
            let s = g.square(h);
            g.sum_all(s)
        });
    }

    #[test]
    fn softmax_and_log_softmax_grads() {
        let w = rand_mat(3, 4, 7);
        check(rand_mat(3, 4, 4), |g, x| {
            let s = g.softmax_rows(x);
            let wv = g.constant(w.clone());
            let p = g.mul(s, wv);
            let l = g.log_softmax_rows(x);
            let q = g.mul(l, wv);
            let a = g.sum_all(p);
            let b = g.sum_all(q);
            g.add(a, b)
        });
    }

    #[test]
    fn unary_grads() {
        for f in [
            Unary::Tanh,
            Unary::Sigmoid,
            Unary::LogSigmoid,
            Unary::Exp,
            Unary::Square,
        ] {
            check(rand_mat(2, 3, 9), move |g, x| {
                let y = g.unary(x, f);
                g.sum_all(y)
            });
        }
        let pos = rand_mat(2, 3, 10).map(|v| v.abs() + 0.5);
        for f in [Unary::Ln, Unary::Sqrt, Unary::Recip] {
            check(pos.clone(), move |g, x| {
                let y = g.unary(x, f);
                let y = g.square(y);
                g.sum_all(y)
            });
        }
    }

    #[test]
    fn structural_op_grads() {
        let r = rand_mat(6, 2, 11);
        check(rand_mat(4, 3, 12), |g, x| {
            let t = g.transpose(x);
            let rows = g.gather_rows(t, Rc::new(vec![2, 0, 0, 1]));
            let flat = g.gather_flat(rows, Rc::new(vec![0, 5, 11, 3, 3, 7]), 2, 3);
            let sel = g.row_select(x, Rc::new(vec![0, 2, 1, 1]));
            let kth = g.kth_largest_rows(x, 2);
            let both = g.concat_cols(&[sel, kth]);
            let sl = g.slice_cols(x, 1, 3);
            let rv = g.constant(r.clone());
            let gm = g.group_matmul(sl, rv, Rc::new(vec![2, 0, 1, 2]));
            let a = g.sum_all(flat);
            let bsq = g.square(both);
            let b = g.sum_all(bsq);
            let gsq = g.square(gm);
            let c = g.sum_all(gsq);
            let ab = g.add(a, b);
            g.add(ab, c)
        });
    }

    #[test]
    fn row_and_col_broadcast_grads() {
        let col = rand_mat(3, 1, 20);
        check(rand_mat(3, 4, 21), |g, x| {
            let c = g.constant(col.clone());
            let rs = g.sum_rows(x);
            let cs = g.mean_cols(x);
            let a = g.mul_col(x, rs);
            let b = g.mul_row(a, cs);
            let d = g.add_col(b, c);
            let e = g.sub(d, x);
            let e = g.add_scalar(e, 0.3);
            let e = g.scale(e, 0.5);
            let sq = g.square(e);
            g.sum_all(sq)
        });
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Mat::filled(2, 2, 1.0));
        let b = store.add("b", Mat::filled(2, 2, 2.0));
        let mut g = Graph::with_trainable(Rc::new(vec![true, false]));
        let av = g.param(&store, a);
        let bv = g.param(&store, b);
        let p = g.matmul(av, bv);
        let s = g.sum_all(p);
        let grads = g.backward(s);
        assert!(grads.param(a).is_some());
        assert!(grads.param(b).is_none());
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(-2.0e4) + 2.0e4).abs() < 1e-9);
        assert!(log_sigmoid(50.0).abs() < 1e-20);
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
    }
}
