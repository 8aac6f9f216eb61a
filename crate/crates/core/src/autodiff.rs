//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse. Parameters live in a [`ParamStore`] and are copied
//! onto the tape as leaves, so the store is never mutated during a pass.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix shape {rows}x{cols} vs {} values", data.len());
        Self { rows, cols, data }
    }

    pub fn column(values: Vec<f64>) -> Self {
        Self { rows: values.len(), cols: 1, data: values }
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul {:?} x {:?}", self.shape(), other.shape());
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(self, false, other, false, &mut out, 0.0);
        out
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        debug_assert_eq!(self.shape(), other.shape());
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

/// `c = op(a)·op(b) + beta·c` with optional transposes.
fn gemm(a: &Matrix, ta: bool, b: &Matrix, tb: bool, c: &mut Matrix, beta: f64) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.data.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides and dimensions describe the owned buffers exactly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

pub fn log_softplus(x: f64) -> f64 {
    if x < -30.0 {
        x
    } else {
        softplus(x).ln()
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Huber loss with threshold `delta`.
pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LogSoftplus(Var),
    Sigmoid(Var),
    Gather(Var, Rc<[usize]>),
    ScatterAdd(Var, Rc<[usize]>),
    GroupSum(Var, usize),
    RepeatCols(Var, usize),
    Concat(Vec<Var>),
    Slice(Var, usize),
    SegmentSoftmax(Var, Rc<[usize]>, usize),
    Huber(Var, Rc<[f64]>, Rc<[f64]>, f64),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Recorded forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.params[id.0].value.clone(), Op::Param(id.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// Adds the 1×m row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.rows, 1);
        assert_eq!(av.cols, bv.cols, "add_row width");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (x, y) in out.data[r * out.cols..(r + 1) * out.cols].iter_mut().zip(&bv.data) {
                *x += y;
            }
        }
        self.push(out, Op::AddRow(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes");
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Multiplies every entry of `a` by the 1×1 variable `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).shape(), (1, 1));
        let k = self.value(s).data[0];
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::ScaleBy(a, s))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn log_softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(log_softplus);
        self.push(v, Op::LogSoftplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// Row `k` of the output is row `idx[k]` of `a`.
    pub fn gather(&mut self, a: Var, idx: Rc<[usize]>) -> Var {
        let av = self.value(a);
        let c = av.cols;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(av.row(i));
        }
        self.push(Matrix::from_vec(idx.len(), c, data), Op::Gather(a, idx))
    }

    /// Sums row `k` of `a` into output row `idx[k]`; output has `rows` rows.
    pub fn scatter_add(&mut self, a: Var, idx: Rc<[usize]>, rows: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows, idx.len());
        let c = av.cols;
        let mut out = Matrix::zeros(rows, c);
        for (k, &i) in idx.iter().enumerate() {
            for (x, y) in out.data[i * c..(i + 1) * c].iter_mut().zip(av.row(k)) {
                *x += y;
            }
        }
        self.push(out, Op::ScatterAdd(a, idx))
    }

    /// Sums consecutive blocks of columns: n×(g·w) to n×g.
    pub fn group_sum(&mut self, a: Var, groups: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.cols % groups, 0);
        let w = av.cols / groups;
        let mut out = Matrix::zeros(av.rows, groups);
        for r in 0..av.rows {
            let row = av.row(r);
            for g in 0..groups {
                out.data[r * groups + g] = row[g * w..(g + 1) * w].iter().sum();
            }
        }
        self.push(out, Op::GroupSum(a, groups))
    }

    /// Repeats each column `times` times in place: n×g to n×(g·times).
    pub fn repeat_cols(&mut self, a: Var, times: usize) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(av.rows, av.cols * times);
        for r in 0..av.rows {
            for g in 0..av.cols {
                let v = av.data[r * av.cols + g];
                for t in 0..times {
                    out.data[r * out.cols + g * times + t] = v;
                }
            }
        }
        self.push(out, Op::RepeatCols(a, times))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat rows");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols);
        let mut out = Matrix::zeros(av.rows, len);
        for r in 0..av.rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(out, Op::Slice(a, start))
    }

    /// Column-wise softmax over the rows sharing a segment id.
    pub fn segment_softmax(&mut self, a: Var, seg: Rc<[usize]>, n_seg: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows, seg.len());
        let c = av.cols;
        let mut mx = vec![f64::NEG_INFINITY; n_seg * c];
        for (k, &s) in seg.iter().enumerate() {
            for h in 0..c {
                let v = av.data[k * c + h];
                if v > mx[s * c + h] {
                    mx[s * c + h] = v;
                }
            }
        }
        let mut out = Matrix::zeros(av.rows, c);
        let mut sum = vec![0.0; n_seg * c];
        for (k, &s) in seg.iter().enumerate() {
            for h in 0..c {
                let e = (av.data[k * c + h] - mx[s * c + h]).exp();
                out.data[k * c + h] = e;
                sum[s * c + h] += e;
            }
        }
        for (k, &s) in seg.iter().enumerate() {
            for h in 0..c {
                out.data[k * c + h] /= sum[s * c + h];
            }
        }
        self.push(out, Op::SegmentSoftmax(a, seg, n_seg))
    }

    /// `Σ_k w_k · huber(pred_k − target_k, delta)` for an n×1 `pred`.
    pub fn huber_loss(&mut self, pred: Var, target: Rc<[f64]>, weights: Rc<[f64]>, delta: f64) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.cols, 1);
        assert_eq!(pv.rows, target.len());
        assert_eq!(pv.rows, weights.len());
        let loss: f64 = pv
            .data
            .iter()
            .zip(target.iter())
            .zip(weights.iter())
            .map(|((p, t), w)| w * huber(p - t, delta))
            .sum();
        self.push(Matrix::scalar(loss), Op::Huber(pred, target, weights, delta))
    }

    /// Gradients of the 1×1 node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut g: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(Matrix::scalar(1.0));
        for k in (0..=loss.0).rev() {
            let Some(gk) = g[k].take() else { continue };
            let node = &self.nodes[k];
            match &node.op {
                Op::Input | Op::Param(_) => {
                    g[k] = Some(gk);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Matrix::zeros(av.rows, av.cols);
                    gemm(&gk, false, bv, true, &mut ga, 0.0);
                    let mut gb = Matrix::zeros(bv.rows, bv.cols);
                    gemm(av, true, &gk, false, &mut gb, 0.0);
                    acc(&mut g, *a, ga);
                    acc(&mut g, *b, gb);
                }
                Op::AddRow(a, b) => {
                    let mut gb = Matrix::zeros(1, gk.cols);
                    for r in 0..gk.rows {
                        for (x, y) in gb.data.iter_mut().zip(gk.row(r)) {
                            *x += y;
                        }
                    }
                    acc(&mut g, *b, gb);
                    acc(&mut g, *a, gk);
                }
                Op::Add(a, b) => {
                    acc(&mut g, *b, gk.clone());
                    acc(&mut g, *a, gk);
                }
                Op::Sub(a, b) => {
                    acc(&mut g, *b, gk.map(|x| -x));
                    acc(&mut g, *a, gk);
                }
                Op::Mul(a, b) => {
                    let ga = gk.zip(self.value(*b), |x, y| x * y);
                    let gb = gk.zip(self.value(*a), |x, y| x * y);
                    acc(&mut g, *a, ga);
                    acc(&mut g, *b, gb);
                }
                Op::ScaleBy(a, s) => {
                    let k = self.value(*s).data[0];
                    let gs: f64 = gk.data.iter().zip(&self.value(*a).data).map(|(x, y)| x * y).sum();
                    acc(&mut g, *s, Matrix::scalar(gs));
                    acc(&mut g, *a, gk.map(|x| x * k));
                }
                Op::Scale(a, k) => acc(&mut g, *a, gk.map(|x| x * k)),
                Op::Relu(a) => {
                    let ga = gk.zip(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                    acc(&mut g, *a, ga);
                }
                Op::LogSoftplus(a) => {
                    // d/dx log(softplus(x)) = sigmoid(x) / softplus(x)
                    let ga = gk.zip(self.value(*a), |x, y| {
                        if y < -30.0 {
                            x
                        } else {
                            x * sigmoid(y) / softplus(y)
                        }
                    });
                    acc(&mut g, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = gk.zip(&node.value, |x, s| x * s * (1.0 - s));
                    acc(&mut g, *a, ga);
                }
                Op::Gather(a, idx) => {
                    let av = self.value(*a);
                    let c = av.cols;
                    let mut ga = Matrix::zeros(av.rows, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for (x, y) in ga.data[i * c..(i + 1) * c].iter_mut().zip(gk.row(k)) {
                            *x += y;
                        }
                    }
                    acc(&mut g, *a, ga);
                }
                Op::ScatterAdd(a, idx) => {
                    let c = gk.cols;
                    let mut data = Vec::with_capacity(idx.len() * c);
                    for &i in idx.iter() {
                        data.extend_from_slice(gk.row(i));
                    }
                    acc(&mut g, *a, Matrix::from_vec(idx.len(), c, data));
                }
                Op::GroupSum(a, groups) => {
                    let av = self.value(*a);
                    let w = av.cols / groups;
                    let mut ga = Matrix::zeros(av.rows, av.cols);
                    for r in 0..av.rows {
                        for gi in 0..*groups {
                            let v = gk.data[r * groups + gi];
                            ga.data[r * av.cols + gi * w..r * av.cols + (gi + 1) * w].fill(v);
                        }
                    }
                    acc(&mut g, *a, ga);
                }
                Op::RepeatCols(a, times) => {
                    let av = self.value(*a);
                    let mut ga = Matrix::zeros(av.rows, av.cols);
                    for r in 0..av.rows {
                        for gi in 0..av.cols {
                            let s: f64 = (0..*times).map(|t| gk.data[r * gk.cols + gi * times + t]).sum();
                            ga.data[r * av.cols + gi] = s;
                        }
                    }
                    acc(&mut g, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols;
                        let mut gp = Matrix::zeros(gk.rows, w);
                        for r in 0..gk.rows {
                            gp.data[r * w..(r + 1) * w].copy_from_slice(&gk.row(r)[off..off + w]);
                        }
                        acc(&mut g, p, gp);
                        off += w;
                    }
                }
                Op::Slice(a, start) => {
                    let av = self.value(*a);
                    let mut ga = Matrix::zeros(av.rows, av.cols);
                    for r in 0..av.rows {
                        ga.data[r * av.cols + start..r * av.cols + start + gk.cols].copy_from_slice(gk.row(r));
                    }
                    acc(&mut g, *a, ga);
                }
                Op::SegmentSoftmax(a, seg, n_seg) => {
                    let y = &node.value;
                    let c = y.cols;
                    let mut dot = vec![0.0; n_seg * c];
                    for (k, &s) in seg.iter().enumerate() {
                        for h in 0..c {
                            dot[s * c + h] += gk.data[k * c + h] * y.data[k * c + h];
                        }
                    }
                    let mut ga = Matrix::zeros(y.rows, c);
                    for (k, &s) in seg.iter().enumerate() {
                        for h in 0..c {
                            ga.data[k * c + h] = y.data[k * c + h] * (gk.data[k * c + h] - dot[s * c + h]);
                        }
                    }
                    acc(&mut g, *a, ga);
                }
                Op::Huber(pred, target, weights, delta) => {
                    let up = gk.data[0];
                    let pv = self.value(*pred);
                    let data = pv
                        .data
                        .iter()
                        .zip(target.iter())
                        .zip(weights.iter())
                        .map(|((p, t), w)| up * w * (p - t).clamp(-delta, *delta))
                        .collect();
                    acc(&mut g, *pred, Matrix::from_vec(pv.rows, 1, data));
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(k, n)| match n.op {
                Op::Param(id) => Some((id, k)),
                _ => None,
            })
            .collect();
        Grads { grads: g, params }
    }
}

fn acc(g: &mut [Option<Matrix>], v: Var, m: Matrix) {
    match &mut g[v.0] {
        Some(existing) => existing.add_assign(&m),
        slot @ None => *slot = Some(m),
    }
}

pub struct Grads {
    grads: Vec<Option<Matrix>>,
    params: Vec<(usize, usize)>,
}

impl Grads {
    /// Gradient of a leaf (input or parameter) node.
    pub fn of(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient per parameter of `store`, summed over repeated uses; zeros if unused.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Matrix> {
        let mut out: Vec<Matrix> = store.params.iter().map(|p| Matrix::zeros(p.value.rows, p.value.cols)).collect();
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                out[id].add_assign(g);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
}

/// Named weight tensors of a model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.params.push(Param { name: name.into(), value });
        ParamId(self.params.len() - 1)
    }

    /// Glorot-uniform weights.
    pub fn add_glorot(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.add(name, Matrix::from_vec(rows, cols, data))
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Affine map `x·W + b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let w = store.add_glorot(format!("{name}.w"), inp, out, rng);
        let b = bias.then(|| store.add(format!("{name}.b"), Matrix::zeros(1, out)));
        Self { w, b }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.w).data.fill(0.0);
        if let Some(b) = self.b {
            store.get_mut(b).data.fill(0.0);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update of every parameter in `store`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Matrix]) {
        if self.m.len() != store.len() {
            self.m = store.params.iter().map(|p| vec![0.0; p.value.data.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in store.params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for k in 0..g.data.len() {
                let gk = g.data[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / b1t;
                let vh = v[k] / b2t;
                p.value.data[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
