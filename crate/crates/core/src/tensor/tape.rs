//! Reverse-mode tape over a fixed set of matrix operations.
//!
//! A [`Tape`] is built fresh for every forward pass. Parameters enter through
//! [`Tape::param`], which copies the current value out of a [`ParamStore`] and
//! remembers where the gradient must go; everything else is a constant leaf or
//! the output of a recorded op. [`Tape::backward`] walks the nodes once, in
//! reverse creation order, and writes gradients into the store.

use std::sync::Arc;

use super::dense::{matmul_into, matmul_into_f32, softmax_in_place, Tensor};
use super::optim::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Compute precision for every value and gradient produced on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    /// Reduced compute type: matmuls accumulate in `f32` and every op output
    /// is rounded to the nearest `f32`.
    F32,
}

impl Precision {
    #[inline]
    fn round(self, v: f64) -> f64 {
        match self {
            Precision::F64 => v,
            Precision::F32 => v as f32 as f64,
        }
    }

    fn round_all(self, data: &mut [f64]) {
        if self == Precision::F32 {
            for v in data {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// A frozen right-hand matmul operand whose full-precision form is produced on
/// demand (for example, by dequantizing stored codes).
///
/// The tape never keeps the materialized matrix: it is rebuilt in the forward
/// pass and again in the backward pass, and dropped after each use.
pub trait FrozenWeight: Send + Sync + std::fmt::Debug {
    fn shape(&self) -> (usize, usize);
    fn materialize(&self) -> Tensor;
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    FrozenMatMul(Var, Arc<dyn FrozenWeight>),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Softmax(Var),
    Tanh(Var),
    ScaleColumns(Var, Var),
    Gather(Var, Vec<usize>),
    Sum(Var),
    SumSquares(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    precision: Precision,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`, if `v` was on
    /// a gradient path.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        let (r, c) = self.shape(v);
        Tensor::from_vec(r, c, g.clone()).ok()
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        value.clear_grad();
        value.set_requires_grad(needs_grad);
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

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, mut value: Tensor) -> Var {
        self.precision.round_all(value.data_mut());
        self.push(value, Op::Leaf(None), false)
    }

    /// Leaf whose gradient is tracked on the tape but not written to any store.
    /// Used for gradient checks with respect to inputs.
    pub fn input(&mut self, mut value: Tensor) -> Var {
        self.precision.round_all(value.data_mut());
        self.push(value, Op::Leaf(None), true)
    }

    /// Leaf holding a copy of a stored parameter. Frozen parameters become
    /// constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let mut value = t.clone();
        self.precision.round_all(value.data_mut());
        let needs = t.requires_grad();
        self.push(value, Op::Leaf(needs.then_some(id)), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: (n, k),
                right: (k2, m),
            });
        }
        let mut out = vec![0.0; n * m];
        self.mm(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let value = Tensor::from_vec(n, m, out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    /// `x · W` where `W` is materialized from a frozen source for this call only.
    pub fn frozen_matmul(&mut self, x: Var, weight: Arc<dyn FrozenWeight>) -> Result<Var> {
        let (n, k) = self.shape(x);
        let (k2, m) = weight.shape();
        if k != k2 {
            return Err(Error::Dimension {
                op: "frozen_matmul",
                left: (n, k),
                right: (k2, m),
            });
        }
        let mut out = vec![0.0; n * m];
        {
            let w = weight.materialize();
            self.mm(self.value(x).data(), w.data(), &mut out, n, k, m);
        }
        let value = Tensor::from_vec(n, m, out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::FrozenMatMul(x, weight), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut value = self.value(a).add(self.value(b))?;
        self.precision.round_all(value.data_mut());
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut value = self.value(a).hadamard(self.value(b))?;
        self.precision.round_all(value.data_mut());
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut value = self.value(a).scale(c);
        self.precision.round_all(value.data_mut());
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, c), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let needs = self.needs(a);
        self.push(value, Op::Transpose(a), needs)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).softmax_rows();
        self.precision.round_all(value.data_mut());
        let needs = self.needs(a);
        self.push(value, Op::Softmax(a), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut value = self.value(a).map(f64::tanh);
        self.precision.round_all(value.data_mut());
        let needs = self.needs(a);
        self.push(value, Op::Tanh(a), needs)
    }

    /// Multiplies column `j` of `a` by `v[0][j]`; `v` is a `1 × cols` row.
    /// Equivalent to `a · diag(v)` without forming the diagonal matrix.
    pub fn scale_columns(&mut self, a: Var, v: Var) -> Result<Var> {
        let (n, m) = self.shape(a);
        if self.shape(v) != (1, m) {
            return Err(Error::Dimension {
                op: "scale_columns",
                left: (n, m),
                right: self.shape(v),
            });
        }
        let scales = self.value(v).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(m.max(1)) {
            for (x, s) in row.iter_mut().zip(&scales) {
                *x *= s;
            }
        }
        self.precision.round_all(&mut data);
        let value = Tensor::from_vec(n, m, data)?;
        let needs = self.needs(a) || self.needs(v);
        Ok(self.push(value, Op::ScaleColumns(a, v), needs))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(table);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    context: "gather_rows",
                    index: id,
                    size: rows,
                });
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let value = Tensor::from_vec(ids.len(), cols, data)?;
        let needs = self.needs(table);
        Ok(self.push(value, Op::Gather(table, ids.to_vec()), needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.precision.round(self.value(a).sum()));
        let needs = self.needs(a);
        self.push(value, Op::Sum(a), needs)
    }

    /// Squared Frobenius norm, as a `1 × 1` tensor.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.precision.round(self.value(a).frobenius_sq()));
        let needs = self.needs(a);
        self.push(value, Op::SumSquares(a), needs)
    }

    /// Mean token-level negative log-likelihood; row `i` of `logits` scores
    /// position `i` against `targets[i]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, vocab) = self.shape(logits);
        if targets.len() != n || n == 0 {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: (n, vocab),
                right: (targets.len(), 1),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index {
                context: "cross_entropy target",
                index: bad,
                size: vocab,
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in self.value(logits).data().chunks(vocab).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        for row in probs.chunks_mut(vocab) {
            softmax_in_place(row);
        }
        let value = Tensor::scalar(self.precision.round(loss / n as f64));
        let needs = self.needs(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    fn mm(&self, a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
        match self.precision {
            Precision::F64 => matmul_into(a, b, out, n, k, m),
            Precision::F32 => matmul_into_f32(a, b, out, n, k, m),
        }
    }

    /// Back-propagates from the scalar `loss` and writes gradients of every
    /// trainable parameter reached into `store`. A tape supports exactly one
    /// backward pass.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Dimension {
                op: "backward",
                left: self.shape(loss),
                right: (1, 1),
            });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backward_op(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Leaf(Some(id)), Some(g)) = (&node.op, &grads[idx]) {
                store.accumulate_grad(*id, g)?;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_op(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let p = self.precision;
        let node = &self.nodes[idx];
        let (out_r, out_c) = node.value.shape();
        match &node.op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (n, k) = av.shape();
                let m = bv.cols();
                if self.needs(*a) {
                    // dA = G · Bᵀ
                    let bt = bv.transpose();
                    let mut ga = vec![0.0; n * k];
                    self.mm(g, bt.data(), &mut ga, n, m, k);
                    accumulate(grads, *a, &ga);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · G
                    let at = av.transpose();
                    let mut gb = vec![0.0; k * m];
                    self.mm(at.data(), g, &mut gb, k, n, m);
                    accumulate(grads, *b, &gb);
                }
            }
            Op::FrozenMatMul(x, weight) => {
                if self.needs(*x) {
                    let (n, k) = self.shape(*x);
                    let m = out_c;
                    let wt = weight.materialize().transpose();
                    let mut gx = vec![0.0; n * k];
                    self.mm(g, wt.data(), &mut gx, n, m, k);
                    accumulate(grads, *x, &gx);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        accumulate(grads, *v, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    let ga: Vec<f64> = g.iter().zip(bv).map(|(g, b)| p.round(g * b)).collect();
                    accumulate(grads, *a, &ga);
                }
                if self.needs(*b) {
                    let gb: Vec<f64> = g.iter().zip(av).map(|(g, a)| p.round(g * a)).collect();
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|v| p.round(v * c)).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Transpose(a) => {
                let gt = Tensor::from_vec(out_r, out_c, g.to_vec())?.transpose();
                accumulate(grads, *a, gt.data());
            }
            Op::Softmax(a) => {
                // dX_row = Y ⊙ (G − ⟨G, Y⟩)
                let y = node.value.data();
                let mut ga = vec![0.0; y.len()];
                for ((gr, yr), out) in g
                    .chunks(out_c)
                    .zip(y.chunks(out_c))
                    .zip(ga.chunks_mut(out_c))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = p.round(yi * (gi - dot));
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let ga: Vec<f64> = g
                    .iter()
                    .zip(y)
                    .map(|(g, y)| p.round(g * (1.0 - y * y)))
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::ScaleColumns(a, v) => {
                let av = self.value(*a).data();
                let scales = self.value(*v).data();
                if self.needs(*a) {
                    let mut ga = g.to_vec();
                    for row in ga.chunks_mut(out_c) {
                        for (x, s) in row.iter_mut().zip(scales) {
                            *x = p.round(*x * s);
                        }
                    }
                    accumulate(grads, *a, &ga);
                }
                if self.needs(*v) {
                    let mut gv = vec![0.0; out_c];
                    for (gr, ar) in g.chunks(out_c).zip(av.chunks(out_c)) {
                        for ((o, gi), ai) in gv.iter_mut().zip(gr).zip(ar) {
                            *o += gi * ai;
                        }
                    }
                    p.round_all(&mut gv);
                    accumulate(grads, *v, &gv);
                }
            }
            Op::Gather(table, ids) => {
                let (rows, cols) = self.shape(*table);
                let mut gt = vec![0.0; rows * cols];
                for (gr, &id) in g.chunks(cols).zip(ids) {
                    for (o, &gi) in gt[id * cols..(id + 1) * cols].iter_mut().zip(gr) {
                        *o += gi;
                    }
                }
                accumulate(grads, *table, &gt);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; self.value(*a).len()];
                accumulate(grads, *a, &ga);
            }
            Op::SumSquares(a) => {
                let ga: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .map(|x| p.round(2.0 * x * g[0]))
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = self.shape(*logits).1;
                let inv_n = 1.0 / targets.len() as f64;
                let mut gl = probs.clone();
                for (row, &t) in gl.chunks_mut(vocab).zip(targets) {
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v = p.round(*v * inv_n * g[0]);
                    }
                }
                accumulate(grads, *logits, &gl);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}
