//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in execution
//! order. [`Graph::backward`] walks the record in reverse and accumulates
//! adjoints, but only for nodes that depend on a leaf created with
//! [`Graph::param`]. Constants and frozen weights never receive a gradient.
//!
//! Replay is strictly sequential, so two backward passes over identical
//! inputs produce bitwise-identical gradients.

use crate::error::{shape_err, Result};
use crate::numeric::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Tensor,
        inv_std: Vec<f64>,
    },
    ReplaceRows {
        src: Var,
        replaced: Vec<bool>,
    },
    WeightedAbsMean {
        x: Var,
        target: Tensor,
        row_weights: Vec<f64>,
    },
    SquaredErrorMean {
        x: Var,
        target: Tensor,
    },
    RowL2Normalize(Var),
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the loss
    /// through any trainable leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that is trainable only when `trainable` is set.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        if trainable {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.len() != x.cols() {
            return shape_err(format!("add_row: {:?} + {:?}", x.dims(), r.dims()));
        }
        let mut value = x.clone();
        let cols = x.cols();
        for chunk in value.data_mut().chunks_mut(cols) {
            for (v, b) in chunk.iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.cols() || len == 0 {
            return shape_err(format!(
                "slice_cols {start}..{} of {:?}",
                start + len,
                x.dims()
            ));
        }
        let rows = x.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let value = Tensor::from_vec(&[rows, len], data)?;
        Ok(self.push(value, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return shape_err("concat_cols: row counts differ");
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Tensor::from_vec(&[rows, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Per-row layer normalisation with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return shape_err("layer_norm: affine size differs from feature size");
        }
        let mut normed = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in normed.data_mut().chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = normed.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for ((v, gi), bi) in row.iter_mut().zip(g).zip(b) {
                *v = *v * gi + bi;
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Copies `src`, overwriting the rows flagged in `replaced` with the
    /// matching rows of `replacement`. Replacement rows carry no gradient.
    pub fn replace_rows(&mut self, src: Var, replacement: &Tensor, replaced: &[bool]) -> Result<Var> {
        let s = self.value(src);
        if s.dims() != replacement.dims() || replaced.len() != s.rows() {
            return shape_err(format!(
                "replace_rows: {:?} vs {:?} with {} flags",
                s.dims(),
                replacement.dims(),
                replaced.len()
            ));
        }
        let mut value = s.clone();
        for (r, &flag) in replaced.iter().enumerate() {
            if flag {
                value.row_mut(r).copy_from_slice(replacement.row(r));
            }
        }
        Ok(self.push(
            value,
            Op::ReplaceRows {
                src,
                replaced: replaced.to_vec(),
            },
            &[src],
        ))
    }

    /// `mean_{r,c} w_r · |x[r,c] − target[r,c]|` as a scalar.
    pub fn weighted_abs_mean(&mut self, x: Var, target: &Tensor, row_weights: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if xv.dims() != target.dims() || row_weights.len() != xv.rows() {
            return shape_err(format!(
                "weighted_abs_mean: {:?} vs {:?} with {} weights",
                xv.dims(),
                target.dims(),
                row_weights.len()
            ));
        }
        let cols = xv.cols();
        let mut sum = 0.0;
        for (r, w) in row_weights.iter().enumerate() {
            let d: f64 = xv
                .row(r)
                .iter()
                .zip(target.row(r))
                .map(|(a, b)| (a - b).abs())
                .sum();
            sum += w * d;
        }
        let value = Tensor::scalar(sum / (xv.rows() * cols) as f64);
        Ok(self.push(
            value,
            Op::WeightedAbsMean {
                x,
                target: target.clone(),
                row_weights: row_weights.to_vec(),
            },
            &[x],
        ))
    }

    /// `mean (x − target)²` as a scalar.
    pub fn squared_error_mean(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        let diff = xv.sub(target)?;
        let value = Tensor::scalar(diff.data().iter().map(|d| d * d).sum::<f64>() / diff.len() as f64);
        Ok(self.push(
            value,
            Op::SquaredErrorMean {
                x,
                target: target.clone(),
            },
            &[x],
        ))
    }

    /// Scales every row to unit Euclidean norm (rows of norm zero stay zero).
    pub fn row_l2_normalize(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let cols = value.cols();
        for row in value.data_mut().chunks_mut(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        self.push(value, Op::RowL2Normalize(a), &[a])
    }

    /// `Σ c_i · s_i` over scalar vars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|(v, c)| c * self.scalar(*v)).sum();
        let inputs: Vec<Var> = terms.iter().map(|(v, _)| *v).collect();
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), &inputs)
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).dims(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let live = |v: &Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(grad);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if live(a) {
                        let g = grad.matmul(&self.value(*b).transpose()).expect("matmul shapes");
                        acc(&mut grads, *a, g);
                    }
                    if live(b) {
                        let g = self.value(*a).transpose().matmul(&grad).expect("matmul shapes");
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Transpose(a) => acc(&mut grads, *a, grad.transpose()),
                Op::Add(a, b) => {
                    if live(a) {
                        acc(&mut grads, *a, grad.clone());
                    }
                    if live(b) {
                        acc(&mut grads, *b, grad);
                    }
                }
                Op::AddRow(a, row) => {
                    if live(row) {
                        let sums = grad.col_sums();
                        let dims = self.value(*row).dims().to_vec();
                        acc(&mut grads, *row, Tensor::from_vec(&dims, sums).expect("finite"));
                    }
                    if live(a) {
                        acc(&mut grads, *a, grad);
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, *a, grad.scale(*s)),
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut g = Tensor::zeros(src.dims());
                    let len = grad.cols();
                    for r in 0..grad.rows() {
                        g.row_mut(r)[*start..*start + len].copy_from_slice(grad.row(r));
                    }
                    acc(&mut grads, *a, g);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let dims = self.value(*p).dims().to_vec();
                        let width = dims[1];
                        if live(p) {
                            let mut g = Tensor::zeros(&dims);
                            for r in 0..grad.rows() {
                                g.row_mut(r).copy_from_slice(&grad.row(r)[offset..offset + width]);
                            }
                            acc(&mut grads, *p, g);
                        }
                        offset += width;
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut g = grad;
                    let cols = y.cols();
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dot: f64 = g.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (gv, yv) in g.row_mut(r).iter_mut().zip(yr) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    debug_assert_eq!(g.cols(), cols);
                    acc(&mut grads, *a, g);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let g = grad.zip_with(x, |g, x| g * gelu_grad(x)).expect("same shape");
                    acc(&mut grads, *a, g);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normed,
                    inv_std,
                } => {
                    let cols = normed.cols();
                    if live(gamma) {
                        let g = grad.zip_with(normed, |g, n| g * n).expect("same shape").col_sums();
                        let dims = self.value(*gamma).dims().to_vec();
                        acc(&mut grads, *gamma, Tensor::from_vec(&dims, g).expect("finite"));
                    }
                    if live(beta) {
                        let dims = self.value(*beta).dims().to_vec();
                        acc(&mut grads, *beta, Tensor::from_vec(&dims, grad.col_sums()).expect("finite"));
                    }
                    if live(x) {
                        let gam = self.value(*gamma).data();
                        let mut gx = Tensor::zeros(normed.dims());
                        let n = cols as f64;
                        for (r, &is) in inv_std.iter().enumerate() {
                            let nr = normed.row(r);
                            let dn: Vec<f64> = grad.row(r).iter().zip(gam).map(|(g, w)| g * w).collect();
                            let mean_dn = dn.iter().sum::<f64>() / n;
                            let mean_dn_n = dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / n;
                            for ((o, d), nv) in gx.row_mut(r).iter_mut().zip(&dn).zip(nr) {
                                *o = is * (d - mean_dn - nv * mean_dn_n);
                            }
                        }
                        acc(&mut grads, *x, gx);
                    }
                }
                Op::ReplaceRows { src, replaced } => {
                    let mut g = grad;
                    for (r, &flag) in replaced.iter().enumerate() {
                        if flag {
                            g.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    acc(&mut grads, *src, g);
                }
                Op::WeightedAbsMean {
                    x,
                    target,
                    row_weights,
                } => {
                    let xv = self.value(*x);
                    let scale = grad.data()[0] / xv.len() as f64;
                    let mut g = xv.zip_with(target, |a, b| sign(a - b)).expect("same shape");
                    for (r, w) in row_weights.iter().enumerate() {
                        g.row_mut(r).iter_mut().for_each(|v| *v *= w * scale);
                    }
                    acc(&mut grads, *x, g);
                }
                Op::SquaredErrorMean { x, target } => {
                    let xv = self.value(*x);
                    let scale = 2.0 * grad.data()[0] / xv.len() as f64;
                    let g = xv.zip_with(target, |a, b| scale * (a - b)).expect("same shape");
                    acc(&mut grads, *x, g);
                }
                Op::RowL2Normalize(a) => {
                    let xv = self.value(*a);
                    let y = &node.value;
                    let mut g = Tensor::zeros(xv.dims());
                    for r in 0..xv.rows() {
                        let n = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        if n == 0.0 {
                            continue;
                        }
                        let yr = y.row(r);
                        let dot: f64 = grad.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in g.row_mut(r).iter_mut().zip(grad.row(r)).zip(yr) {
                            *o = (gv - yv * dot) / n;
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::WeightedSum(terms) => {
                    let gs = grad.data()[0];
                    for (v, c) in terms {
                        if live(v) {
                            acc(&mut grads, *v, Tensor::scalar(gs * c));
                        }
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}
