//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value and enough of its
//! inputs to run the vector-Jacobian product later. `backward` walks the tape
//! in exact reverse recording order, so inputs always precede the nodes that
//! consume them.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Param,
    MatMul,
    MatMulBt,
    Add,
    Sub,
    Mul,
    Scale,
    Concat,
    SliceCols,
    LeakyRelu,
    Gelu,
    Softmax,
    LayerNorm,
    Mse,
    CrossEntropy,
    SoftmaxCrossEntropy,
    L2NormSq,
    Dot,
    RowDot,
    Sum,
    Mean,
    StopGradient,
    StraightThrough,
    GatherRows,
    Gather,
    Transpose,
    CausalMask,
    LogSumExp,
    Reshape,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param { store: u64, index: usize },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat { parts: Vec<Var>, axis: usize },
    SliceCols { src: Var, start: usize },
    LeakyRelu(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Mse(Var, Var),
    CrossEntropy { probs: Var, targets: Vec<usize> },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize> },
    L2NormSq(Var),
    Dot(Var, Var),
    RowDot(Var, Var),
    Sum(Var),
    Mean(Var),
    StopGradient,
    StraightThrough { grad_to: Var },
    GatherRows { table: Var, rows: Vec<usize> },
    Gather { src: Var, idx: Vec<usize> },
    Transpose(Var),
    CausalMask(Var),
    LogSumExp(Var),
    Reshape(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param { .. } => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulBt(..) => OpKind::MatMulBt,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Concat { .. } => OpKind::Concat,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Mse(..) => OpKind::Mse,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::L2NormSq(..) => OpKind::L2NormSq,
            Op::Dot(..) => OpKind::Dot,
            Op::RowDot(..) => OpKind::RowDot,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::StopGradient => OpKind::StopGradient,
            Op::StraightThrough { .. } => OpKind::StraightThrough,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Gather { .. } => OpKind::Gather,
            Op::Transpose(..) => OpKind::Transpose,
            Op::CausalMask(..) => OpKind::CausalMask,
            Op::LogSumExp(..) => OpKind::LogSumExp,
            Op::Reshape(..) => OpKind::Reshape,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    // Per-op saved state (layer-norm inverse std devs).
    aux: Vec<f64>,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), Var>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(u64, usize, usize)>,
}

impl Gradients {
    /// Gradient w.r.t. `var`; `None` when no gradient reached it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }

    /// Gradient w.r.t. `var`, zeros when no gradient reached it.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (u64, usize, &Tensor)> + '_ {
        self.params.iter().filter_map(move |&(store, index, node)| {
            self.grads[node].as_ref().map(|g| (store, index, g))
        })
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

// a [m,k] · b[n,k]^T -> [m,n]
fn matmul_bt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

// a[m,k]^T · b[m,n] -> [k,n]
fn matmul_at_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise stable softmax over the last axis.
pub fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

/// Log-sum-exp with the exponentiated terms summed in ascending order, which
/// makes the result independent of the input ordering.
pub fn logsumexp_sorted(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut terms: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    terms.sort_by(|a, b| a.total_cmp(b));
    max + terms.iter().sum::<f64>().ln()
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis..].iter().product();
    (outer, inner)
}

impl Tape {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_aux(value, op, requires_grad, Vec::new())
    }

    fn push_aux(&mut self, value: Tensor, op: Op, requires_grad: bool, aux: Vec<f64>) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a parameter as a gradient-requiring leaf. Repeated requests for
    /// the same parameter return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.id(), id.index());
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let value = Arc::clone(store.param(id).value_arc());
        self.nodes.push(Node {
            value,
            op: Op::Param {
                store: key.0,
                index: key.1,
            },
            requires_grad: true,
            aux: Vec::new(),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key, v);
        v
    }

    /// Records a parameter's current value as a constant (no gradient).
    pub fn param_frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = Arc::clone(store.param(id).value_arc());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn mat_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return shape_err(op, &[s]);
        }
        Ok((s[0], s[1]))
    }

    /// `a [m,k] · b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims("matmul", a)?;
        let (k2, n) = self.mat_dims("matmul", b)?;
        if k != k2 {
            return shape_err("matmul", &[self.shape(a), self.shape(b)]);
        }
        let out = matmul_raw(self.val(a).data(), self.val(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `a [m,k] · b[n,k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims("matmul_bt", a)?;
        let (n, k2) = self.mat_dims("matmul_bt", b)?;
        if k != k2 {
            return shape_err("matmul_bt", &[self.shape(a), self.shape(b)]);
        }
        let out = matmul_bt_raw(self.val(a).data(), self.val(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulBt(a, b), rg))
    }

    fn broadcast_ok(&self, a: Var, b: Var) -> bool {
        let (sa, sb) = (self.shape(a), self.shape(b));
        sa == sb || (sa.len() > sb.len() && &sa[sa.len() - sb.len()..] == sb)
    }

    /// Elementwise sum; `b` may also match the trailing axes of `a`, in which
    /// case it is added to every leading-index slice.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if !self.broadcast_ok(a, b) {
            return shape_err("add", &[self.shape(a), self.shape(b)]);
        }
        let bd = self.val(b).data();
        let out: Vec<f64> = self
            .val(a)
            .data()
            .chunks(bd.len())
            .flat_map(|c| c.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), rg))
    }

    /// Elementwise difference with the same broadcasting rule as [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if !self.broadcast_ok(a, b) {
            return shape_err("sub", &[self.shape(a), self.shape(b)]);
        }
        let bd = self.val(b).data();
        let out: Vec<f64> = self
            .val(a)
            .data()
            .chunks(bd.len())
            .flat_map(|c| c.iter().zip(bd).map(|(x, y)| x - y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("mul", &[self.shape(a), self.shape(b)]);
        }
        let out: Vec<f64> = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out: Vec<f64> = self.val(a).data().iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::Scale(a, s), rg)
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", &[&base]);
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                let shapes: Vec<&[usize]> = parts.iter().map(|&q| self.shape(q)).collect();
                return shape_err("concat", &shapes);
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _) = split_at_axis(&base, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.val(p);
                let (_, inner) = split_at_axis(t.shape(), axis);
                out.extend_from_slice(&t.data()[o * inner..(o + 1) * inner]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat_dims("slice_cols", src)?;
        if len == 0 || start + len > n {
            return shape_err("slice_cols", &[self.shape(src)]);
        }
        let d = self.val(src).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&d[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(src);
        Ok(self.push(
            Tensor::from_parts(vec![m, len], out),
            Op::SliceCols { src, start },
            rg,
        ))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out: Vec<f64> = self
            .val(a)
            .data()
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::LeakyRelu(a, slope), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.val(a).data().iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::Gelu(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let out = softmax_rows(t.data(), t.cols());
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::Softmax(a), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.val(x).cols();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return shape_err(
                "layer_norm",
                &[self.shape(x), self.shape(gamma), self.shape(beta)],
            );
        }
        let xd = self.val(x).data();
        let g = self.val(gamma).data();
        let b = self.val(beta).data();
        let mut out = vec![0.0; xd.len()];
        let mut rstds = Vec::with_capacity(xd.len() / n);
        for (src, dst) in xd.chunks(n).zip(out.chunks_mut(n)) {
            let mean = src.iter().sum::<f64>() / n as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                dst[j] = (src[j] - mean) * rstd * g[j] + b[j];
            }
            rstds.push(rstd);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push_aux(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gamma, beta },
            rg,
            rstds,
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("mse", &[self.shape(a), self.shape(b)]);
        }
        let ad = self.val(a).data();
        let bd = self.val(b).data();
        let s: f64 = ad.iter().zip(bd).map(|(x, y)| (x - y) * (x - y)).sum();
        let v = s / ad.len() as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(v), Op::Mse(a, b), rg))
    }

    fn check_targets(&self, op: &'static str, v: Var, targets: &[usize]) -> Result<()> {
        let t = self.val(v);
        if t.rows() != targets.len() || targets.iter().any(|&c| c >= t.cols()) {
            return Err(Error::Shape {
                op,
                shapes: vec![t.shape().to_vec(), vec![targets.len()]],
            });
        }
        Ok(())
    }

    /// Mean negative log-likelihood of `targets` under row-wise probabilities.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        self.check_targets("cross_entropy", probs, targets)?;
        let t = self.val(probs);
        let s: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &c)| -t.row(r)[c].ln())
            .sum();
        let v = s / targets.len() as f64;
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(v),
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `targets` under row-wise softmax of `logits`,
    /// computed through log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check_targets("softmax_cross_entropy", logits, targets)?;
        let t = self.val(logits);
        let s: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                let row = t.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                lse - row[c]
            })
            .sum();
        let v = s / targets.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(v),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Sum of squares of all elements.
    pub fn l2_norm_sq(&mut self, a: Var) -> Var {
        let v: f64 = self.val(a).data().iter().map(|x| x * x).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(v), Op::L2NormSq(a), rg)
    }

    /// Sum of elementwise products of two same-shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("dot", &[self.shape(a), self.shape(b)]);
        }
        let v: f64 = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x * y)
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(v), Op::Dot(a, b), rg))
    }

    /// Row-wise dot products of two `[m,n]` matrices, giving `[m]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.mat_dims("row_dot", a)?;
        if self.shape(a) != self.shape(b) {
            return shape_err("row_dot", &[self.shape(a), self.shape(b)]);
        }
        let ad = self.val(a).data();
        let bd = self.val(b).data();
        let out: Vec<f64> = (0..m)
            .map(|i| {
                ad[i * n..(i + 1) * n]
                    .iter()
                    .zip(&bd[i * n..(i + 1) * n])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m], out), Op::RowDot(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v: f64 = self.val(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(v), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let v = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(v), Op::Mean(a), rg)
    }

    /// Identity in value; blocks every gradient flowing back into `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = Arc::clone(&self.nodes[a.0].value);
        self.nodes.push(Node {
            value,
            op: Op::StopGradient,
            requires_grad: false,
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Straight-through estimator: takes the value of `value_from` and passes
    /// the incoming gradient unchanged to `grad_to` (and nothing to
    /// `value_from`). Equivalent to `grad_to + sg[value_from - grad_to]` but
    /// bit-exact in value.
    pub fn straight_through(&mut self, grad_to: Var, value_from: Var) -> Result<Var> {
        if self.shape(grad_to) != self.shape(value_from) {
            return shape_err(
                "straight_through",
                &[self.shape(grad_to), self.shape(value_from)],
            );
        }
        let value = Arc::clone(&self.nodes[value_from.0].value);
        let rg = self.rg(grad_to);
        self.nodes.push(Node {
            value,
            op: Op::StraightThrough { grad_to },
            requires_grad: rg,
            aux: Vec::new(),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Selects rows of a `[n,d]` table (embedding lookup). Gradients scatter
    /// back into the selected rows only.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.mat_dims("gather_rows", table)?;
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return shape_err("gather_rows", &[self.shape(table), &[rows.len()]]);
        }
        let t = self.val(table);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), d], out),
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Selects elements of `src` by flat index into a 1-D tensor.
    pub fn gather(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let n = self.val(src).len();
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return shape_err("gather", &[self.shape(src), &[idx.len()]]);
        }
        let d = self.val(src).data();
        let out: Vec<f64> = idx.iter().map(|&i| d[i]).collect();
        let rg = self.rg(src);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len()], out),
            Op::Gather {
                src,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat_dims("transpose", a)?;
        let d = self.val(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), rg))
    }

    /// Sets entries above the diagonal of a square matrix to `-inf`.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat_dims("causal_mask", a)?;
        if m != n {
            return shape_err("causal_mask", &[self.shape(a)]);
        }
        let mut out = self.val(a).data().to_vec();
        for i in 0..m {
            for j in i + 1..n {
                out[i * n + j] = f64::NEG_INFINITY;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::CausalMask(a), rg))
    }

    /// `ln Σ exp(a)` over all elements, summed in sorted order.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let v = logsumexp_sorted(self.val(a).data());
        let rg = self.rg(a);
        self.push(Tensor::scalar(v), Op::LogSumExp(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = (*self.nodes[a.0].value).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.val(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward on non-scalar tensor of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = Vec::new();
        for (i, n) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Param { store, index } = n.op {
                params.push((store, index, i));
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut full: Vec<Option<Tensor>> = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g))
            })
            .collect();
        full.resize_with(self.nodes.len(), || None);
        Ok(Gradients {
            grads: full,
            shapes,
            params,
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot =
            grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param { .. } | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.val(*a).shape()[0], self.val(*a).shape()[1]);
                let n = self.val(*b).shape()[1];
                if self.rg(*a) {
                    let ga = matmul_bt_raw(g, self.val(*b).data(), m, n, k);
                    self.acc(grads, *a, |s| add_into(s, &ga));
                }
                if self.rg(*b) {
                    let gb = matmul_at_raw(self.val(*a).data(), g, m, k, n);
                    self.acc(grads, *b, |s| add_into(s, &gb));
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (self.val(*a).shape()[0], self.val(*a).shape()[1]);
                let n = self.val(*b).shape()[0];
                if self.rg(*a) {
                    let ga = matmul_raw(g, self.val(*b).data(), m, n, k);
                    self.acc(grads, *a, |s| add_into(s, &ga));
                }
                if self.rg(*b) {
                    let gb = matmul_at_raw(g, self.val(*a).data(), m, n, k);
                    self.acc(grads, *b, |s| add_into(s, &gb));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.acc(grads, *a, |s| add_into(s, g));
                self.acc(grads, *b, |s| {
                    for chunk in g.chunks(s.len()) {
                        for (x, y) in s.iter_mut().zip(chunk) {
                            *x += sign * y;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                self.acc(grads, *a, |s| {
                    for ((x, gi), bi) in s.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                });
                self.acc(grads, *b, |s| {
                    for ((x, gi), ai) in s.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |s| {
                for (x, gi) in s.iter_mut().zip(g) {
                    *x += c * gi;
                }
            }),
            Op::Concat { parts, axis } => {
                let (outer, total_inner) = split_at_axis(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let (_, inner) = split_at_axis(self.val(p).shape(), *axis);
                    self.acc(grads, p, |s| {
                        for o in 0..outer {
                            let src = &g[o * total_inner + offset..o * total_inner + offset + inner];
                            add_into(&mut s[o * inner..(o + 1) * inner], src);
                        }
                    });
                    offset += inner;
                }
            }
            Op::SliceCols { src, start } => {
                let n = self.val(*src).shape()[1];
                let len = out.shape()[1];
                self.acc(grads, *src, |s| {
                    for (i, row) in g.chunks(len).enumerate() {
                        add_into(&mut s[i * n + start..i * n + start + len], row);
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let av = self.val(*a).data();
                self.acc(grads, *a, |s| {
                    for ((x, gi), ai) in s.iter_mut().zip(g).zip(av) {
                        *x += if *ai >= 0.0 { *gi } else { slope * gi };
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.val(*a).data();
                self.acc(grads, *a, |s| {
                    for ((x, gi), ai) in s.iter_mut().zip(g).zip(av) {
                        *x += gi * gelu_grad(*ai);
                    }
                });
            }
            Op::Softmax(a) => {
                let n = out.cols();
                let y = out.data();
                self.acc(grads, *a, |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dotp: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            srow[j] += yrow[j] * (grow[j] - dotp);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xv = self.val(*x);
                let n = xv.cols();
                let gam = self.val(*gamma).data();
                let rows = xv.len() / n;
                let mut xhat = vec![0.0; xv.len()];
                for r in 0..rows {
                    let src = &xv.data()[r * n..(r + 1) * n];
                    let mean = src.iter().sum::<f64>() / n as f64;
                    for j in 0..n {
                        xhat[r * n + j] = (src[j] - mean) * node.aux[r];
                    }
                }
                self.acc(grads, *gamma, |s| {
                    for r in 0..rows {
                        for j in 0..n {
                            s[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                });
                self.acc(grads, *beta, |s| {
                    for r in 0..rows {
                        add_into(s, &g[r * n..(r + 1) * n]);
                    }
                });
                self.acc(grads, *x, |s| {
                    for r in 0..rows {
                        let rstd = node.aux[r];
                        let dxh: Vec<f64> = (0..n).map(|j| g[r * n + j] * gam[j]).collect();
                        let m1 = dxh.iter().sum::<f64>() / n as f64;
                        let m2 = dxh
                            .iter()
                            .zip(&xhat[r * n..(r + 1) * n])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / n as f64;
                        for j in 0..n {
                            s[r * n + j] += rstd * (dxh[j] - m1 - xhat[r * n + j] * m2);
                        }
                    }
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                let c = 2.0 * g[0] / av.len() as f64;
                self.acc(grads, *a, |s| {
                    for ((x, ai), bi) in s.iter_mut().zip(av).zip(bv) {
                        *x += c * (ai - bi);
                    }
                });
                self.acc(grads, *b, |s| {
                    for ((x, ai), bi) in s.iter_mut().zip(av).zip(bv) {
                        *x -= c * (ai - bi);
                    }
                });
            }
            Op::CrossEntropy { probs, targets } => {
                let p = self.val(*probs);
                let n = p.cols();
                let c = g[0] / targets.len() as f64;
                self.acc(grads, *probs, |s| {
                    for (r, &t) in targets.iter().enumerate() {
                        s[r * n + t] -= c / p.row(r)[t];
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let l = self.val(*logits);
                let n = l.cols();
                let sm = softmax_rows(l.data(), n);
                let c = g[0] / targets.len() as f64;
                self.acc(grads, *logits, |s| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..n {
                            let y = if j == t { 1.0 } else { 0.0 };
                            s[r * n + j] += c * (sm[r * n + j] - y);
                        }
                    }
                });
            }
            Op::L2NormSq(a) => {
                let av = self.val(*a).data();
                self.acc(grads, *a, |s| {
                    for (x, ai) in s.iter_mut().zip(av) {
                        *x += 2.0 * g[0] * ai;
                    }
                });
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                self.acc(grads, *a, |s| {
                    for (x, bi) in s.iter_mut().zip(bv) {
                        *x += g[0] * bi;
                    }
                });
                self.acc(grads, *b, |s| {
                    for (x, ai) in s.iter_mut().zip(av) {
                        *x += g[0] * ai;
                    }
                });
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                let n = self.val(*a).cols();
                self.acc(grads, *a, |s| {
                    for (i, gi) in g.iter().enumerate() {
                        for j in 0..n {
                            s[i * n + j] += gi * bv[i * n + j];
                        }
                    }
                });
                self.acc(grads, *b, |s| {
                    for (i, gi) in g.iter().enumerate() {
                        for j in 0..n {
                            s[i * n + j] += gi * av[i * n + j];
                        }
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let c = g[0] / self.val(*a).len() as f64;
                self.acc(grads, *a, |s| s.iter_mut().for_each(|x| *x += c));
            }
            Op::StraightThrough { grad_to } => self.acc(grads, *grad_to, |s| add_into(s, g)),
            Op::GatherRows { table, rows } => {
                let d = self.val(*table).cols();
                self.acc(grads, *table, |s| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut s[r * d..(r + 1) * d], &g[k * d..(k + 1) * d]);
                    }
                });
            }
            Op::Gather { src, idx } => self.acc(grads, *src, |s| {
                for (k, &i) in idx.iter().enumerate() {
                    s[i] += g[k];
                }
            }),
            Op::Transpose(a) => {
                let (m, n) = (self.val(*a).shape()[0], self.val(*a).shape()[1]);
                self.acc(grads, *a, |s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::CausalMask(a) => {
                let n = out.cols();
                self.acc(grads, *a, |s| {
                    for i in 0..n {
                        for j in 0..=i {
                            s[i * n + j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::LogSumExp(a) => {
                let av = self.val(*a).data();
                let lse = out.data()[0];
                self.acc(grads, *a, |s| {
                    for (x, ai) in s.iter_mut().zip(av) {
                        *x += g[0] * (ai - lse).exp();
                    }
                });
            }
            Op::Reshape(a) => self.acc(grads, *a, |s| add_into(s, g)),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
