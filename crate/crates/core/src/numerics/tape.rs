//! Reverse-mode gradient tape over a closed set of primitives.
//!
//! Every primitive records its output value and whatever it needs for the
//! backward pass. `backward` walks the nodes in strict reverse creation
//! order. Only nodes downstream of a registered parameter carry gradients;
//! constants never do.

use super::kernels::{self, gemm, gelu_grad_scalar, gelu_scalar, sigmoid_scalar, softplus};
use super::tensor::{Dtype, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Min,
    Max,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    AddRow { x: Var, row: Var },
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64> },
    ReduceGroups { x: Var, arg: Vec<usize> },
    Transpose(Var),
    Reshape(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Im2Col { x: Var, rows: usize, cols: usize, ksize: usize },
    SumSquares(Var),
    Sum(Var),
    BceWithLogits { logits: Var, targets: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddRow { .. } => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::ReduceGroups { .. } => "reduce_groups",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::Attention { .. } => "attention",
            Op::Im2Col { .. } => "im2col",
            Op::SumSquares(_) => "sum_squares",
            Op::Sum(_) => "sum",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRow { x, row } => vec![*x, *row],
            Op::Scale(x, _)
            | Op::Sigmoid(x)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::SumSquares(x)
            | Op::Sum(x) => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::L2Normalize { x, .. }
            | Op::ReduceGroups { x, .. }
            | Op::GatherRows { x, .. }
            | Op::Im2Col { x, .. } => vec![*x],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::BceWithLogits { logits, .. } | Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of registered parameters, in registration order.
pub struct Grads {
    params: Vec<(String, Tensor)>,
    visited: Vec<usize>,
}

impl Grads {
    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.params.into_iter().map(|(_, g)| g).collect()
    }

    /// Node indices in the order the backward pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

pub struct Tape {
    dtype: Dtype,
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

impl Tape {
    pub fn new(dtype: Dtype) -> Self {
        Tape {
            dtype,
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
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

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Vars that `v` was computed from.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Attention probabilities (heads × n × n) saved by an `attention` node.
    pub fn attention_probs(&self, v: Var) -> Option<Tensor> {
        match &self.nodes[v.0].op {
            Op::Attention { heads, probs, .. } => {
                let n = self.nodes[v.0].value.rows();
                Tensor::new(vec![*heads, n, n], probs.clone()).ok()
            }
            _ => None,
        }
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let value = t.rounded(self.dtype);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        let value = t.rounded(self.dtype);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((name.to_string(), v));
        v
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let value = value.rounded(self.dtype);
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b), ta, tb)?;
        self.push(out, Op::MatMul { a, b, ta, tb })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Sub(a, b))
    }

    /// Adds a row vector (length = last extent) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        let c = xv.cols();
        if rv.numel() != c {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", xv.shape(), rv.shape()),
            ));
        }
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (d, r) in chunk.iter_mut().zip(rv.data()) {
                *d += r;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::AddRow { x, row })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid_scalar);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu_scalar);
        self.push(out, Op::Gelu(x))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let c = out.cols();
        kernels::softmax_rows_inplace(out.data_mut(), c);
        self.push(out, Op::Softmax(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Param(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xv = self.value(x);
        let d = xv.cols();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != d || b.numel() != d {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", xv.shape(), g.shape(), b.shape()),
            ));
        }
        let (y, xhat, rstd) = kernels::layer_norm_rows(xv.data(), d, g.data(), b.data(), eps);
        let out = Tensor::new(xv.shape().to_vec(), y)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// L2 normalization along the last axis; zero rows stay zero.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (y, norms) = kernels::l2_normalize_rows(xv.data(), xv.cols());
        let out = Tensor::new(xv.shape().to_vec(), y)?;
        self.push(out, Op::L2Normalize { x, norms })
    }

    /// Min or max over consecutive groups of `group` rows: `(G·group)×K → G×K`.
    /// Ties resolve to the first row of the group; the subgradient flows to that row only.
    pub fn reduce_groups(&mut self, x: Var, group: usize, kind: Reduce) -> Result<Var> {
        let xv = self.value(x);
        let (r, k) = xv.dims2("reduce_groups")?;
        if group == 0 || r % group != 0 {
            return Err(Error::shape(
                "reduce_groups",
                format!("{r} rows not divisible into groups of {group}"),
            ));
        }
        let g = r / group;
        let d = xv.data();
        let mut out = vec![0.0; g * k];
        let mut arg = vec![0usize; g * k];
        for gi in 0..g {
            for j in 0..k {
                let mut best = gi * group * k + j;
                for row in gi * group + 1..(gi + 1) * group {
                    let idx = row * k + j;
                    let better = match kind {
                        Reduce::Min => d[idx] < d[best],
                        Reduce::Max => d[idx] > d[best],
                    };
                    if better {
                        best = idx;
                    }
                }
                out[gi * k + j] = d[best];
                arg[gi * k + j] = best;
            }
        }
        let out = Tensor::matrix(g, k, out)?;
        self.push(out, Op::ReduceGroups { x, arg })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        self.push(out, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(x).gather_rows(idx)?;
        self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(Error::shape("concat_rows", format!("cols {} vs {c}", v.cols())));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(rows, c, data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::matrix(r, total, data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Multi-head scaled dot-product self-attention on pre-projected `q`, `k`, `v`
    /// (each n×D, heads laid out as contiguous column blocks of width D/heads).
    /// Returns the head-concatenated attention-weighted values (n×D).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (n, d) = self.value(q).dims2("attention")?;
        if self.value(k).shape() != [n, d] || self.value(v).shape() != [n, d] {
            return Err(Error::shape("attention", "q, k, v must share shape"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; n * d];
        let mut probs = vec![0.0; heads * n * n];
        let mut qh = vec![0.0; n * dh];
        let mut kh = vec![0.0; n * dh];
        let mut vh = vec![0.0; n * dh];
        let mut oh = vec![0.0; n * dh];
        for h in 0..heads {
            extract_head(qd, &mut qh, n, d, h, dh);
            extract_head(kd, &mut kh, n, d, h, dh);
            extract_head(vd, &mut vh, n, d, h, dh);
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            gemm(&qh, &kh, p, n, dh, n, false, true, 0.0);
            p.iter_mut().for_each(|s| *s *= scale);
            kernels::softmax_rows_inplace(p, n);
            gemm(p, &vh, &mut oh, n, n, dh, false, false, 0.0);
            insert_head(&oh, &mut out, n, d, h, dh);
        }
        let out = Tensor::matrix(n, d, out)?;
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    /// Unfolds `ksize × ksize` zero-padded neighbourhoods of a row-major
    /// `rows × cols` grid of channel vectors: `(rows·cols)×C → (rows·cols)×(ksize²·C)`.
    pub fn im2col(&mut self, x: Var, rows: usize, cols: usize, ksize: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = xv.dims2("im2col")?;
        if n != rows * cols || ksize % 2 == 0 {
            return Err(Error::shape(
                "im2col",
                format!("{n} tokens on a {rows}x{cols} grid with odd kernel {ksize}"),
            ));
        }
        let mut out = vec![0.0; n * ksize * ksize * c];
        im2col_forward(xv.data(), &mut out, rows, cols, ksize, c);
        let out = Tensor::matrix(n, ksize * ksize * c, out)?;
        self.push(
            out,
            Op::Im2Col {
                x,
                rows,
                cols,
                ksize,
            },
        )
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean squared error against another var.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).numel().max(1);
        let d = self.sub(a, b)?;
        let s = self.sum_squares(d)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// `x · w + b` with `w` stored in×out.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Mean binary cross-entropy with logits over all elements.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{:?} vs {:?}", lv.shape(), targets.shape()),
            ));
        }
        let n = lv.numel().max(1) as f64;
        let s: f64 = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| softplus(x) - x * t)
            .sum();
        self.push(
            Tensor::scalar(s / n),
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
        )
    }

    /// Mean softmax cross-entropy over rows of `logits` (B×C) against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, c) = lv.dims2("cross_entropy")?;
        if labels.len() != b || labels.iter().any(|&y| y >= c) {
            return Err(Error::shape(
                "cross_entropy",
                format!("{b}x{c} logits with {} labels", labels.len()),
            ));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[i]];
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        self.push(
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = Vec::new();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            visited.push(i);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (input, gi) in self.input_grads(i, &g)? {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                let mut gi = gi;
                self.dtype.round_slice(&mut gi);
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&gi) {
                            *a += b;
                        }
                        self.dtype.round_slice(acc);
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        let params = self
            .params
            .iter()
            .map(|(name, v)| {
                let shape = self.value(*v).shape().to_vec();
                let data = grads[v.0]
                    .take()
                    .unwrap_or_else(|| vec![0.0; self.value(*v).numel()]);
                (name.clone(), Tensor::new(shape, data).expect("grad shape"))
            })
            .collect();
        Ok(Grads { params, visited })
    }

    fn input_grads(&self, i: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| self.value(v);
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(*a), val(*b));
                let (ar, ac) = (av.rows(), av.cols());
                let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
                let n = node.value.cols();
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    if *ta {
                        gemm(bv.data(), g, &mut da, k, n, m, *tb, true, 0.0);
                    } else {
                        gemm(g, bv.data(), &mut da, m, n, k, false, !*tb, 0.0);
                    }
                    out.push((*a, da));
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    if *tb {
                        gemm(g, av.data(), &mut db, n, m, k, true, *ta, 0.0);
                    } else {
                        gemm(av.data(), g, &mut db, k, m, n, !*ta, false, 0.0);
                    }
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|x| -x).collect()));
            }
            Op::AddRow { x, row } => {
                out.push((*x, g.to_vec()));
                if wants(*row) {
                    let c = node.value.cols();
                    let mut dr = vec![0.0; c];
                    for chunk in g.chunks(c) {
                        for (d, v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    out.push((*row, dr));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()));
                }
                if wants(*b) {
                    out.push((*b, g.iter().zip(av).map(|(x, y)| x * y).collect()));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.iter().map(|v| v * c).collect())),
            Op::Sigmoid(x) => {
                let y = node.value.data();
                out.push((*x, g.iter().zip(y).map(|(d, s)| d * s * (1.0 - s)).collect()));
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                out.push((
                    *x,
                    g.iter().zip(xv).map(|(d, v)| d * gelu_grad_scalar(*v)).collect(),
                ));
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / c {
                    let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*x, dx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let gm = val(*gamma).data();
                if wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let mut dxhat = vec![0.0; c];
                    for r in 0..g.len() / c {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxhat[j] = gr[j] * gm[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[r * c + j] = rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                    out.push((*x, dx));
                }
                if wants(*gamma) || wants(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for r in 0..g.len() / c {
                        for j in 0..c {
                            dg[j] += g[r * c + j] * xhat[r * c + j];
                            db[j] += g[r * c + j];
                        }
                    }
                    out.push((*gamma, dg));
                    out.push((*beta, db));
                }
            }
            Op::L2Normalize { x, norms } => {
                let c = node.value.cols();
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                out.push((*x, dx));
            }
            Op::ReduceGroups { x, arg } => {
                let mut dx = vec![0.0; val(*x).numel()];
                for (o, &src) in arg.iter().enumerate() {
                    dx[src] += g[o];
                }
                out.push((*x, dx));
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                let mut dx = vec![0.0; g.len()];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = g[i * c + j];
                    }
                }
                out.push((*x, dx));
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::GatherRows { x, idx } => {
                let c = node.value.cols();
                let mut dx = vec![0.0; val(*x).numel()];
                for (o, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[src * c + j] += g[o * c + j];
                    }
                }
                out.push((*x, dx));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    out.push((p, g[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let c = val(p).cols();
                    let r = val(p).rows();
                    let mut dp = Vec::with_capacity(r * c);
                    for i in 0..r {
                        dp.extend_from_slice(&g[i * total + col..i * total + col + c]);
                    }
                    out.push((p, dp));
                    col += c;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (n, d) = (node.value.rows(), node.value.cols());
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                let mut qh = vec![0.0; n * dh];
                let mut kh = vec![0.0; n * dh];
                let mut vh = vec![0.0; n * dh];
                let mut goh = vec![0.0; n * dh];
                let mut dp = vec![0.0; n * n];
                let mut tmp = vec![0.0; n * dh];
                for h in 0..*heads {
                    extract_head(qd, &mut qh, n, d, h, dh);
                    extract_head(kd, &mut kh, n, d, h, dh);
                    extract_head(vd, &mut vh, n, d, h, dh);
                    extract_head(g, &mut goh, n, d, h, dh);
                    let p = &probs[h * n * n..(h + 1) * n * n];
                    gemm(&goh, &vh, &mut dp, n, dh, n, false, true, 0.0);
                    gemm(p, &goh, &mut tmp, n, n, dh, true, false, 0.0);
                    insert_head(&tmp, &mut dv, n, d, h, dh);
                    for r in 0..n {
                        let pr = &p[r * n..(r + 1) * n];
                        let dr = &mut dp[r * n..(r + 1) * n];
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dr[j] = pr[j] * (dr[j] - dot) * scale;
                        }
                    }
                    gemm(&dp, &kh, &mut tmp, n, n, dh, false, false, 0.0);
                    insert_head(&tmp, &mut dq, n, d, h, dh);
                    gemm(&dp, &qh, &mut tmp, n, n, dh, true, false, 0.0);
                    insert_head(&tmp, &mut dk, n, d, h, dh);
                }
                out.push((*q, dq));
                out.push((*k, dk));
                out.push((*v, dv));
            }
            Op::Im2Col {
                x,
                rows,
                cols,
                ksize,
            } => {
                let c = val(*x).cols();
                let mut dx = vec![0.0; val(*x).numel()];
                col2im_accumulate(&mut dx, g, *rows, *cols, *ksize, c);
                out.push((*x, dx));
            }
            Op::SumSquares(x) => {
                let s = g[0];
                out.push((*x, val(*x).data().iter().map(|v| 2.0 * v * s).collect()));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; val(*x).numel()])),
            Op::BceWithLogits { logits, targets } => {
                let lv = val(*logits).data();
                let n = lv.len().max(1) as f64;
                let s = g[0] / n;
                out.push((
                    *logits,
                    lv.iter()
                        .zip(targets)
                        .map(|(&x, &t)| (sigmoid_scalar(x) - t) * s)
                        .collect(),
                ));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = val(*logits).cols();
                let s = g[0] / labels.len() as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (i, &y) in labels.iter().enumerate() {
                    dx[i * c + y] -= s;
                }
                out.push((*logits, dx));
            }
        }
        Ok(out)
    }
}

fn extract_head(src: &[f64], dst: &mut [f64], n: usize, d: usize, h: usize, dh: usize) {
    for r in 0..n {
        dst[r * dh..(r + 1) * dh].copy_from_slice(&src[r * d + h * dh..r * d + (h + 1) * dh]);
    }
}

fn insert_head(src: &[f64], dst: &mut [f64], n: usize, d: usize, h: usize, dh: usize) {
    for r in 0..n {
        dst[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}

fn neighbour(r: usize, c: usize, di: usize, dj: usize, pad: usize, rows: usize, cols: usize) -> Option<usize> {
    let rr = (r + di).checked_sub(pad)?;
    let cc = (c + dj).checked_sub(pad)?;
    (rr < rows && cc < cols).then_some(rr * cols + cc)
}

fn im2col_forward(src: &[f64], out: &mut [f64], rows: usize, cols: usize, ksize: usize, c: usize) {
    let pad = ksize / 2;
    let width = ksize * ksize * c;
    for r in 0..rows {
        for cc in 0..cols {
            let o = (r * cols + cc) * width;
            for di in 0..ksize {
                for dj in 0..ksize {
                    if let Some(s) = neighbour(r, cc, di, dj, pad, rows, cols) {
                        let off = o + (di * ksize + dj) * c;
                        out[off..off + c].copy_from_slice(&src[s * c..(s + 1) * c]);
                    }
                }
            }
        }
    }
}

fn col2im_accumulate(dx: &mut [f64], g: &[f64], rows: usize, cols: usize, ksize: usize, c: usize) {
    let pad = ksize / 2;
    let width = ksize * ksize * c;
    for r in 0..rows {
        for cc in 0..cols {
            let o = (r * cols + cc) * width;
            for di in 0..ksize {
                for dj in 0..ksize {
                    if let Some(s) = neighbour(r, cc, di, dj, pad, rows, cols) {
                        let off = o + (di * ksize + dj) * c;
                        for j in 0..c {
                            dx[s * c + j] += g[off + j];
                        }
                    }
                }
            }
        }
    }
}
