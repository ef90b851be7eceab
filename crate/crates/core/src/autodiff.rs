//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only list of nodes. Each node stores its value,
//! the operation that produced it and whatever the backward rule needs.
//! Inputs always precede the node that consumes them, so a single reverse
//! sweep over creation order visits every node once, after all of its
//! consumers.
//!
//! All tensors on a tape are matrices (or vectors / scalars, viewed as 1×n
//! and 1×1). The model lays everything out as `tokens × channels`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tags, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddBias,
    ScaleCols,
    Transpose,
    Reshape,
    SliceCols,
    ConcatCols,
    ConcatRows,
    SoftmaxRows,
    Gelu,
    LayerNorm,
    GroupNorm,
    DepthwiseConv1d,
    RowNorms,
    Sum,
    Mean,
}

impl OpKind {
    pub const ALL: [OpKind; 21] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddBias,
        OpKind::ScaleCols,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::SliceCols,
        OpKind::ConcatCols,
        OpKind::ConcatRows,
        OpKind::SoftmaxRows,
        OpKind::Gelu,
        OpKind::LayerNorm,
        OpKind::GroupNorm,
        OpKind::DepthwiseConv1d,
        OpKind::RowNorms,
        OpKind::Sum,
        OpKind::Mean,
    ];

    /// Snake-case name, as accepted on the command line.
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddBias => "add_bias",
            OpKind::ScaleCols => "scale_cols",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::Gelu => "gelu",
            OpKind::LayerNorm => "layer_norm",
            OpKind::GroupNorm => "group_norm",
            OpKind::DepthwiseConv1d => "depthwise_conv1d",
            OpKind::RowNorms => "row_norms",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    ScaleCols(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SliceCols { input: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SoftmaxRows(Var),
    Gelu(Var),
    LayerNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    GroupNorm { input: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    DepthwiseConv1d { input: Var, kernels: Var, bias: Var },
    RowNorms(Var),
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddBias(..) => OpKind::AddBias,
            Op::ScaleCols(..) => OpKind::ScaleCols,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::Gelu(..) => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::GroupNorm { .. } => OpKind::GroupNorm,
            Op::DepthwiseConv1d { .. } => OpKind::DepthwiseConv1d,
            Op::RowNorms(..) => OpKind::RowNorms,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation graph for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Result of [`Tape::backward`].
///
/// Every node created with `requires_grad` that is a leaf holds a gradient,
/// zero if the loss does not depend on it. Nodes without `requires_grad`
/// never hold one.
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.slots.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.slots.get_mut(var.0).and_then(Option::take)
    }
}

pub const SQRT_2: f64 = core::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_derivative(x: f64) -> f64 {
    normal_cdf(x) + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

// c[m×n] += a[m×k] · b[k×n]
fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// c[m×n] += a[m×k] · b[n×k]ᵀ
fn mm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

// c[k×n] += a[m×k]ᵀ · b[m×n]
fn mm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[t * n..(t + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn transpose_data(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    out
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Makes the backward rule of `kind` scale its upstream gradient by 1.5.
    /// Only meant for checking that gradient verification catches a broken rule.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        t.dims2()
            .ok_or_else(|| Error::shape(op, format!("expected a matrix, got shape {:?}", t.shape())))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} · {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        mm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let ta = self.value(a);
        let data = ta.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * s).collect())
            .expect("same shape");
        let rg = self.requires_grad(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Adds a length-`c` bias to every row of an `r×c` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x, "add_bias")?;
        if self.value(bias).len() != c {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for rows of width {c}", self.value(bias).shape()),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            add_into(row, b);
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::AddBias(x, bias), rg))
    }

    /// Multiplies column `j` of an `r×c` matrix by `w[j]`.
    pub fn scale_cols(&mut self, x: Var, w: Var) -> Result<Var> {
        let (r, c) = self.dims(x, "scale_cols")?;
        if self.value(w).len() != c {
            return Err(Error::shape(
                "scale_cols",
                format!("weights {:?} for rows of width {c}", self.value(w).shape()),
            ));
        }
        let wv = self.value(w).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(wv).for_each(|(v, s)| *v *= s);
        }
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::ScaleCols(x, w), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a, "transpose")?;
        let out = transpose_data(self.value(a).data(), r, c);
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::matrix(c, r, out)?, Op::Transpose(a), rg))
    }

    /// Row-major reinterpretation of the extents.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", format!("columns {start}..{} of {c}", start + len)));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::matrix(r, len, out)?, Op::SliceCols { input: a, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let (r, _) = self.dims(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims(p, "concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", format!("row counts {r} and {pr}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::matrix(r, total, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let (_, c) = self.dims(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims(p, "concat_rows")?;
            if pc != c {
                return Err(Error::shape("concat_rows", format!("column counts {c} and {pc}")));
            }
            rows += pr;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::matrix(rows, c, out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a, "softmax_rows")?;
        let src = self.value(a).data();
        if src.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("softmax_rows: NaN input".into()));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = libm::exp(x - max);
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::SoftmaxRows(a), rg))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| gelu_scalar(x)).collect())
            .expect("same shape");
        let rg = self.requires_grad(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Normalizes every row of `x` over its columns (1/d variance), then
    /// applies the per-column affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, d) = self.dims(x, "layer_norm")?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape("layer_norm", format!("affine length must be {d}")));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * d];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(var + eps);
            inv_std[i] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { input: x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Group normalization of a `C×P` map: the channels are split into
    /// `groups` contiguous groups, each normalized over its `(C/groups)·P`
    /// entries, followed by a per-channel affine.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (c, p) = self.dims(x, "group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!("group_norm: {groups} groups do not divide {c} channels")));
        }
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("group_norm", format!("affine length must be {c}")));
        }
        let per = c / groups * p;
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; c * p];
        let mut inv_std = vec![0.0; groups];
        let mut out = vec![0.0; c * p];
        for grp in 0..groups {
            let range = grp * per..(grp + 1) * per;
            let block = &src[range.clone()];
            let mean = block.iter().sum::<f64>() / per as f64;
            let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let inv = 1.0 / libm::sqrt(var + eps);
            inv_std[grp] = inv;
            for idx in range {
                let ch = idx / p;
                let h = (src[idx] - mean) * inv;
                xhat[idx] = h;
                out[idx] = g[ch] * h + b[ch];
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::matrix(c, p, out)?,
            Op::GroupNorm { input: x, gamma, beta, groups, xhat, inv_std },
            rg,
        ))
    }

    /// Per-channel 1D cross-correlation of a `C×P` map with a `C×k` kernel
    /// stack, zero same-padding, stride one.
    pub fn depthwise_conv1d(&mut self, x: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (c, p) = self.dims(x, "depthwise_conv1d")?;
        let (kc, k) = self.dims(kernels, "depthwise_conv1d")?;
        if k % 2 == 0 {
            return Err(Error::Config(format!("depthwise_conv1d: kernel width {k} must be odd")));
        }
        if kc != c || self.value(bias).len() != c {
            return Err(Error::shape(
                "depthwise_conv1d",
                format!(
                    "input {:?}, kernels {:?}, bias {:?}",
                    self.value(x).shape(),
                    self.value(kernels).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let pad = (k - 1) / 2;
        let src = self.value(x).data();
        let ker = self.value(kernels).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; c * p];
        for ch in 0..c {
            let row = &src[ch * p..(ch + 1) * p];
            let kr = &ker[ch * k..(ch + 1) * k];
            for pos in 0..p {
                let mut s = b[ch];
                for (j, &w) in kr.iter().enumerate() {
                    // padded index pos + j maps to input index pos + j - pad
                    if let Some(q) = (pos + j).checked_sub(pad) {
                        if q < p {
                            s += w * row[q];
                        }
                    }
                }
                out[ch * p + pos] = s;
            }
        }
        let rg = self.any_grad(&[x, kernels, bias]);
        Ok(self.push(Tensor::matrix(c, p, out)?, Op::DepthwiseConv1d { input: x, kernels, bias }, rg))
    }

    /// Euclidean norm of every row, as an `r×1` column.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a, "row_norms")?;
        let src = self.value(a).data();
        let out = (0..r)
            .map(|i| libm::sqrt(src[i * c..(i + 1) * c].iter().map(|x| x * x).sum::<f64>()))
            .collect();
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::matrix(r, 1, out)?, Op::RowNorms(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut slots: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        slots.resize_with(self.nodes.len(), || None);
        if self.requires_grad(loss) {
            slots[loss.0] = Some(vec![1.0]);
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = slots[idx].take() else { continue };
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            self.backprop_node(node, &g, &mut slots);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && slots[idx].is_none() {
                slots[idx] = Some(vec![0.0; node.value.len()]);
            } else if !matches!(node.op, Op::Leaf) {
                slots[idx] = None;
            }
        }
        Ok(Gradients { slots })
    }

    fn accumulate(&self, slots: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires_grad(v) {
            return;
        }
        let len = self.value(v).len();
        let slot = slots[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node, g: &[f64], slots: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let (_, n) = self.value(*b).dims2().unwrap();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(slots, *a, |da| mm_nt_acc(g, bv, da, m, n, k));
                self.accumulate(slots, *b, |db| mm_tn_acc(av, g, db, m, k, n));
            }
            Op::Add(a, b) => {
                self.accumulate(slots, *a, |d| add_into(d, g));
                self.accumulate(slots, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(slots, *a, |d| add_into(d, g));
                self.accumulate(slots, *b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(slots, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(slots, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(slots, *a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
            }
            Op::AddBias(x, bias) => {
                let c = self.value(*bias).len();
                self.accumulate(slots, *x, |d| add_into(d, g));
                self.accumulate(slots, *bias, |d| {
                    for row in g.chunks(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::ScaleCols(x, w) => {
                let c = self.value(*w).len();
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                self.accumulate(slots, *x, |d| {
                    for (i, dv) in d.iter_mut().enumerate() {
                        *dv += g[i] * wv[i % c];
                    }
                });
                self.accumulate(slots, *w, |d| {
                    for (i, (gv, xv)) in g.iter().zip(xv).enumerate() {
                        d[i % c] += gv * xv;
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().unwrap();
                // g is c×r
                let gt = transpose_data(g, c, r);
                self.accumulate(slots, *a, |d| add_into(d, &gt));
            }
            Op::Reshape(a) => self.accumulate(slots, *a, |d| add_into(d, g)),
            Op::SliceCols { input, start } => {
                let (r, c) = self.value(*input).dims2().unwrap();
                let w = g.len() / r;
                self.accumulate(slots, *input, |d| {
                    for i in 0..r {
                        add_into(&mut d[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2().unwrap();
                    self.accumulate(slots, p, |d| {
                        for i in 0..r {
                            add_into(&mut d[i * w..(i + 1) * w], &g[i * total + offset..i * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(slots, p, |d| add_into(d, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = node.value.dims2().unwrap();
                let y = node.value.data();
                self.accumulate(slots, *a, |d| {
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.accumulate(slots, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * gelu_derivative(x[i]);
                    }
                });
            }
            Op::LayerNorm { input, gamma, beta, xhat, inv_std } => {
                let (r, dim) = node.value.dims2().unwrap();
                let gm = self.value(*gamma).data();
                self.accumulate(slots, *gamma, |d| {
                    for i in 0..r {
                        for j in 0..dim {
                            d[j] += g[i * dim + j] * xhat[i * dim + j];
                        }
                    }
                });
                self.accumulate(slots, *beta, |d| {
                    for row in g.chunks(dim) {
                        add_into(d, row);
                    }
                });
                self.accumulate(slots, *input, |d| {
                    let n = dim as f64;
                    for i in 0..r {
                        let base = i * dim;
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..dim {
                            let dh = g[base + j] * gm[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[base + j];
                        }
                        for j in 0..dim {
                            let dh = g[base + j] * gm[j];
                            d[base + j] +=
                                inv_std[i] / n * (n * dh - sum_dh - xhat[base + j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::GroupNorm { input, gamma, beta, groups, xhat, inv_std } => {
                let (c, p) = node.value.dims2().unwrap();
                let gm = self.value(*gamma).data();
                self.accumulate(slots, *gamma, |d| {
                    for ch in 0..c {
                        for pos in 0..p {
                            d[ch] += g[ch * p + pos] * xhat[ch * p + pos];
                        }
                    }
                });
                self.accumulate(slots, *beta, |d| {
                    for ch in 0..c {
                        d[ch] += g[ch * p..(ch + 1) * p].iter().sum::<f64>();
                    }
                });
                self.accumulate(slots, *input, |d| {
                    let per = c / groups * p;
                    let n = per as f64;
                    for grp in 0..*groups {
                        let base = grp * per;
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for idx in base..base + per {
                            let dh = g[idx] * gm[idx / p];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[idx];
                        }
                        for idx in base..base + per {
                            let dh = g[idx] * gm[idx / p];
                            d[idx] += inv_std[grp] / n * (n * dh - sum_dh - xhat[idx] * sum_dh_h);
                        }
                    }
                });
            }
            Op::DepthwiseConv1d { input, kernels, bias } => {
                let (c, p) = node.value.dims2().unwrap();
                let (_, k) = self.value(*kernels).dims2().unwrap();
                let pad = (k - 1) / 2;
                let xv = self.value(*input).data();
                let kv = self.value(*kernels).data();
                let taps = |pos: usize, j: usize| (pos + j).checked_sub(pad).filter(|&q| q < p);
                self.accumulate(slots, *bias, |d| {
                    for ch in 0..c {
                        d[ch] += g[ch * p..(ch + 1) * p].iter().sum::<f64>();
                    }
                });
                self.accumulate(slots, *kernels, |d| {
                    for ch in 0..c {
                        for pos in 0..p {
                            let gv = g[ch * p + pos];
                            for j in 0..k {
                                if let Some(q) = taps(pos, j) {
                                    d[ch * k + j] += gv * xv[ch * p + q];
                                }
                            }
                        }
                    }
                });
                self.accumulate(slots, *input, |d| {
                    for ch in 0..c {
                        for pos in 0..p {
                            let gv = g[ch * p + pos];
                            for j in 0..k {
                                if let Some(q) = taps(pos, j) {
                                    d[ch * p + q] += gv * kv[ch * k + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::RowNorms(a) => {
                let (r, c) = self.value(*a).dims2().unwrap();
                let x = self.value(*a).data();
                let norms = node.value.data();
                self.accumulate(slots, *a, |d| {
                    for i in 0..r {
                        // subgradient 0 at the origin
                        if norms[i] > 0.0 {
                            let s = g[i] / norms[i];
                            for j in 0..c {
                                d[i * c + j] += s * x[i * c + j];
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = g[0];
                self.accumulate(slots, *a, |d| d.iter_mut().for_each(|x| *x += s));
            }
            Op::Mean(a) => {
                let s = g[0] / self.value(*a).len() as f64;
                self.accumulate(slots, *a, |d| d.iter_mut().for_each(|x| *x += s));
            }
        }
    }
}
