use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, bias: Var },
    Scale { a: Var, s: f64 },
    ScaleRows { a: Var, w: Rc<[f64]> },
    ConcatCols { parts: Vec<(Var, usize)> },
    ConcatRows { parts: Vec<Var> },
    Reshape(Var),
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    GatherRows { a: Var, idx: Rc<[usize]> },
    IndexAdd { a: Var, idx: Rc<[usize]> },
    SumAll(Var),
    SumRows(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    MaskedFill { a: Var, mask: Rc<[bool]> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    CrossEntropy { logits: Var, targets: Rc<[usize]>, weights: Rc<[f64]>, probs: Vec<f64> },
    StraightThrough { zh: Var },
    Attention { q: Var, k: Var, v: Var, geo: AttnGeometry, probs: Vec<f64> },
}

#[derive(Clone, Copy, Debug)]
struct AttnGeometry {
    seqs: usize,
    steps: usize,
    parts: usize,
    heads: usize,
    dk: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode recording of a single forward pass.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// topological order for the backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Gradient data, zeros when nothing reached `v`.
    pub fn data(&self, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.shapes[v.0].iter().product()],
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Normalizes `x` (rows × cols) per column (`by_col`) or per row, returning
/// `(xhat, inv_std, mean, biased_var)`.
fn normalize(x: &[f64], rows: usize, cols: usize, by_col: bool, eps: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let groups = if by_col { cols } else { rows };
    let size = if by_col { rows } else { cols };
    let at = |g: usize, t: usize| if by_col { t * cols + g } else { g * cols + t };
    let mut mean = vec![0.0; groups];
    let mut var = vec![0.0; groups];
    for g in 0..groups {
        let mut s = 0.0;
        for t in 0..size {
            s += x[at(g, t)];
        }
        let mu = s / size as f64;
        let mut v = 0.0;
        for t in 0..size {
            let d = x[at(g, t)] - mu;
            v += d * d;
        }
        mean[g] = mu;
        var[g] = v / size as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    for g in 0..groups {
        for t in 0..size {
            let i = at(g, t);
            xhat[i] = (x[i] - mean[g]) * inv_std[g];
        }
    }
    (xhat, inv_std, mean, var)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient copy of `v`.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.shape().len() != 2 {
            return shape_err(format!("{what} expects a matrix, got {:?}", t.shape()));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return shape_err(format!("matmul inner dims {k} vs {k2}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, m, k, n }, needs))
    }

    /// `a (m×k) · bᵀ` with `b` stored as `n×k`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return shape_err(format!("matmul_nt inner dims {k} vs {k2}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, 0.0, &mut out);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt { a, b, m, k, n }, needs))
    }

    fn zip(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(format!("{what}: {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), self.needs(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), self.needs(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), self.needs(&[a, b])))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var> {
        let t = {
            let (ta, tb) = (self.value(a), self.value(bias));
            let c = ta.cols();
            if tb.len() != c {
                return shape_err(format!("add_row: bias of {} for {c} columns", tb.len()));
            }
            let mut data = ta.data().to_vec();
            for row in data.chunks_mut(c.max(1)) {
                for (x, &b) in row.iter_mut().zip(tb.data()) {
                    *x += b;
                }
            }
            Tensor::new(ta.shape().to_vec(), data)?
        };
        Ok(self.push(t, Op::AddRow { a, bias }, self.needs(&[a, bias])))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let t = {
            let ta = self.value(a);
            Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * s).collect()).expect("same shape")
        };
        self.push(t, Op::Scale { a, s }, self.needs(&[a]))
    }

    /// Multiplies row `r` of `a` by the constant `w[r]`.
    pub fn scale_rows(&self, a: Var, w: &[f64]) -> Result<Var> {
        let t = {
            let ta = self.value(a);
            if ta.rows() != w.len() {
                return shape_err(format!("scale_rows: {} weights for {} rows", w.len(), ta.rows()));
            }
            let c = ta.cols();
            let mut data = ta.data().to_vec();
            for (r, row) in data.chunks_mut(c.max(1)).enumerate() {
                row.iter_mut().for_each(|x| *x *= w[r]);
            }
            Tensor::new(ta.shape().to_vec(), data)?
        };
        Ok(self.push(t, Op::ScaleRows { a, w: w.into() }, self.needs(&[a])))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat of nothing".into());
        }
        let rows = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return shape_err(format!("concat_cols rows {r} vs {rows}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let needs = self.needs(parts);
        let op = Op::ConcatCols { parts: parts.iter().copied().zip(widths).collect() };
        Ok(self.push(Tensor::new(vec![rows, total], out)?, op, needs))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat of nothing".into());
        }
        let cols = self.dims2(parts[0], "concat_rows")?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return shape_err(format!("concat_rows cols {c} vs {cols}"));
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let needs = self.needs(parts);
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::ConcatRows { parts: parts.to_vec() }, needs))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(a), self.needs(&[a])))
    }

    pub fn slice_cols(&self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "slice_cols")?;
        if start + width > cols {
            return shape_err(format!("slice_cols {start}+{width} beyond {cols}"));
        }
        let t = {
            let ta = self.value(a);
            let mut out = Vec::with_capacity(rows * width);
            for r in 0..rows {
                out.extend_from_slice(&ta.data()[r * cols + start..r * cols + start + width]);
            }
            Tensor::new(vec![rows, width], out)?
        };
        Ok(self.push(t, Op::SliceCols { a, start }, self.needs(&[a])))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "slice_rows")?;
        if start + len > rows {
            return shape_err(format!("slice_rows {start}+{len} beyond {rows}"));
        }
        let t = Tensor::new(vec![len, cols], self.value(a).data()[start * cols..(start + len) * cols].to_vec())?;
        Ok(self.push(t, Op::SliceRows { a, start }, self.needs(&[a])))
    }

    /// Row lookup: `out[k] = a[idx[k]]` (embedding lookup / index select).
    pub fn gather_rows(&self, a: Var, idx: &Rc<[usize]>) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "gather_rows")?;
        let t = {
            let ta = self.value(a);
            let mut out = Vec::with_capacity(idx.len() * cols);
            for &i in idx.iter() {
                if i >= rows {
                    return shape_err(format!("gather index {i} beyond {rows} rows"));
                }
                out.extend_from_slice(&ta.data()[i * cols..(i + 1) * cols]);
            }
            Tensor::new(vec![idx.len(), cols], out)?
        };
        Ok(self.push(t, Op::GatherRows { a, idx: idx.clone() }, self.needs(&[a])))
    }

    /// Scatter-sum: `out[idx[k]] += a[k]`, output has `rows` rows.
    pub fn index_add(&self, a: Var, idx: &Rc<[usize]>, rows: usize) -> Result<Var> {
        let (r, cols) = self.dims2(a, "index_add")?;
        if r != idx.len() {
            return shape_err(format!("index_add: {} indices for {r} rows", idx.len()));
        }
        let t = {
            let ta = self.value(a);
            let mut out = vec![0.0; rows * cols];
            for (k, &i) in idx.iter().enumerate() {
                if i >= rows {
                    return shape_err(format!("index_add target {i} beyond {rows} rows"));
                }
                let src = &ta.data()[k * cols..(k + 1) * cols];
                for (o, s) in out[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                    *o += s;
                }
            }
            Tensor::new(vec![rows, cols], out)?
        };
        Ok(self.push(t, Op::IndexAdd { a, idx: idx.clone() }, self.needs(&[a])))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), self.needs(&[a]))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Column sums: `rows × cols -> [cols]`.
    pub fn sum_rows(&self, a: Var) -> Var {
        let t = {
            let ta = self.value(a);
            let c = ta.cols();
            let mut out = vec![0.0; c];
            for row in ta.data().chunks(c.max(1)) {
                for (o, x) in out.iter_mut().zip(row) {
                    *o += x;
                }
            }
            Tensor::vector(out)
        };
        self.push(t, Op::SumRows(a), self.needs(&[a]))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn relu(&self, a: Var) -> Var {
        let t = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(t, Op::Relu(a), self.needs(&[a]))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let t = self.map(a, |x| 1.0 / (1.0 + (-x).exp()));
        self.push(t, Op::Sigmoid(a), self.needs(&[a]))
    }

    pub fn exp(&self, a: Var) -> Var {
        let t = self.map(a, f64::exp);
        self.push(t, Op::Exp(a), self.needs(&[a]))
    }

    pub fn log(&self, a: Var) -> Var {
        let t = self.map(a, f64::ln);
        self.push(t, Op::Log(a), self.needs(&[a]))
    }

    /// Softmax over the last axis. `-inf` entries get probability 0; a row that
    /// is entirely `-inf` yields zeros.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let t = {
            let ta = self.value(a);
            let c = ta.cols();
            if c == 0 {
                return shape_err("softmax over an empty axis".into());
            }
            let mut out = vec![0.0; ta.len()];
            for (o, x) in out.chunks_mut(c).zip(ta.data().chunks(c)) {
                softmax_row(x, o);
            }
            Tensor::new(ta.shape().to_vec(), out)?
        };
        Ok(self.push(t, Op::Softmax(a), self.needs(&[a])))
    }

    /// Replaces entries where `mask` is true by `value`; those entries pass no gradient.
    pub fn masked_fill(&self, a: Var, mask: &Rc<[bool]>, value: f64) -> Result<Var> {
        let t = {
            let ta = self.value(a);
            if mask.len() != ta.len() {
                return shape_err(format!("mask of {} for {} values", mask.len(), ta.len()));
            }
            let data = ta.data().iter().zip(mask.iter()).map(|(&x, &m)| if m { value } else { x }).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        };
        Ok(self.push(t, Op::MaskedFill { a, mask: mask.clone() }, self.needs(&[a])))
    }

    fn norm_params(&self, x: Var, gamma: Var, beta: Var, feat: usize, what: &str) -> Result<()> {
        if self.value(gamma).len() != feat || self.value(beta).len() != feat {
            return shape_err(format!("{what}: affine parameters must have {feat} entries"));
        }
        let _ = x;
        Ok(())
    }

    fn affine(xhat: &[f64], cols: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
        let mut out = xhat.to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            for ((y, g), b) in row.iter_mut().zip(gamma).zip(beta) {
                *y = *y * g + b;
            }
        }
        out
    }

    /// Training-mode batch normalization over the rows of `x`.
    ///
    /// Returns the output with the batch mean and biased batch variance.
    pub fn batch_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (rows, cols) = self.dims2(x, "batch_norm")?;
        self.norm_params(x, gamma, beta, cols, "batch_norm")?;
        if rows == 0 {
            return shape_err("batch_norm over zero rows".into());
        }
        let (xhat, inv_std, mean, var) = normalize(self.value(x).data(), rows, cols, true, eps);
        let out = Self::affine(&xhat, cols, self.value(gamma).data(), self.value(beta).data());
        let needs = self.needs(&[x, gamma, beta]);
        let v = self.push(Tensor::new(vec![rows, cols], out)?, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, needs);
        Ok((v, mean, var))
    }

    /// Inference-mode batch normalization with fixed statistics: a per-column affine map.
    pub fn batch_norm_eval(&self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "batch_norm_eval")?;
        self.norm_params(x, gamma, beta, cols, "batch_norm_eval")?;
        if mean.len() != cols || var.len() != cols {
            return shape_err("batch_norm_eval statistics width".into());
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = self.value(x).data().to_vec();
        for row in xhat.chunks_mut(cols.max(1)) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[c]) * inv_std[c];
            }
        }
        let out = Self::affine(&xhat, cols, self.value(gamma).data(), self.value(beta).data());
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::BatchNormEval { x, gamma, beta, xhat, inv_std }, needs))
    }

    /// Layer normalization over the last axis of a matrix.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "layer_norm")?;
        self.norm_params(x, gamma, beta, cols, "layer_norm")?;
        let (xhat, inv_std, _, _) = normalize(self.value(x).data(), rows, cols, false, eps);
        let out = Self::affine(&xhat, cols, self.value(gamma).data(), self.value(beta).data());
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, needs))
    }

    /// `Σ_r weights[r] · (−log softmax(logits[r])[targets[r]])` as a scalar.
    ///
    /// Masked (`-inf`) logits are allowed anywhere except at the target.
    pub fn cross_entropy(&self, logits: Var, targets: &Rc<[usize]>, weights: &Rc<[f64]>) -> Result<Var> {
        let (rows, cols) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != rows || weights.len() != rows {
            return shape_err(format!("cross_entropy: {rows} rows, {} targets, {} weights", targets.len(), weights.len()));
        }
        let mut probs = vec![0.0; rows * cols];
        let mut total = 0.0;
        {
            let tl = self.value(logits);
            for r in 0..rows {
                let t = targets[r];
                if t >= cols {
                    return shape_err(format!("target {t} beyond {cols} classes"));
                }
                let x = &tl.data()[r * cols..(r + 1) * cols];
                if x[t] == f64::NEG_INFINITY {
                    return Err(Error::NonFinite(format!("target class {t} of row {r} is masked")));
                }
                softmax_row(x, &mut probs[r * cols..(r + 1) * cols]);
                if weights[r] != 0.0 {
                    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
                    total += weights[r] * (lse - x[t]);
                }
            }
        }
        let op = Op::CrossEntropy { logits, targets: targets.clone(), weights: weights.clone(), probs };
        Ok(self.push(Tensor::scalar(total), op, self.needs(&[logits])))
    }

    /// Value of `zq`, gradient routed to `zh` unchanged; `zq` receives nothing.
    pub fn straight_through(&self, zh: Var, zq: Var) -> Result<Var> {
        let t = {
            let (th, tq) = (self.value(zh), self.value(zq));
            if th.shape() != tq.shape() {
                return shape_err(format!("straight_through: {:?} vs {:?}", th.shape(), tq.shape()));
            }
            tq.clone()
        };
        Ok(self.push(t, Op::StraightThrough { zh }, self.needs(&[zh])))
    }

    /// Multi-head attention where every query row attends to strictly earlier
    /// key rows.
    ///
    /// `q` is `(steps·parts) × d` with rows ordered step-major, `k` and `v` are
    /// `steps × d`; `d` splits into `heads` blocks. Query `(t, c)` attends to key
    /// rows `j < t`; step 0 has no keys and yields zeros.
    pub fn attention_2d(&self, q: Var, k: Var, v: Var, parts: usize, heads: usize) -> Result<Var> {
        self.attention_2d_batched(q, k, v, 1, parts, heads)
    }

    /// [`Tape::attention_2d`] over `seqs` independent sequences of equal length
    /// stacked along the rows.
    pub fn attention_2d_batched(&self, q: Var, k: Var, v: Var, seqs: usize, parts: usize, heads: usize) -> Result<Var> {
        let (qr, d) = self.dims2(q, "attention_2d")?;
        let (kr, dk_all) = self.dims2(k, "attention_2d")?;
        if self.dims2(v, "attention_2d")? != (kr, d) || dk_all != d {
            return shape_err("attention_2d: keys/values must be steps × d".into());
        }
        if seqs == 0 || kr % seqs != 0 {
            return shape_err(format!("attention_2d: {kr} key rows for {seqs} sequences"));
        }
        let steps = kr / seqs;
        if parts == 0 || qr != kr * parts {
            return shape_err(format!("attention_2d: {qr} query rows for {kr} steps × {parts} parts"));
        }
        if heads == 0 || d % heads != 0 {
            return shape_err(format!("attention_2d: width {d} not divisible by {heads} heads"));
        }
        let geo = AttnGeometry { seqs, steps, parts, heads, dk: d / heads };
        let (out, probs) = attention_forward(self.value(q).data(), self.value(k).data(), self.value(v).data(), geo);
        let needs = self.needs(&[q, k, v]);
        Ok(self.push(Tensor::new(vec![qr, d], out)?, Op::Attention { q, k, v, geo, probs }, needs))
    }

    /// Reverse sweep from `loss`, seeded with ones.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0; nodes[loss.0].value.len()]);
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_node(&nodes, &mut grads, node, &g)?;
            grads[id] = Some(g);
        }
        Ok(Grads { grads, shapes })
    }
}

fn attention_offsets(geo: AttnGeometry) -> Vec<usize> {
    // probs for query row r = t·parts + c, head h occupy t consecutive slots
    let mut offsets = Vec::with_capacity(geo.steps * geo.parts * geo.heads + 1);
    let mut off = 0;
    for t in 0..geo.steps {
        for _ in 0..geo.parts * geo.heads {
            offsets.push(off);
            off += t;
        }
    }
    offsets.push(off);
    offsets
}

fn attention_forward(q: &[f64], k: &[f64], v: &[f64], geo: AttnGeometry) -> (Vec<f64>, Vec<f64>) {
    let d = geo.heads * geo.dk;
    let offsets = attention_offsets(geo);
    let per_seq = *offsets.last().unwrap();
    let (qs, ks) = (geo.steps * geo.parts * d, geo.steps * d);
    let mut probs = vec![0.0; per_seq * geo.seqs];
    let mut out = vec![0.0; qs * geo.seqs];
    for b in 0..geo.seqs {
        attention_forward_seq(
            &q[b * qs..(b + 1) * qs],
            &k[b * ks..(b + 1) * ks],
            &v[b * ks..(b + 1) * ks],
            geo,
            &offsets,
            &mut out[b * qs..(b + 1) * qs],
            &mut probs[b * per_seq..(b + 1) * per_seq],
        );
    }
    (out, probs)
}

fn attention_forward_seq(q: &[f64], k: &[f64], v: &[f64], geo: AttnGeometry, offsets: &[usize], out: &mut [f64], probs: &mut [f64]) {
    let AttnGeometry { steps, parts, heads, dk, .. } = geo;
    let d = heads * dk;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut scores = Vec::with_capacity(steps);
    for t in 1..steps {
        for c in 0..parts {
            let r = t * parts + c;
            for h in 0..heads {
                let qv = &q[r * d + h * dk..r * d + (h + 1) * dk];
                scores.clear();
                for j in 0..t {
                    let kv = &k[j * d + h * dk..j * d + (h + 1) * dk];
                    scores.push(qv.iter().zip(kv).map(|(a, b)| a * b).sum::<f64>() * scale);
                }
                let off = offsets[r * heads + h];
                let p = &mut probs[off..off + t];
                softmax_row(&scores, p);
                let o = &mut out[r * d + h * dk..r * d + (h + 1) * dk];
                for (j, &pj) in p.iter().enumerate() {
                    let vv = &v[j * d + h * dk..j * d + (h + 1) * dk];
                    for (oo, vx) in o.iter_mut().zip(vv) {
                        *oo += pj * vx;
                    }
                }
            }
        }
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn norm_backward(
    g: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    rows: usize,
    cols: usize,
    by_col: bool,
) -> Vec<f64> {
    let mut dx = vec![0.0; g.len()];
    let groups = if by_col { cols } else { rows };
    let size = if by_col { rows } else { cols };
    let at = |grp: usize, t: usize| if by_col { t * cols + grp } else { grp * cols + t };
    let feat = |i: usize| i % cols;
    for grp in 0..groups {
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for t in 0..size {
            let i = at(grp, t);
            let dxh = g[i] * gamma[feat(i)];
            s1 += dxh;
            s2 += dxh * xhat[i];
        }
        let nf = size as f64;
        for t in 0..size {
            let i = at(grp, t);
            let dxh = g[i] * gamma[feat(i)];
            dx[i] = inv_std[grp] / nf * (nf * dxh - s1 - xhat[i] * s2);
        }
    }
    dx
}

fn affine_param_grads(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    g: &[f64],
    xhat: &[f64],
    cols: usize,
    gamma: Var,
    beta: Var,
) {
    if let Some(dg) = acc(grads, nodes, gamma) {
        for (k, (gg, xh)) in g.iter().zip(xhat).enumerate() {
            dg[k % cols] += gg * xh;
        }
    }
    if let Some(db) = acc(grads, nodes, beta) {
        for (k, gg) in g.iter().enumerate() {
            db[k % cols] += gg;
        }
    }
}

fn backward_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) -> Result<()> {
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            // dA += dC·Bᵀ, dB += Aᵀ·dC
            if let Some(da) = acc(grads, nodes, a) {
                gemm(m, n, k, g, false, val(b), true, 1.0, da);
            }
            if let Some(db) = acc(grads, nodes, b) {
                gemm(k, m, n, val(a), true, g, false, 1.0, db);
            }
        }
        &Op::MatMulNt { a, b, m, k, n } => {
            // C = A·Bᵀ: dA += dC·B, dB += dCᵀ·A
            if let Some(da) = acc(grads, nodes, a) {
                gemm(m, n, k, g, false, val(b), false, 1.0, da);
            }
            if let Some(db) = acc(grads, nodes, b) {
                gemm(n, m, k, g, true, val(a), false, 1.0, db);
            }
        }
        &Op::Add(a, b) => {
            if let Some(da) = acc(grads, nodes, a) {
                add_into(da, g);
            }
            if let Some(db) = acc(grads, nodes, b) {
                add_into(db, g);
            }
        }
        &Op::Sub(a, b) => {
            if let Some(da) = acc(grads, nodes, a) {
                add_into(da, g);
            }
            if let Some(db) = acc(grads, nodes, b) {
                db.iter_mut().zip(g).for_each(|(d, x)| *d -= x);
            }
        }
        &Op::Mul(a, b) => {
            if let Some(da) = acc(grads, nodes, a) {
                da.iter_mut().zip(g).zip(val(b)).for_each(|((d, x), y)| *d += x * y);
            }
            if let Some(db) = acc(grads, nodes, b) {
                db.iter_mut().zip(g).zip(val(a)).for_each(|((d, x), y)| *d += x * y);
            }
        }
        &Op::AddRow { a, bias } => {
            if let Some(da) = acc(grads, nodes, a) {
                add_into(da, g);
            }
            if let Some(db) = acc(grads, nodes, bias) {
                let c = db.len().max(1);
                for row in g.chunks(c) {
                    add_into(db, row);
                }
            }
        }
        &Op::Scale { a, s } => {
            if let Some(da) = acc(grads, nodes, a) {
                da.iter_mut().zip(g).for_each(|(d, x)| *d += s * x);
            }
        }
        Op::ScaleRows { a, w } => {
            let c = nodes[a.0].value.cols().max(1);
            if let Some(da) = acc(grads, nodes, *a) {
                for (r, (drow, grow)) in da.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                    drow.iter_mut().zip(grow).for_each(|(d, x)| *d += w[r] * x);
                }
            }
        }
        Op::ConcatCols { parts } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let rows = if total == 0 { 0 } else { g.len() / total };
            let mut off = 0;
            for &(p, w) in parts {
                if let Some(dp) = acc(grads, nodes, p) {
                    for r in 0..rows {
                        add_into(&mut dp[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                    }
                }
                off += w;
            }
        }
        Op::ConcatRows { parts } => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p.0].value.len();
                if let Some(dp) = acc(grads, nodes, p) {
                    add_into(dp, &g[off..off + len]);
                }
                off += len;
            }
        }
        &Op::Reshape(a) => {
            if let Some(da) = acc(grads, nodes, a) {
                add_into(da, g);
            }
        }
        &Op::SliceCols { a, start } => {
            let cols = nodes[a.0].value.cols();
            let w = node.value.cols();
            if let Some(da) = acc(grads, nodes, a) {
                for (r, grow) in g.chunks(w.max(1)).enumerate() {
                    add_into(&mut da[r * cols + start..r * cols + start + w], grow);
                }
            }
        }
        &Op::SliceRows { a, start } => {
            let cols = nodes[a.0].value.cols();
            if let Some(da) = acc(grads, nodes, a) {
                add_into(&mut da[start * cols..start * cols + g.len()], g);
            }
        }
        Op::GatherRows { a, idx } => {
            let cols = nodes[a.0].value.cols();
            if let Some(da) = acc(grads, nodes, *a) {
                for (k, &i) in idx.iter().enumerate() {
                    add_into(&mut da[i * cols..(i + 1) * cols], &g[k * cols..(k + 1) * cols]);
                }
            }
        }
        Op::IndexAdd { a, idx } => {
            let cols = nodes[a.0].value.cols();
            if let Some(da) = acc(grads, nodes, *a) {
                for (k, &i) in idx.iter().enumerate() {
                    add_into(&mut da[k * cols..(k + 1) * cols], &g[i * cols..(i + 1) * cols]);
                }
            }
        }
        &Op::SumAll(a) => {
            if let Some(da) = acc(grads, nodes, a) {
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::SumRows(a) => {
            if let Some(da) = acc(grads, nodes, a) {
                let c = g.len().max(1);
                for row in da.chunks_mut(c) {
                    add_into(row, g);
                }
            }
        }
        &Op::Relu(a) => {
            if let Some(da) = acc(grads, nodes, a) {
                for ((d, x), y) in da.iter_mut().zip(g).zip(node.value.data()) {
                    if *y > 0.0 {
                        *d += x;
                    }
                }
            }
        }
        &Op::Sigmoid(a) => {
            if let Some(da) = acc(grads, nodes, a) {
                for ((d, x), y) in da.iter_mut().zip(g).zip(node.value.data()) {
                    *d += x * y * (1.0 - y);
                }
            }
        }
        &Op::Exp(a) => {
            if let Some(da) = acc(grads, nodes, a) {
                for ((d, x), y) in da.iter_mut().zip(g).zip(node.value.data()) {
                    *d += x * y;
                }
            }
        }
        &Op::Log(a) => {
            let xs = val(a).to_vec();
            if let Some(da) = acc(grads, nodes, a) {
                for ((d, x), v) in da.iter_mut().zip(g).zip(&xs) {
                    *d += x / v;
                }
            }
        }
        &Op::Softmax(a) => {
            let c = node.value.cols().max(1);
            if let Some(da) = acc(grads, nodes, a) {
                for ((drow, grow), yrow) in da.chunks_mut(c).zip(g.chunks(c)).zip(node.value.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for ((d, x), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += y * (x - dot);
                    }
                }
            }
        }
        Op::MaskedFill { a, mask } => {
            if let Some(da) = acc(grads, nodes, *a) {
                for ((d, x), &m) in da.iter_mut().zip(g).zip(mask.iter()) {
                    if !m {
                        *d += x;
                    }
                }
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
            let (rows, cols) = (node.value.rows(), node.value.cols());
            let gam = val(*gamma).to_vec();
            affine_param_grads(grads, nodes, g, xhat, cols, *gamma, *beta);
            if nodes[x.0].needs_grad {
                let dx = norm_backward(g, xhat, inv_std, &gam, rows, cols, true);
                add_into(acc(grads, nodes, *x).unwrap(), &dx);
            }
        }
        Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
            let cols = node.value.cols();
            let gam = val(*gamma).to_vec();
            affine_param_grads(grads, nodes, g, xhat, cols, *gamma, *beta);
            if let Some(dx) = acc(grads, nodes, *x) {
                for (k, (d, gg)) in dx.iter_mut().zip(g).enumerate() {
                    let c = k % cols;
                    *d += gg * gam[c] * inv_std[c];
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let (rows, cols) = (node.value.rows(), node.value.cols());
            let gam = val(*gamma).to_vec();
            affine_param_grads(grads, nodes, g, xhat, cols, *gamma, *beta);
            if nodes[x.0].needs_grad {
                let dx = norm_backward(g, xhat, inv_std, &gam, rows, cols, false);
                add_into(acc(grads, nodes, *x).unwrap(), &dx);
            }
        }
        Op::CrossEntropy { logits, targets, weights, probs } => {
            let cols = nodes[logits.0].value.cols();
            if let Some(dl) = acc(grads, nodes, *logits) {
                for (r, (&t, &w)) in targets.iter().zip(weights.iter()).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let s = w * g[0];
                    let row = &mut dl[r * cols..(r + 1) * cols];
                    for (d, p) in row.iter_mut().zip(&probs[r * cols..(r + 1) * cols]) {
                        *d += s * p;
                    }
                    row[t] -= s;
                }
            }
        }
        &Op::StraightThrough { zh } => {
            if let Some(dz) = acc(grads, nodes, zh) {
                add_into(dz, g);
            }
        }
        Op::Attention { q, k, v, geo, probs } => {
            let (dq, dk, dv) = attention_backward(g, val(*q), val(*k), val(*v), probs, *geo);
            if let Some(d) = acc(grads, nodes, *q) {
                add_into(d, &dq);
            }
            if let Some(d) = acc(grads, nodes, *k) {
                add_into(d, &dk);
            }
            if let Some(d) = acc(grads, nodes, *v) {
                add_into(d, &dv);
            }
        }
    }
    Ok(())
}

fn attention_backward(
    g: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    geo: AttnGeometry,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = geo.heads * geo.dk;
    let offsets = attention_offsets(geo);
    let per_seq = *offsets.last().unwrap();
    let (qs, ks) = (geo.steps * geo.parts * d, geo.steps * d);
    let mut dq = vec![0.0; q.len()];
    let mut dkk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    for b in 0..geo.seqs {
        let (qr, kr) = (b * qs..(b + 1) * qs, b * ks..(b + 1) * ks);
        attention_backward_seq(
            &g[qr.clone()],
            &q[qr.clone()],
            &k[kr.clone()],
            &v[kr.clone()],
            &probs[b * per_seq..(b + 1) * per_seq],
            geo,
            &offsets,
            (&mut dq[qr], &mut dkk[kr.clone()], &mut dv[kr]),
        );
    }
    (dq, dkk, dv)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward_seq(
    g: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    geo: AttnGeometry,
    offsets: &[usize],
    (dq, dkk, dv): (&mut [f64], &mut [f64], &mut [f64]),
) {
    let AttnGeometry { steps, parts, heads, dk, .. } = geo;
    let d = heads * dk;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dp = Vec::with_capacity(steps);
    for t in 1..steps {
        for c in 0..parts {
            let r = t * parts + c;
            for h in 0..heads {
                let hs = h * dk..(h + 1) * dk;
                let go = &g[r * d + hs.start..r * d + hs.end];
                let off = offsets[r * heads + h];
                let p = &probs[off..off + t];
                dp.clear();
                for (j, &pj) in p.iter().enumerate() {
                    let vv = &v[j * d + hs.start..j * d + hs.end];
                    dp.push(go.iter().zip(vv).map(|(a, b)| a * b).sum::<f64>());
                    for (dvx, gx) in dv[j * d + hs.start..j * d + hs.end].iter_mut().zip(go) {
                        *dvx += pj * gx;
                    }
                }
                let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let qv = &q[r * d + hs.start..r * d + hs.end];
                for j in 0..t {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for x in 0..dk {
                        dq[r * d + hs.start + x] += ds * k[j * d + hs.start + x];
                        dkk[j * d + hs.start + x] += ds * qv[x];
                    }
                }
            }
        }
    }
}
