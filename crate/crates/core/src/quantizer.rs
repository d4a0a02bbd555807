//! Partitioned vector quantization with EMA codebooks.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const EMA_DECAY: f64 = 0.99;
pub const EMA_EPS: f64 = 1e-5;

/// `C` codebooks of `m` vectors of width `dim`, with EMA accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookSet {
    pub parts: usize,
    pub m: usize,
    pub dim: usize,
    pub decay: f64,
    pub eps: f64,
    /// Per partition, `m × dim`.
    pub codewords: Vec<Vec<f64>>,
    /// Per partition, EMA cluster sizes (`m`).
    pub ema_count: Vec<Vec<f64>>,
    /// Per partition, EMA vector sums (`m × dim`).
    pub ema_sum: Vec<Vec<f64>>,
    pub initialized: bool,
}

impl CodebookSet {
    pub fn new(parts: usize, m: usize, dim: usize) -> Result<Self> {
        if parts == 0 || m == 0 || dim == 0 {
            return Err(Error::Config(vec!["codebook dimensions must be positive".into()]));
        }
        Ok(CodebookSet {
            parts,
            m,
            dim,
            decay: EMA_DECAY,
            eps: EMA_EPS,
            codewords: vec![vec![0.0; m * dim]; parts],
            ema_count: vec![vec![0.0; m]; parts],
            ema_sum: vec![vec![0.0; m * dim]; parts],
            initialized: false,
        })
    }

    pub fn d_latent(&self) -> usize {
        self.parts * self.dim
    }

    /// Dictionary size `m^C`.
    pub fn dictionary_size(&self) -> f64 {
        (self.m as f64).powi(self.parts as i32)
    }

    pub fn codeword(&self, c: usize, k: usize) -> &[f64] {
        &self.codewords[c][k * self.dim..(k + 1) * self.dim]
    }

    /// Installs centers for partition `c`; accumulators start consistent with
    /// them (`S = H·N`) so the first EMA step has no jump.
    pub fn set_codebook(&mut self, c: usize, centers: &[f64], counts: &[f64]) -> Result<()> {
        if centers.len() != self.m * self.dim || counts.len() != self.m {
            return Err(Error::Shape(format!("codebook {c}: expected {} × {}", self.m, self.dim)));
        }
        self.codewords[c] = centers.to_vec();
        self.ema_count[c] = counts.to_vec();
        self.ema_sum[c] = centers.iter().enumerate().map(|(k, &x)| x * counts[k / self.dim]).collect();
        if c + 1 == self.parts {
            self.initialized = true;
        }
        Ok(())
    }
}

/// Reshapes `n × d` into `n × C × d/C`.
pub fn partition(z: &Tensor, parts: usize) -> Result<Tensor> {
    if z.shape().len() != 2 {
        return Err(Error::Shape(format!("partition expects a matrix, got {:?}", z.shape())));
    }
    let (n, d) = (z.shape()[0], z.shape()[1]);
    if parts == 0 || d % parts != 0 {
        return Err(Error::Shape(format!("latent width {d} is not divisible into {parts} partitions")));
    }
    z.clone().reshaped(vec![n, parts, d / parts])
}

/// Quantized latents: codewords `n × C × dim` and indices `n × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedSet {
    pub n: usize,
    pub parts: usize,
    pub codewords: Tensor,
    pub indices: Vec<usize>,
}

impl QuantizedSet {
    pub fn tuple(&self, i: usize) -> &[usize] {
        &self.indices[i * self.parts..(i + 1) * self.parts]
    }

    /// Codewords as `n × (C·dim)` rows.
    pub fn flat(&self) -> Tensor {
        let n = self.n;
        let w = self.codewords.len() / n.max(1);
        self.codewords.clone().reshaped(vec![n, w]).expect("flat codewords")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center, lowest index on ties.
pub fn nearest(v: &[f64], centers: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.chunks(dim).enumerate() {
        let d = sq_dist(v, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Per partition, replaces each sub-vector by its nearest codeword.
///
/// Accepts `n × C × dim` or `n × (C·dim)` input.
pub fn quantize(z_parts: &Tensor, cbs: &CodebookSet) -> Result<QuantizedSet> {
    if !cbs.initialized {
        return Err(Error::Numerical("codebooks are not initialized".into()));
    }
    let width = cbs.parts * cbs.dim;
    if z_parts.len() % width != 0 || z_parts.cols() % cbs.dim != 0 {
        return Err(Error::Shape(format!("latents {:?} do not split into {} × {}", z_parts.shape(), cbs.parts, cbs.dim)));
    }
    let n = z_parts.len() / width;
    let mut indices = Vec::with_capacity(n * cbs.parts);
    let mut out = Vec::with_capacity(n * width);
    for i in 0..n {
        for c in 0..cbs.parts {
            let at = (i * cbs.parts + c) * cbs.dim;
            let (k, _) = nearest(&z_parts.data()[at..at + cbs.dim], &cbs.codewords[c], cbs.dim);
            indices.push(k);
            out.extend_from_slice(cbs.codeword(c, k));
        }
    }
    Ok(QuantizedSet { n, parts: cbs.parts, codewords: Tensor::new(vec![n, cbs.parts, cbs.dim], out)?, indices })
}

/// Codewords for given index tuples (`n × C` indices).
pub fn lookup(cbs: &CodebookSet, indices: &[usize]) -> Result<QuantizedSet> {
    if indices.len() % cbs.parts != 0 {
        return Err(Error::Shape("index count not a multiple of the partition count".into()));
    }
    let n = indices.len() / cbs.parts;
    let mut out = Vec::with_capacity(n * cbs.parts * cbs.dim);
    for (k, &ix) in indices.iter().enumerate() {
        if ix >= cbs.m {
            return Err(Error::Shape(format!("codeword index {ix} beyond {}", cbs.m)));
        }
        out.extend_from_slice(cbs.codeword(k % cbs.parts, ix));
    }
    Ok(QuantizedSet { n, parts: cbs.parts, codewords: Tensor::new(vec![n, cbs.parts, cbs.dim], out)?, indices: indices.to_vec() })
}

/// Result of k-means++ seeding followed by Lloyd iterations.
#[derive(Clone, Debug)]
pub struct KMeans {
    /// `m × dim`.
    pub centers: Vec<f64>,
    /// Samples assigned to each center at convergence.
    pub counts: Vec<usize>,
    pub iterations: usize,
    /// Set when fewer distinct samples than centers forced duplicates.
    pub warning: Option<String>,
}

/// k-means++ seeding, then Lloyd iterations until no center moves more than
/// `1e-6` or 100 iterations. Empty clusters keep their previous center.
pub fn kmeanspp_init<R: Rng + ?Sized>(samples: &[f64], dim: usize, m: usize, rng: &mut R) -> Result<KMeans> {
    if dim == 0 || samples.len() % dim != 0 {
        return Err(Error::Shape("samples do not split into vectors".into()));
    }
    let count = samples.len() / dim;
    if count < m || m == 0 {
        return Err(Error::Numerical(format!("k-means++ needs at least {m} samples, got {count}")));
    }
    let row = |i: usize| &samples[i * dim..(i + 1) * dim];
    let mut centers = Vec::with_capacity(m * dim);
    let mut warning = None;
    let first = rng.random_range(0..count);
    centers.extend_from_slice(row(first));
    let mut d2: Vec<f64> = (0..count).map(|i| sq_dist(row(i), row(first))).collect();
    for _ in 1..m {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut pick = count - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            // guard against rounding landing on a zero-weight tail
            while d2[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            warning = Some(format!("fewer than {m} distinct samples; duplicate centers"));
            rng.random_range(0..count)
        };
        let c = row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &c));
        }
        centers.extend_from_slice(&c);
    }

    let mut counts = vec![0usize; m];
    let mut iterations = 0;
    for it in 0..100 {
        iterations = it + 1;
        let mut sums = vec![0.0; m * dim];
        counts.iter_mut().for_each(|c| *c = 0);
        for i in 0..count {
            let (k, _) = nearest(row(i), &centers, dim);
            counts[k] += 1;
            for (s, x) in sums[k * dim..(k + 1) * dim].iter_mut().zip(row(i)) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for k in 0..m {
            if counts[k] == 0 {
                continue;
            }
            for x in 0..dim {
                let new = sums[k * dim + x] / counts[k] as f64;
                shift = shift.max((new - centers[k * dim + x]).abs());
                centers[k * dim + x] = new;
            }
        }
        if shift <= 1e-6 {
            break;
        }
    }
    Ok(KMeans { centers, counts, iterations, warning })
}

/// One EMA step per partition from the current assignments.
pub fn ema_update(cbs: &mut CodebookSet, z_parts: &Tensor, indices: &[usize]) -> Result<()> {
    let (parts, m, dim) = (cbs.parts, cbs.m, cbs.dim);
    if z_parts.len() != indices.len() * dim || indices.len() % parts != 0 {
        return Err(Error::Shape("ema_update: latents and indices disagree".into()));
    }
    let g = cbs.decay;
    for c in 0..parts {
        let mut counts = vec![0.0; m];
        let mut sums = vec![0.0; m * dim];
        for (slot, &k) in indices.iter().enumerate().filter(|(s, _)| s % parts == c) {
            counts[k] += 1.0;
            let v = &z_parts.data()[slot * dim..(slot + 1) * dim];
            for (s, x) in sums[k * dim..(k + 1) * dim].iter_mut().zip(v) {
                *s += x;
            }
        }
        for k in 0..m {
            cbs.ema_count[c][k] = g * cbs.ema_count[c][k] + (1.0 - g) * counts[k];
        }
        for (s, b) in cbs.ema_sum[c].iter_mut().zip(&sums) {
            *s = g * *s + (1.0 - g) * b;
        }
        // the floor only matters for codewords that were never used
        for k in 0..m {
            let denom = cbs.ema_count[c][k].max(cbs.eps);
            for x in 0..dim {
                let v = cbs.ema_sum[c][k * dim + x] / denom;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("codeword {k} of partition {c}")));
                }
                cbs.codewords[c][k * dim + x] = v;
            }
        }
    }
    Ok(())
}

/// `(1/(nC)) Σ ‖zh − sg(zq)‖²` where `sub_vectors = nC`; `zq` is detached here.
pub fn commitment_loss(tape: &Tape, zh: Var, zq: Var, sub_vectors: usize) -> Result<Var> {
    let diff = tape.sub(zh, tape.detach(zq))?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum_all(sq);
    Ok(tape.scale(s, 1.0 / sub_vectors.max(1) as f64))
}

/// Straight-through quantization recorded on a tape.
pub struct TapeQuantized {
    /// Codeword values forward, gradient to `zh` backward (`N × C·dim`).
    pub st: Var,
    /// Codewords gathered from the codebook leaves (`N × C·dim`).
    pub zq: Var,
    /// One leaf per partition codebook (`m × dim`).
    pub codebooks: Vec<Var>,
    pub quantized: QuantizedSet,
}

/// Quantizes `zh` (`N × C·dim`) and wires the straight-through estimator.
pub fn quantize_on_tape(tape: &Tape, zh: Var, cbs: &CodebookSet) -> Result<TapeQuantized> {
    let quantized = quantize(&tape.value(zh).clone(), cbs)?;
    let codebooks: Vec<Var> =
        (0..cbs.parts).map(|c| tape.leaf(Tensor::matrix(cbs.m, cbs.dim, cbs.codewords[c].clone()).expect("codebook"))).collect();
    let mut cols = Vec::with_capacity(cbs.parts);
    for (c, &cb) in codebooks.iter().enumerate() {
        let idx: Rc<[usize]> = (0..quantized.n).map(|i| quantized.indices[i * cbs.parts + c]).collect::<Vec<_>>().into();
        cols.push(tape.gather_rows(cb, &idx)?);
    }
    let zq = tape.concat_cols(&cols)?;
    let st = tape.straight_through(zh, zq)?;
    Ok(TapeQuantized { st, zq, codebooks, quantized })
}

/// Counts of each joint index tuple.
pub fn tuple_histogram<'a>(tuples: impl IntoIterator<Item = &'a [usize]>) -> BTreeMap<Vec<usize>, usize> {
    let mut h = BTreeMap::new();
    for t in tuples {
        *h.entry(t.to_vec()).or_insert(0) += 1;
    }
    h
}

/// `exp(H) / M` with the natural-log entropy of the empirical distribution.
pub fn perplexity(counts: impl IntoIterator<Item = usize>, dictionary_size: f64) -> Result<f64> {
    let counts: Vec<usize> = counts.into_iter().collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Numerical("perplexity of an empty histogram".into()));
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    Ok(h.exp() / dictionary_size)
}

#[cfg(test)]
mod tests;
