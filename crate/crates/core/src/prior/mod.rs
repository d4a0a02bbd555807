//! Autoregressive prior over sorted codeword-index sequences.
//!
//! A sequence of `n` nodes with `C` partitions is laid out as `n + 1` steps of
//! `C` streams. Stream `c` of step `t` sees the codewords of node `t − 1` and
//! partitions `< c` of node `t`, and predicts `k[t][c]`; stream 0 of step `n`
//! predicts the end-of-sequence class `m`. Attention runs over the stream-0
//! representations of strictly earlier steps.

mod cache;
mod infer;

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore};
use crate::quantizer::{CodebookSet, QuantizedSet};

pub use cache::{read_sequences, write_sequences, SequenceCache};
pub use infer::{generate, GenerationStats, PriorModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub parts: usize,
    pub m: usize,
    pub d_latent: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Linear layers in each feed-forward net (`d → 2d → … → d`).
    pub ff_depth: usize,
    pub n_max: usize,
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.parts == 0 || self.d_latent % self.parts != 0 {
            errs.push(format!("d_latent {} is not divisible into {} partitions", self.d_latent, self.parts));
        }
        if self.m == 0 {
            errs.push("codebook size m must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            errs.push(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.blocks == 0 {
            errs.push("prior needs at least one block".into());
        }
        if self.ff_depth < 2 {
            errs.push("feed-forward depth must be at least 2".into());
        }
        if self.n_max == 0 {
            errs.push("n_max must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn dim(&self) -> usize {
        self.d_latent / self.parts
    }

    /// Classes per head: `m` codewords plus end-of-sequence.
    pub fn classes(&self) -> usize {
        self.m + 1
    }

    pub fn eos(&self) -> usize {
        self.m
    }

    /// Input width of stream `c`.
    pub fn in_width(&self, c: usize) -> usize {
        self.d_latent + c * self.dim()
    }

    fn ff_widths(&self) -> Vec<usize> {
        let mut w = vec![self.d_model];
        w.extend(std::iter::repeat_n(2 * self.d_model, self.ff_depth - 1));
        w.push(self.d_model);
        w
    }
}

pub fn init_prior<R: Rng + ?Sized>(cfg: &PriorConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    let d = cfg.d_model;
    for c in 0..cfg.parts {
        s.add_linear(&format!("prior.in.{c}"), cfg.in_width(c), d, false, rng);
    }
    for l in 0..cfg.blocks {
        for c in 0..cfg.parts {
            s.add_linear(&format!("prior.{l}.q.{c}"), d, d, true, rng);
        }
        s.add_linear(&format!("prior.{l}.k"), d, d, true, rng);
        s.add_linear(&format!("prior.{l}.v"), d, d, true, rng);
        s.add_layer_norm(&format!("prior.{l}.ln1"), d);
        s.add_mlp(&format!("prior.{l}.ff"), &cfg.ff_widths(), rng);
        s.add_layer_norm(&format!("prior.{l}.ln2"), d);
    }
    for c in 0..cfg.parts {
        s.add_linear(&format!("prior.out.{c}"), d, cfg.classes(), true, rng);
    }
    Ok(s)
}

/// Sinusoidal encoding of step `t` over `d` channels.
pub fn positional_encoding(t: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|x| {
            let freq = 10000f64.powf((x - x % 2) as f64 / d as f64);
            let a = t as f64 / freq;
            if x % 2 == 0 { a.sin() } else { a.cos() }
        })
        .collect()
}

/// Rows of `C`-tuples of codeword indices, one per node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexSequence {
    pub parts: usize,
    pub rows: Vec<usize>,
}

impl IndexSequence {
    pub fn new(parts: usize, rows: Vec<usize>) -> Result<Self> {
        if parts == 0 || rows.len() % parts != 0 {
            return Err(Error::Shape(format!("{} indices do not form {parts}-tuples", rows.len())));
        }
        Ok(IndexSequence { parts, rows })
    }

    pub fn n(&self) -> usize {
        self.rows.len() / self.parts
    }

    pub fn tuple(&self, i: usize) -> &[usize] {
        &self.rows[i * self.parts..(i + 1) * self.parts]
    }

    pub fn is_sorted(&self) -> bool {
        (1..self.n()).all(|i| self.tuple(i - 1) <= self.tuple(i))
    }

    pub fn tuples(&self) -> impl Iterator<Item = &[usize]> {
        self.rows.chunks(self.parts)
    }
}

/// Sorts tuples lexicographically; returns the sequence and the source row of
/// each sorted position. Stable, so equal tuples keep their relative order.
pub fn sort_set(indices: &[usize], parts: usize) -> Result<(IndexSequence, Vec<usize>)> {
    let seq = IndexSequence::new(parts, indices.to_vec())?;
    if seq.n() == 0 {
        return Err(Error::Shape("cannot sort an empty set".into()));
    }
    let mut order: Vec<usize> = (0..seq.n()).collect();
    order.sort_by(|&a, &b| seq.tuple(a).cmp(seq.tuple(b)));
    let rows = order.iter().flat_map(|&i| seq.tuple(i).iter().copied()).collect();
    Ok((IndexSequence { parts, rows }, order))
}

/// Sorted sequence plus the identically reordered codewords.
pub fn sort_quantized(q: &QuantizedSet) -> Result<(IndexSequence, QuantizedSet)> {
    let (seq, order) = sort_set(&q.indices, q.parts)?;
    let w = q.codewords.len() / q.n;
    let data = order.iter().flat_map(|&i| q.codewords.data()[i * w..(i + 1) * w].iter().copied()).collect();
    let codewords = Tensor::new(q.codewords.shape().to_vec(), data)?;
    Ok((seq.clone(), QuantizedSet { n: q.n, parts: q.parts, codewords, indices: seq.rows }))
}

/// Padded inputs, masks and targets for a batch of sequences.
pub struct PriorBatch {
    pub seqs: usize,
    pub steps: usize,
    pub lengths: Vec<usize>,
    /// Per stream, `(seqs·steps) × in_width(c)`.
    pub inputs: Vec<Tensor>,
    /// `(seqs·steps) × d_model`, added after projection.
    pub pos: Tensor,
    /// Over the stacked logits (stream-major), true where a class is forbidden.
    pub mask: Rc<[bool]>,
    /// Stacked-logit rows that carry a target.
    pub rows: Rc<[usize]>,
    pub targets: Rc<[usize]>,
    pub weights: Rc<[f64]>,
}

impl PriorBatch {
    /// Builds the batch from index sequences and the codebooks that give them
    /// their vectors. Every sequence needs at least one node and at most `n_max`.
    pub fn new(cfg: &PriorConfig, cbs: &CodebookSet, seqs: &[IndexSequence]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Shape("empty prior batch".into()));
        }
        if cbs.parts != cfg.parts || cbs.m != cfg.m || cbs.dim != cfg.dim() {
            return Err(Error::Shape("codebooks do not match the prior configuration".into()));
        }
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.parts != cfg.parts {
                return Err(Error::Shape(format!("sequence has {} partitions, prior {}", s.parts, cfg.parts)));
            }
            if s.n() == 0 || s.n() > cfg.n_max {
                return Err(Error::Shape(format!("sequence of {} nodes outside 1..={}", s.n(), cfg.n_max)));
            }
            if s.rows.iter().any(|&k| k >= cfg.m) {
                return Err(Error::Shape("codeword index out of range".into()));
            }
            lengths.push(s.n());
        }
        let steps = lengths.iter().max().unwrap() + 1;
        let (b, c_n, dim, dl) = (seqs.len(), cfg.parts, cfg.dim(), cfg.d_latent);
        let rows_total = b * steps;
        let node_vec = |s: &IndexSequence, i: usize, upto: usize, out: &mut Vec<f64>| {
            for c in 0..upto {
                out.extend_from_slice(cbs.codeword(c, s.tuple(i)[c]));
            }
        };
        let mut inputs = Vec::with_capacity(c_n);
        for c in 0..c_n {
            let w = cfg.in_width(c);
            let mut data = Vec::with_capacity(rows_total * w);
            for s in seqs {
                for t in 0..steps {
                    let start = data.len();
                    if t >= 1 && t - 1 < s.n() {
                        node_vec(s, t - 1, c_n, &mut data);
                    } else {
                        data.resize(start + dl, 0.0);
                    }
                    if t < s.n() {
                        node_vec(s, t, c, &mut data);
                    } else {
                        data.resize(start + dl + c * dim, 0.0);
                    }
                }
            }
            inputs.push(Tensor::matrix(rows_total, w, data)?);
        }
        let mut pos = Vec::with_capacity(rows_total * cfg.d_model);
        for _ in 0..b {
            for t in 0..steps {
                pos.extend(positional_encoding(t, cfg.d_model));
            }
        }
        let pos = Tensor::matrix(rows_total, cfg.d_model, pos)?;

        let k = cfg.classes();
        let mut mask = vec![false; c_n * rows_total * k];
        let (mut rows, mut targets, mut weights) = (Vec::new(), Vec::new(), Vec::new());
        for c in 0..c_n {
            for (bi, s) in seqs.iter().enumerate() {
                let w = 1.0 / (b as f64 * (s.n() * c_n + 1) as f64);
                for t in 0..steps {
                    let r = c * rows_total + bi * steps + t;
                    let allowed = step_mask(cfg, c, t, (t >= 1 && t - 1 < s.n()).then(|| s.tuple(t - 1)[0]));
                    for (y, &ok) in allowed.iter().enumerate() {
                        mask[r * k + y] = !ok;
                    }
                    if t < s.n() {
                        rows.push(r);
                        targets.push(s.tuple(t)[c]);
                        weights.push(w);
                    } else if t == s.n() && c == 0 {
                        rows.push(r);
                        targets.push(cfg.eos());
                        weights.push(w);
                    }
                }
            }
        }
        Ok(PriorBatch {
            seqs: b,
            steps,
            lengths,
            inputs,
            pos,
            mask: mask.into(),
            rows: rows.into(),
            targets: targets.into(),
            weights: weights.into(),
        })
    }

    /// Row of the stacked logits for stream `c`, sequence `b`, step `t`.
    pub fn logit_row(&self, c: usize, b: usize, t: usize) -> usize {
        c * self.seqs * self.steps + b * self.steps + t
    }
}

/// Allowed classes for stream `c` at step `t`, given partition 0 of the
/// previous node. End-of-sequence only on stream 0 after the first node; the
/// order constraint only on stream 0.
pub fn step_mask(cfg: &PriorConfig, c: usize, t: usize, prev_first: Option<usize>) -> Vec<bool> {
    let mut ok = vec![true; cfg.classes()];
    ok[cfg.eos()] = c == 0 && t >= 1;
    if c == 0 {
        if let Some(p) = prev_first {
            ok[..p].iter_mut().for_each(|x| *x = false);
        }
    }
    ok
}

fn stream_index(rows: usize, parts: usize, c: usize) -> Rc<[usize]> {
    (0..rows).map(|r| r * parts + c).collect::<Vec<_>>().into()
}

/// Stream-major row `c·rows + r` to step-major row `r·parts + c`.
fn interleave_index(rows: usize, parts: usize) -> Rc<[usize]> {
    (0..rows * parts).map(|i| (i % parts) * rows + i / parts).collect::<Vec<_>>().into()
}

/// Per-stream maps `name.{c}` applied to the matching rows of `z` (step-major),
/// returned step-major.
fn per_stream(ctx: &Ctx, name: &str, z: Var, rows: usize, parts: usize) -> Result<Var> {
    let t = ctx.tape;
    let mut outs = Vec::with_capacity(parts);
    for c in 0..parts {
        let zc = t.gather_rows(z, &stream_index(rows, parts, c))?;
        outs.push(ctx.linear(&format!("{name}.{c}"), zc)?);
    }
    t.gather_rows(t.concat_rows(&outs)?, &interleave_index(rows, parts))
}

/// Projected inputs plus positions: `(seqs·steps·C) × d_model`, step-major.
pub fn build_inputs(ctx: &Ctx, cfg: &PriorConfig, batch: &PriorBatch) -> Result<Var> {
    let t = ctx.tape;
    let rows = batch.seqs * batch.steps;
    let mut outs = Vec::with_capacity(cfg.parts);
    for (c, x) in batch.inputs.iter().enumerate() {
        if x.cols() != cfg.in_width(c) {
            return Err(Error::Shape(format!("stream {c} input width {} != {}", x.cols(), cfg.in_width(c))));
        }
        let y = ctx.linear(&format!("prior.in.{c}"), t.constant(x.clone()))?;
        outs.push(t.add(y, t.constant(batch.pos.clone()))?);
    }
    t.gather_rows(t.concat_rows(&outs)?, &interleave_index(rows, cfg.parts))
}

/// Unmasked logits stacked stream-major: `(C·seqs·steps) × (m+1)`.
pub fn prior_forward(ctx: &Ctx, cfg: &PriorConfig, batch: &PriorBatch) -> Result<Var> {
    let t = ctx.tape;
    let rows = batch.seqs * batch.steps;
    let mut z = build_inputs(ctx, cfg, batch)?;
    for l in 0..cfg.blocks {
        let z0 = t.gather_rows(z, &stream_index(rows, cfg.parts, 0))?;
        let k = ctx.linear(&format!("prior.{l}.k"), z0)?;
        let v = ctx.linear(&format!("prior.{l}.v"), z0)?;
        let q = per_stream(ctx, &format!("prior.{l}.q"), z, rows, cfg.parts)?;
        let a = t.attention_2d_batched(q, k, v, batch.seqs, cfg.parts, cfg.heads)?;
        let at = ctx.layer_norm(&format!("prior.{l}.ln1"), t.add(z, a)?)?;
        let f = ctx.mlp(&format!("prior.{l}.ff"), cfg.ff_depth, at)?;
        z = ctx.layer_norm(&format!("prior.{l}.ln2"), t.add(at, f)?)?;
    }
    let mut outs = Vec::with_capacity(cfg.parts);
    for c in 0..cfg.parts {
        let zc = t.gather_rows(z, &stream_index(rows, cfg.parts, c))?;
        outs.push(ctx.linear(&format!("prior.out.{c}"), zc)?);
    }
    t.concat_rows(&outs)
}

/// Masked cross-entropy of stacked logits against the batch targets: the mean
/// over each sequence's `nC + 1` positions, averaged over sequences.
pub fn prior_loss_from_logits(tape: &Tape, logits: Var, batch: &PriorBatch) -> Result<Var> {
    let masked = tape.masked_fill(logits, &batch.mask, f64::NEG_INFINITY)?;
    let picked = tape.gather_rows(masked, &batch.rows)?;
    tape.cross_entropy(picked, &batch.targets, &batch.weights)
}

pub fn prior_loss(ctx: &Ctx, cfg: &PriorConfig, batch: &PriorBatch) -> Result<Var> {
    let logits = prior_forward(ctx, cfg, batch)?;
    prior_loss_from_logits(ctx.tape, logits, batch)
}

/// Negative log-likelihood of one sequence under frozen parameters.
pub fn prior_nll(store: &ParamStore, cfg: &PriorConfig, cbs: &CodebookSet, seq: &IndexSequence) -> Result<f64> {
    let batch = PriorBatch::new(cfg, cbs, std::slice::from_ref(seq))?;
    let tape = Tape::new();
    let ctx = Ctx::frozen(&tape, store, false);
    let l = prior_loss(&ctx, cfg, &batch)?;
    Ok(tape.item(l))
}
