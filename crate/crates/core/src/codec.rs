//! Permutation-equivariant message-passing encoder and decoder.
//!
//! Batches are disjoint unions of graphs. Each layer computes, for every ordered
//! pair `(i, j)` of the pair list,
//! `e'_ij = bn(f_edge([x_i, x_j, e_ij]))` and
//! `x'_i = bn(x_i + Σ_j f_node([x_i, x_j, e_ij]))`.
//! The first linear map of `f_edge`/`f_node` is split into per-node products that
//! are gathered per pair, which is algebraically the same as concatenating.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::featurize::AugmentedGraph;
use crate::graph::Graph;
use crate::nn::{Ctx, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub layers: usize,
    /// Width of node and edge states.
    pub hidden: usize,
    pub mlp_hidden: usize,
    pub mlp_depth: usize,
    pub d_latent: usize,
    /// Encoder input widths (augmented features).
    pub node_in: usize,
    pub edge_in: usize,
    pub node_cats: usize,
    pub edge_cats: usize,
}

impl CodecConfig {
    /// Simple graphs decode edges with a single presence logit.
    pub fn simple(&self) -> bool {
        self.node_cats == 1 && self.edge_cats == 2
    }

    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("mlp_hidden", self.mlp_hidden),
            ("d_latent", self.d_latent),
            ("node_in", self.node_in),
            ("edge_in", self.edge_in),
            ("node_cats", self.node_cats),
        ] {
            if v == 0 {
                out.push(format!("{name} must be positive"));
            }
        }
        if self.mlp_depth < 2 {
            out.push("mlp_depth must be at least 2".into());
        }
        if self.edge_cats < 2 {
            out.push("edge_cats must be at least 2 (category 0 is \"no edge\")".into());
        }
        out
    }
}

fn add_mp_layer<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &CodecConfig, prefix: &str, with_edge_input: bool, rng: &mut R) {
    let (h, m) = (cfg.hidden, cfg.mlp_hidden);
    for f in ["edge", "node"] {
        let name = format!("{prefix}.{f}");
        store.add_linear(&format!("{name}.0i"), h, m, true, rng);
        store.add_linear(&format!("{name}.0j"), h, m, false, rng);
        if with_edge_input {
            store.add_linear(&format!("{name}.0e"), h, m, false, rng);
        }
        let mut widths = vec![m; cfg.mlp_depth - 1];
        widths.push(h);
        for (k, w) in widths.windows(2).enumerate() {
            store.add_linear(&format!("{name}.{}", k + 1), w[0], w[1], true, rng);
        }
        store.add_batch_norm(&format!("{prefix}.{f}_bn"), h);
    }
}

/// Encoder and decoder parameters (`enc.*`, `dec.*`).
pub fn init_codec<R: Rng + ?Sized>(cfg: &CodecConfig, rng: &mut R) -> Result<ParamStore> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut s = ParamStore::new();
    s.add_batch_norm("enc.in_node_bn", cfg.node_in);
    s.add_linear("enc.in_node", cfg.node_in, cfg.hidden, true, rng);
    s.add_batch_norm("enc.in_edge_bn", cfg.edge_in);
    s.add_linear("enc.in_edge", cfg.edge_in, cfg.hidden, true, rng);
    for l in 0..cfg.layers {
        add_mp_layer(&mut s, cfg, &format!("enc.{l}"), true, rng);
    }
    s.add_linear("enc.out", cfg.hidden, cfg.d_latent, true, rng);

    s.add_linear("dec.in", cfg.d_latent, cfg.hidden, true, rng);
    for l in 0..cfg.layers {
        // the decoder's initial edge state is zero, so layer 0 has no edge input
        add_mp_layer(&mut s, cfg, &format!("dec.{l}"), l > 0, rng);
    }
    s.add_linear("dec.node_head", cfg.hidden, cfg.node_cats, true, rng);
    let edge_out = if cfg.simple() { 1 } else { cfg.edge_cats };
    s.add_linear("dec.edge_head", cfg.hidden, edge_out, true, rng);
    Ok(s)
}

/// Pair structure of a disjoint union of graphs.
#[derive(Clone, Debug)]
pub struct PairIndex {
    pub sizes: Vec<usize>,
    pub offsets: Vec<usize>,
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
}

impl PairIndex {
    pub fn num_nodes(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn num_pairs(&self) -> usize {
        self.src.len()
    }
}

/// Encoder inputs for a batch of augmented graphs.
#[derive(Clone, Debug)]
pub struct EncoderBatch {
    pub pairs: PairIndex,
    /// `N × node_in`.
    pub node_feats: Tensor,
    /// `P × edge_in`, one row per neighborhood pair.
    pub edge_feats: Tensor,
}

impl EncoderBatch {
    pub fn new(graphs: &[&AugmentedGraph]) -> Result<Self> {
        let first = graphs.first().ok_or_else(|| Error::InvalidGraph("empty batch".into()))?;
        let (fn_, fe) = (first.node_width, first.edge_width);
        let mut sizes = Vec::new();
        let mut offsets = Vec::new();
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        let mut off = 0;
        for g in graphs {
            if g.node_width != fn_ || g.edge_width != fe {
                return Err(Error::Shape("batch mixes feature widths".into()));
            }
            let n = g.n();
            sizes.push(n);
            offsets.push(off);
            nodes.extend_from_slice(&g.node_feats);
            for (i, j) in g.neighbor_pairs() {
                src.push(off + i);
                dst.push(off + j);
                let at = (i * n + j) * fe;
                edges.extend_from_slice(&g.edge_feats[at..at + fe]);
            }
            off += n;
        }
        let p = src.len();
        Ok(EncoderBatch {
            pairs: PairIndex { sizes, offsets, src: src.into(), dst: dst.into() },
            node_feats: Tensor::matrix(off, fn_, nodes)?,
            edge_feats: Tensor::matrix(p, fe, edges)?,
        })
    }
}

/// Complete-graph pair structure for decoding sets of the given sizes.
#[derive(Clone, Debug)]
pub struct DecoderBatch {
    pub pairs: PairIndex,
    /// Index of pair `(j, i)` for pair `(i, j)`.
    pub rev: Rc<[usize]>,
}

impl DecoderBatch {
    pub fn new(sizes: &[usize]) -> Result<Self> {
        if sizes.contains(&0) {
            return Err(Error::InvalidGraph("cannot decode a set with zero elements".into()));
        }
        let mut offsets = Vec::new();
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut rev = Vec::new();
        let mut off = 0;
        for &n in sizes {
            offsets.push(off);
            let base = src.len();
            // pair (i, j), j ≠ i, sits at base + i·(n−1) + (j − [j > i])
            let slot = |i: usize, j: usize| base + i * (n - 1) + if j > i { j - 1 } else { j };
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    src.push(off + i);
                    dst.push(off + j);
                    rev.push(slot(j, i));
                }
            }
            off += n;
        }
        Ok(DecoderBatch {
            pairs: PairIndex { sizes: sizes.to_vec(), offsets, src: src.into(), dst: dst.into() },
            rev: rev.into(),
        })
    }
}

/// One message-passing layer; `e = None` stands for an all-zero edge state.
fn mp_layer(ctx: &Ctx, prefix: &str, x: Var, e: Option<Var>, pairs: &PairIndex) -> Result<(Var, Option<Var>)> {
    let t = ctx.tape;
    let n = pairs.num_nodes();
    if pairs.num_pairs() == 0 {
        let x2 = ctx.batch_norm(&format!("{prefix}.node_bn"), x)?;
        return Ok((x2, e));
    }
    let first = |f: &str| -> Result<Var> {
        let name = format!("{prefix}.{f}");
        let xi = t.matmul(x, ctx.p(&format!("{name}.0i.w"))?)?;
        let xj = t.matmul(x, ctx.p(&format!("{name}.0j.w"))?)?;
        let mut h = t.add(t.gather_rows(xi, &pairs.src)?, t.gather_rows(xj, &pairs.dst)?)?;
        if let Some(e) = e {
            h = t.add(h, t.matmul(e, ctx.p(&format!("{name}.0e.w"))?)?)?;
        }
        t.add_row(h, ctx.p(&format!("{name}.0i.b"))?)
    };
    let rest = |f: &str, h: Var| -> Result<Var> {
        let name = format!("{prefix}.{f}");
        let mut h = t.relu(h);
        let mut k = 1;
        while ctx.has(&format!("{name}.{k}.w")) {
            if k > 1 {
                h = t.relu(h);
            }
            h = ctx.linear(&format!("{name}.{k}"), h)?;
            k += 1;
        }
        Ok(h)
    };
    let e_new = rest("edge", first("edge")?)?;
    let e_new = ctx.batch_norm(&format!("{prefix}.edge_bn"), e_new)?;
    let msgs = rest("node", first("node")?)?;
    let agg = t.index_add(msgs, &pairs.src, n)?;
    let x_new = ctx.batch_norm(&format!("{prefix}.node_bn"), t.add(x, agg)?)?;
    Ok((x_new, Some(e_new)))
}

/// Node embeddings `N × d_latent`.
pub fn encode(ctx: &Ctx, cfg: &CodecConfig, batch: &EncoderBatch) -> Result<Var> {
    let t = ctx.tape;
    if batch.node_feats.cols() != cfg.node_in || (batch.pairs.num_pairs() > 0 && batch.edge_feats.cols() != cfg.edge_in) {
        return Err(Error::Shape(format!(
            "encoder expects widths ({}, {}), got ({}, {})",
            cfg.node_in,
            cfg.edge_in,
            batch.node_feats.cols(),
            batch.edge_feats.cols()
        )));
    }
    let xn = ctx.batch_norm("enc.in_node_bn", t.constant(batch.node_feats.clone()))?;
    let mut x = ctx.linear("enc.in_node", xn)?;
    let mut e = if batch.pairs.num_pairs() > 0 {
        let en = ctx.batch_norm("enc.in_edge_bn", t.constant(batch.edge_feats.clone()))?;
        Some(ctx.linear("enc.in_edge", en)?)
    } else {
        None
    };
    for l in 0..cfg.layers {
        (x, e) = mp_layer(ctx, &format!("enc.{l}"), x, e, &batch.pairs)?;
    }
    ctx.linear("enc.out", x)
}

/// Node logits `N × R` and symmetrized edge logits `P × S` (pairs of the
/// decoder batch, in its order).
pub fn decode(ctx: &Ctx, cfg: &CodecConfig, zq: Var, batch: &DecoderBatch) -> Result<(Var, Var)> {
    let t = ctx.tape;
    let n = batch.pairs.num_nodes();
    if t.shape(zq) != [n, cfg.d_latent] {
        return Err(Error::Shape(format!("decoder expects {n} × {}, got {:?}", cfg.d_latent, t.shape(zq))));
    }
    let mut x = ctx.linear("dec.in", zq)?;
    let mut e = None;
    for l in 0..cfg.layers {
        (x, e) = mp_layer(ctx, &format!("dec.{l}"), x, e, &batch.pairs)?;
    }
    let node_logits = ctx.linear("dec.node_head", x)?;
    let p = batch.pairs.num_pairs();
    let edge_logits = match e {
        Some(e) if p > 0 => {
            let raw = ctx.linear("dec.edge_head", e)?;
            let sym = t.scale(t.add(raw, t.gather_rows(raw, &batch.rev)?)?, 0.5);
            if cfg.simple() {
                t.concat_cols(&[t.constant(Tensor::zeros(&[p, 1])), sym])?
            } else {
                sym
            }
        }
        _ => t.constant(Tensor::zeros(&[p, cfg.edge_cats])),
    };
    Ok((node_logits, edge_logits))
}

/// Cross-entropy targets with per-entry weights `1/(B·(n + n²))`.
#[derive(Clone, Debug)]
pub struct ReconTargets {
    pub node_targets: Rc<[usize]>,
    pub node_weights: Rc<[f64]>,
    pub edge_targets: Rc<[usize]>,
    pub edge_weights: Rc<[f64]>,
}

impl ReconTargets {
    pub fn new(graphs: &[&Graph], batch: &DecoderBatch) -> Result<Self> {
        if graphs.len() != batch.pairs.sizes.len() {
            return Err(Error::Shape("targets and decoder batch differ in length".into()));
        }
        let b = graphs.len() as f64;
        let mut nt = Vec::new();
        let mut nw = Vec::new();
        for g in graphs {
            let w = 1.0 / (b * (g.n() + g.n() * g.n()) as f64);
            for i in 0..g.n() {
                nt.push(g.node_cat(i));
                nw.push(w);
            }
        }
        let mut et = Vec::with_capacity(batch.pairs.num_pairs());
        let mut ew = Vec::with_capacity(batch.pairs.num_pairs());
        for (gi, g) in graphs.iter().enumerate() {
            if g.n() != batch.pairs.sizes[gi] {
                return Err(Error::Shape(format!("graph {gi} has {} nodes, batch expects {}", g.n(), batch.pairs.sizes[gi])));
            }
        }
        for (&s, &d) in batch.pairs.src.iter().zip(batch.pairs.dst.iter()) {
            let gi = batch.pairs.offsets.partition_point(|&o| o <= s) - 1;
            let off = batch.pairs.offsets[gi];
            let g = graphs[gi];
            et.push(g.edge_cat(s - off, d - off));
            ew.push(1.0 / (b * (g.n() + g.n() * g.n()) as f64));
        }
        Ok(ReconTargets { node_targets: nt.into(), node_weights: nw.into(), edge_targets: et.into(), edge_weights: ew.into() })
    }
}

/// `(1/(n+n²))·[Σ node CE + Σ_{i≠j} edge CE]`, averaged over the batch.
pub fn recon_loss(tape: &Tape, node_logits: Var, edge_logits: Var, targets: &ReconTargets) -> Result<Var> {
    let nodes = tape.cross_entropy(node_logits, &targets.node_targets, &targets.node_weights)?;
    if targets.edge_targets.is_empty() {
        return Ok(nodes);
    }
    let edges = tape.cross_entropy(edge_logits, &targets.edge_targets, &targets.edge_weights)?;
    tape.add(nodes, edges)
}

/// Per-graph decoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphDistribution {
    pub n: usize,
    pub node_cats: usize,
    pub edge_cats: usize,
    /// `n × R`.
    pub node_logits: Vec<f64>,
    /// `n × n × S`; the diagonal is unused and zero.
    pub edge_logits: Vec<f64>,
}

impl GraphDistribution {
    pub fn edge(&self, i: usize, j: usize) -> &[f64] {
        let s = self.edge_cats;
        let at = (i * self.n + j) * s;
        &self.edge_logits[at..at + s]
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.node_logits[i * self.node_cats..(i + 1) * self.node_cats]
    }
}

/// Splits batched decoder outputs into per-graph distributions.
pub fn split_distributions(batch: &DecoderBatch, node_logits: &Tensor, edge_logits: &Tensor) -> Vec<GraphDistribution> {
    let r = node_logits.cols();
    let s = edge_logits.cols();
    let mut out: Vec<GraphDistribution> = batch
        .pairs
        .sizes
        .iter()
        .zip(&batch.pairs.offsets)
        .map(|(&n, &off)| GraphDistribution {
            n,
            node_cats: r,
            edge_cats: s,
            node_logits: node_logits.data()[off * r..(off + n) * r].to_vec(),
            edge_logits: vec![0.0; n * n * s],
        })
        .collect();
    for (p, (&a, &b)) in batch.pairs.src.iter().zip(batch.pairs.dst.iter()).enumerate() {
        let gi = batch.pairs.offsets.partition_point(|&o| o <= a) - 1;
        let off = batch.pairs.offsets[gi];
        let d = &mut out[gi];
        let at = ((a - off) * d.n + (b - off)) * s;
        d.edge_logits[at..at + s].copy_from_slice(edge_logits.row(p));
    }
    out
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = k;
        }
    }
    best
}

/// Mode of the distribution: argmax per node and per unordered pair.
pub fn sample_graph(dist: &GraphDistribution) -> Result<Graph> {
    let n = dist.n;
    let nodes: Vec<usize> = (0..n).map(|i| argmax(dist.node(i))).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let c = argmax(dist.edge(i, j));
            if c != 0 {
                edges.push((i, j, c));
            }
        }
    }
    Graph::new(n, dist.node_cats, dist.edge_cats, false, &edges, &nodes)
}

/// Counts of wrong node labels and wrong unordered pairs in a reconstruction.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ReconErrors {
    pub node_wrong: usize,
    pub node_total: usize,
    pub edge_wrong: usize,
    pub edge_total: usize,
}

impl ReconErrors {
    pub fn measure(dist: &GraphDistribution, target: &Graph) -> Self {
        let n = target.n();
        let mut e = ReconErrors { node_total: n, edge_total: n * n.saturating_sub(1) / 2, ..Default::default() };
        for i in 0..n {
            if argmax(dist.node(i)) != target.node_cat(i) {
                e.node_wrong += 1;
            }
            for j in i + 1..n {
                if argmax(dist.edge(i, j)) != target.edge_cat(i, j) {
                    e.edge_wrong += 1;
                }
            }
        }
        e
    }

    pub fn merge(&mut self, o: ReconErrors) {
        self.node_wrong += o.node_wrong;
        self.node_total += o.node_total;
        self.edge_wrong += o.edge_wrong;
        self.edge_total += o.edge_total;
    }

    pub fn node_rate(&self) -> f64 {
        if self.node_total == 0 {
            0.0
        } else {
            self.node_wrong as f64 / self.node_total as f64
        }
    }

    pub fn edge_rate(&self) -> f64 {
        if self.edge_total == 0 {
            0.0
        } else {
            self.edge_wrong as f64 / self.edge_total as f64
        }
    }
}

/// Eval-mode encoding of a batch to a plain tensor.
pub fn encode_eval(store: &ParamStore, cfg: &CodecConfig, graphs: &[&AugmentedGraph]) -> Result<Tensor> {
    let batch = EncoderBatch::new(graphs)?;
    let tape = Tape::new();
    let ctx = Ctx::frozen(&tape, store, false);
    let z = encode(&ctx, cfg, &batch)?;
    let out = tape.value(z).clone();
    Ok(out)
}

/// Eval-mode decoding of stacked latent rows (`Σ sizes × d_latent`).
pub fn decode_eval(store: &ParamStore, cfg: &CodecConfig, zq: &Tensor, sizes: &[usize]) -> Result<Vec<GraphDistribution>> {
    let batch = DecoderBatch::new(sizes)?;
    let tape = Tape::new();
    let ctx = Ctx::frozen(&tape, store, false);
    let z = tape.constant(zq.clone());
    let (nl, el) = decode(&ctx, cfg, z, &batch)?;
    let (nl, el) = (tape.value(nl).clone(), tape.value(el).clone());
    Ok(split_distributions(&batch, &nl, &el))
}
