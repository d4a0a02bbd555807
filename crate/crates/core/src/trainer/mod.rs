//! Two-stage training: the quantized auto-encoder, then the prior over its
//! sorted index sequences. Also checkpointing, metrics and sampling.

mod adam;
mod checkpoint;
mod config;
mod metrics;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::codec::{
    decode, decode_eval, encode, encode_eval, init_codec, recon_loss, sample_graph, CodecConfig, DecoderBatch, EncoderBatch,
    GraphDistribution, ReconErrors, ReconTargets,
};
use crate::error::{Error, Result};
use crate::featurize::{augment, AugmentedGraph, FeatureConfig};
use crate::graph::Graph;
use crate::nn::{BnStat, Ctx, ParamStore};
use crate::prior::{generate, init_prior, prior_loss, sort_set, GenerationStats, IndexSequence, PriorBatch, PriorModel, SequenceCache};
use crate::quantizer::{commitment_loss, ema_update, kmeanspp_init, perplexity, quantize, quantize_on_tape, tuple_histogram, CodebookSet};

pub use adam::{clip_global_norm, Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CheckpointHeader, RngState, CHECKPOINT_VERSION, MAGIC};
pub use config::ModelConfig;
pub use metrics::{write_metrics_csv, MetricsRow, METRICS_HEADER};

// Independent ChaCha8 streams derived from the config seed.
pub const STREAM_SPLIT: u64 = 1;
pub const STREAM_CODEC_INIT: u64 = 2;
pub const STREAM_FEATURES: u64 = 3;
pub const STREAM_HELDOUT_FEATURES: u64 = 4;
pub const STREAM_SHUFFLE: u64 = 5;
pub const STREAM_KMEANS: u64 = 6;
pub const STREAM_PRIOR_INIT: u64 = 7;
pub const STREAM_PRIOR_SHUFFLE: u64 = 8;
pub const STREAM_GENERATE: u64 = 9;
pub const STREAM_NOISE: u64 = 10;

/// Graphs per eval-mode forward pass.
const EVAL_CHUNK: usize = 64;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

impl ModelConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            decay: self.lr_decay,
            decay_interval: self.decay_interval,
        }
    }
}

/// Seeded `(train, held-out)` split; both keep dataset order.
pub fn split_dataset(graphs: &[Graph], heldout_fraction: f64, seed: u64) -> Result<(Vec<Graph>, Vec<Graph>)> {
    if graphs.is_empty() {
        return Err(Error::InvalidGraph("empty dataset".into()));
    }
    let mut idx: Vec<usize> = (0..graphs.len()).collect();
    idx.shuffle(&mut stream_rng(seed, STREAM_SPLIT));
    let h = ((graphs.len() as f64 * heldout_fraction).round() as usize).min(graphs.len() - 1);
    let (mut held, mut train) = (idx[..h].to_vec(), idx[h..].to_vec());
    held.sort_unstable();
    train.sort_unstable();
    Ok((train.iter().map(|&i| graphs[i].clone()).collect(), held.iter().map(|&i| graphs[i].clone()).collect()))
}

/// Augments graphs in order from one rng stream, so repeated calls agree.
pub fn augment_all(graphs: &[Graph], features: &FeatureConfig, seed: u64, stream: u64) -> Result<Vec<AugmentedGraph>> {
    let mut rng = stream_rng(seed, stream);
    graphs.iter().map(|g| augment(g, features, &mut rng)).collect()
}

/// `augment_all` on up to `jobs` threads. Random columns are redrawn in
/// graph order from the one stream afterwards, so the result is identical.
pub fn augment_all_jobs(graphs: &[Graph], features: &FeatureConfig, seed: u64, stream: u64, jobs: usize) -> Result<Vec<AugmentedGraph>> {
    let mut out = crate::eval::par_map(graphs.len(), jobs, |i| augment(&graphs[i], features, &mut stream_rng(0, 0)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut rng = stream_rng(seed, stream);
    for g in &mut out {
        g.redraw_random(features, &mut rng);
    }
    Ok(out)
}

fn data_dims<'a>(graphs: impl IntoIterator<Item = &'a Graph>) -> Result<(usize, usize)> {
    let mut dims = None;
    for (i, g) in graphs.into_iter().enumerate() {
        let d = (g.node_cats(), g.edge_cats());
        match dims {
            None => dims = Some(d),
            Some(p) if p != d => return Err(Error::InvalidGraph(format!("graph {i} has categories {d:?}, expected {p:?}"))),
            _ => {}
        }
    }
    dims.ok_or_else(|| Error::InvalidGraph("empty dataset".into()))
}

/// Everything needed to encode, decode and sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub cfg: ModelConfig,
    pub node_cats: usize,
    pub edge_cats: usize,
    pub codec: ParamStore,
    pub codebooks: CodebookSet,
    pub prior: Option<ParamStore>,
    /// Optimizer updates applied across both stages.
    pub step: u64,
}

impl TrainedModel {
    pub fn codec_config(&self) -> CodecConfig {
        self.cfg.codec_config(self.node_cats, self.edge_cats)
    }

    pub fn to_checkpoint(&self, rng: &ChaCha8Rng) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        for (k, t) in self.codec.params() {
            tensors.insert(format!("codec.param/{k}"), t.clone());
        }
        for (k, t) in self.codec.buffers() {
            tensors.insert(format!("codec.buffer/{k}"), t.clone());
        }
        let cb = &self.codebooks;
        for c in 0..cb.parts {
            let mat = |v: &Vec<f64>, w: usize| Tensor::matrix(cb.m, w, v.clone()).expect("codebook shape");
            tensors.insert(format!("codebook.{c}/codewords"), mat(&cb.codewords[c], cb.dim));
            tensors.insert(format!("codebook.{c}/ema_count"), Tensor::vector(cb.ema_count[c].clone()));
            tensors.insert(format!("codebook.{c}/ema_sum"), mat(&cb.ema_sum[c], cb.dim));
        }
        if let Some(p) = &self.prior {
            for (k, t) in p.params() {
                tensors.insert(format!("prior.param/{k}"), t.clone());
            }
        }
        Checkpoint {
            header: CheckpointHeader {
                config: self.cfg.clone(),
                node_cats: self.node_cats,
                edge_cats: self.edge_cats,
                stage: if self.prior.is_some() { "prior" } else { "autoencoder" }.into(),
                step: self.step,
                rng: RngState::capture(rng),
            },
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let h = &ck.header;
        h.config.check()?;
        let mut codec = ParamStore::new();
        let mut prior = ParamStore::new();
        for (k, t) in &ck.tensors {
            if let Some(n) = k.strip_prefix("codec.param/") {
                codec.insert_param(n, t.clone());
            } else if let Some(n) = k.strip_prefix("codec.buffer/") {
                codec.insert_buffer(n, t.clone());
            } else if let Some(n) = k.strip_prefix("prior.param/") {
                prior.insert_param(n, t.clone());
            }
        }
        let cfg = &h.config;
        let mut cb = CodebookSet::new(cfg.parts, cfg.m, cfg.d_latent / cfg.parts)?;
        cb.decay = cfg.ema_decay;
        cb.eps = cfg.ema_eps;
        for c in 0..cfg.parts {
            let get = |what: &str, len: usize| -> Result<Vec<f64>> {
                let t = ck.tensor(&format!("codebook.{c}/{what}"))?;
                if t.len() != len {
                    return Err(Error::Format(format!("codebook {c} {what} has {} entries, expected {len}", t.len())));
                }
                Ok(t.data().to_vec())
            };
            cb.codewords[c] = get("codewords", cfg.m * cb.dim)?;
            cb.ema_count[c] = get("ema_count", cfg.m)?;
            cb.ema_sum[c] = get("ema_sum", cfg.m * cb.dim)?;
        }
        cb.initialized = true;
        let model = TrainedModel {
            cfg: cfg.clone(),
            node_cats: h.node_cats,
            edge_cats: h.edge_cats,
            codec,
            codebooks: cb,
            prior: (h.stage == "prior").then_some(prior),
            step: h.step,
        };
        // a missing tensor surfaces here rather than mid-generation
        let fresh = init_codec(&model.codec_config(), &mut stream_rng(0, 0))?;
        for (k, t) in fresh.params() {
            if model.codec.param(k)?.shape() != t.shape() {
                return Err(Error::Format(format!("parameter {k} has the wrong shape")));
            }
        }
        if let Some(p) = &model.prior {
            PriorModel::new(&cfg.prior_config(), p)?;
        }
        Ok(model)
    }
}

struct AeStep {
    recon: f64,
    commit: Option<f64>,
    grads: BTreeMap<String, Vec<f64>>,
    bn: Vec<BnStat>,
    zh: Tensor,
    indices: Option<Vec<usize>>,
}

/// One training-mode forward and backward pass. Without codebooks the
/// decoder reads the encoder output directly.
fn ae_forward_backward(
    store: &ParamStore,
    ccfg: &CodecConfig,
    cbs: Option<&CodebookSet>,
    graphs: &[&AugmentedGraph],
    commit_weight: f64,
) -> Result<AeStep> {
    let enc = EncoderBatch::new(graphs)?;
    let sizes: Vec<usize> = graphs.iter().map(|g| g.n()).collect();
    let dec = DecoderBatch::new(&sizes)?;
    let bases: Vec<&Graph> = graphs.iter().map(|g| &g.base).collect();
    let targets = ReconTargets::new(&bases, &dec)?;
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, true);
    let zh = encode(&ctx, ccfg, &enc)?;
    let (z_dec, commit, indices) = match cbs {
        Some(cbs) => {
            let tq = quantize_on_tape(&tape, zh, cbs)?;
            let cl = commitment_loss(&tape, zh, tq.zq, tq.quantized.n * cbs.parts)?;
            (tq.st, Some(cl), Some(tq.quantized.indices))
        }
        None => (zh, None, None),
    };
    let (nl, el) = decode(&ctx, ccfg, z_dec, &dec)?;
    let recon = recon_loss(&tape, nl, el, &targets)?;
    let loss = match commit {
        Some(c) => tape.add(recon, tape.scale(c, commit_weight))?,
        None => recon,
    };
    if !tape.item(loss).is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = tape.backward(loss)?;
    let zh_value = tape.value(zh).clone();
    let step = AeStep {
        recon: tape.item(recon),
        commit: commit.map(|c| tape.item(c)),
        grads: ctx.param_grads(&grads),
        bn: ctx.take_bn_stats(),
        zh: zh_value,
        indices,
    };
    Ok(step)
}

/// Training-mode encoder outputs over the training set in fixed batches,
/// until at least `limit` rows are collected. Returns rows and batch count.
fn collect_embeddings(store: &ParamStore, ccfg: &CodecConfig, graphs: &[AugmentedGraph], batch: usize, limit: usize) -> Result<(Vec<f64>, usize)> {
    let mut rows = Vec::new();
    let mut batches = 0;
    for chunk in graphs.chunks(batch) {
        if rows.len() / ccfg.d_latent >= limit {
            break;
        }
        let refs: Vec<&AugmentedGraph> = chunk.iter().collect();
        let enc = EncoderBatch::new(&refs)?;
        let tape = Tape::new();
        let ctx = Ctx::frozen(&tape, store, true);
        let z = encode(&ctx, ccfg, &enc)?;
        rows.extend_from_slice(tape.value(z).data());
        batches += 1;
    }
    rows.truncate(limit * ccfg.d_latent);
    Ok((rows, batches))
}

/// k-means++ on current encoder outputs, one codebook per partition.
/// Returns any k-means warnings.
fn init_codebooks(
    store: &ParamStore,
    ccfg: &CodecConfig,
    graphs: &[AugmentedGraph],
    cfg: &ModelConfig,
    cbs: &mut CodebookSet,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>> {
    let (rows, batches) = collect_embeddings(store, ccfg, graphs, cfg.batch_size, cfg.init_samples)?;
    let d = cfg.d_latent;
    let dim = cbs.dim;
    let count = rows.len() / d;
    let per_batch = count as f64 / batches.max(1) as f64;
    let mut warnings = Vec::new();
    for c in 0..cbs.parts {
        let samples: Vec<f64> = rows.chunks(d).flat_map(|r| r[c * dim..(c + 1) * dim].iter().copied()).collect();
        let km = kmeanspp_init(&samples, dim, cbs.m, rng)?;
        if let Some(w) = km.warning {
            warnings.push(format!("partition {c}: {w}"));
        }
        let counts: Vec<f64> = km.counts.iter().map(|&k| k as f64 / count as f64 * per_batch).collect();
        cbs.set_codebook(c, &km.centers, &counts)?;
    }
    Ok(warnings)
}

/// Eval-mode reconstruction through the quantizer.
pub fn reconstruct(model: &TrainedModel, graphs: &[AugmentedGraph]) -> Result<Vec<GraphDistribution>> {
    let ccfg = model.codec_config();
    let mut out = Vec::with_capacity(graphs.len());
    for chunk in graphs.chunks(EVAL_CHUNK) {
        let refs: Vec<&AugmentedGraph> = chunk.iter().collect();
        let z = encode_eval(&model.codec, &ccfg, &refs)?;
        let q = quantize(&z, &model.codebooks)?;
        let sizes: Vec<usize> = chunk.iter().map(|g| g.n()).collect();
        out.extend(decode_eval(&model.codec, &ccfg, &q.flat(), &sizes)?);
    }
    Ok(out)
}

pub fn reconstruction_errors(model: &TrainedModel, graphs: &[AugmentedGraph]) -> Result<ReconErrors> {
    let mut e = ReconErrors::default();
    for (d, g) in reconstruct(model, graphs)?.iter().zip(graphs) {
        e.merge(ReconErrors::measure(d, &g.base));
    }
    Ok(e)
}

/// Eval-mode encoding, quantization and sorting, one sequence per graph.
pub fn encode_sequences(model: &TrainedModel, graphs: &[AugmentedGraph]) -> Result<Vec<IndexSequence>> {
    let ccfg = model.codec_config();
    let parts = model.cfg.parts;
    let mut out = Vec::with_capacity(graphs.len());
    for chunk in graphs.chunks(EVAL_CHUNK) {
        let refs: Vec<&AugmentedGraph> = chunk.iter().collect();
        let z = encode_eval(&model.codec, &ccfg, &refs)?;
        let q = quantize(&z, &model.codebooks)?;
        let mut off = 0;
        for g in chunk {
            let n = g.n();
            out.push(sort_set(&q.indices[off * parts..(off + n) * parts], parts)?.0);
            off += n;
        }
    }
    Ok(out)
}

/// Normalized perplexity of the tuples the model assigns to `graphs`.
pub fn dataset_perplexity(model: &TrainedModel, graphs: &[AugmentedGraph]) -> Result<f64> {
    let seqs = encode_sequences(model, graphs)?;
    let hist = tuple_histogram(seqs.iter().flat_map(|s| s.tuples()));
    perplexity(hist.into_values(), model.codebooks.dictionary_size())
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn at_step(step: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {step}")),
        other => other,
    }
}

pub struct AeOutcome {
    pub model: TrainedModel,
    /// One row per epoch.
    pub curve: Vec<MetricsRow>,
    pub warnings: Vec<String>,
}

/// Stage 1. `T_init` plain auto-encoder updates, k-means++ codebook init,
/// then joint training of `L_recon + γβ·L_commit` with straight-through
/// gradients and EMA codebooks.
pub fn train_autoencoder(
    train: &[Graph],
    heldout: &[Graph],
    cfg: &ModelConfig,
    on_epoch: &mut dyn FnMut(&MetricsRow),
) -> Result<AeOutcome> {
    cfg.check()?;
    if train.is_empty() {
        return Err(Error::InvalidGraph("empty training set".into()));
    }
    let (node_cats, edge_cats) = data_dims(train.iter().chain(heldout))?;
    let ccfg = cfg.codec_config(node_cats, edge_cats);
    let mut store = init_codec(&ccfg, &mut stream_rng(cfg.seed, STREAM_CODEC_INIT))?;
    let mut cbs = CodebookSet::new(cfg.parts, cfg.m, cfg.d_latent / cfg.parts)?;
    cbs.decay = cfg.ema_decay;
    cbs.eps = cfg.ema_eps;
    let aug_train = augment_all(train, &cfg.features, cfg.seed, STREAM_FEATURES)?;
    let aug_held = augment_all(heldout, &cfg.features, cfg.seed, STREAM_HELDOUT_FEATURES)?;
    let mut shuffle = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let mut km_rng = stream_rng(cfg.seed, STREAM_KMEANS);
    let mut noise = stream_rng(cfg.seed, STREAM_NOISE);
    let mut adam = Adam::new(cfg.adam());
    let commit_weight = cfg.gamma * cfg.beta;
    let mut warnings = Vec::new();
    let mut curve = Vec::with_capacity(cfg.epochs_ae);
    let mut step = 0u64;

    for epoch in 0..cfg.epochs_ae {
        let mut order: Vec<usize> = (0..aug_train.len()).collect();
        order.shuffle(&mut shuffle);
        let (mut recon, mut commit) = (Vec::new(), Vec::new());
        let mut hist = BTreeMap::new();
        for chunk in order.chunks(cfg.batch_size) {
            if !cbs.initialized && step >= cfg.t_init as u64 {
                warnings.extend(init_codebooks(&store, &ccfg, &aug_train, cfg, &mut cbs, &mut km_rng)?);
            }
            let fresh: Vec<AugmentedGraph>;
            let batch: Vec<&AugmentedGraph> = if cfg.redraw_random && cfg.features.random {
                fresh = chunk
                    .iter()
                    .map(|&i| {
                        let mut g = aug_train[i].clone();
                        g.redraw_random(&cfg.features, &mut noise);
                        g
                    })
                    .collect();
                fresh.iter().collect()
            } else {
                chunk.iter().map(|&i| &aug_train[i]).collect()
            };
            let quantized = cbs.initialized.then_some(&cbs);
            let mut out = ae_forward_backward(&store, &ccfg, quantized, &batch, commit_weight).map_err(at_step(step))?;
            clip_global_norm(&mut out.grads, cfg.clip_norm);
            adam.step(&mut store, &out.grads)?;
            store.apply_bn_stats(&out.bn);
            if let Some(idx) = &out.indices {
                ema_update(&mut cbs, &out.zh, idx).map_err(at_step(step))?;
                for t in idx.chunks(cfg.parts) {
                    *hist.entry(t.to_vec()).or_insert(0usize) += 1;
                }
            }
            recon.push(out.recon);
            commit.extend(out.commit);
            step += 1;
        }
        let mut row = MetricsRow { epoch, step, loss_recon: mean(&recon), loss_commit: mean(&commit), ..Default::default() };
        if !hist.is_empty() {
            row.perplexity = Some(perplexity(hist.into_values(), cbs.dictionary_size())?);
        }
        let last = epoch + 1 == cfg.epochs_ae;
        if cbs.initialized && !aug_held.is_empty() && ((epoch + 1) % cfg.eval_every == 0 || last) {
            let model = TrainedModel { cfg: cfg.clone(), node_cats, edge_cats, codec: store.clone(), codebooks: cbs.clone(), prior: None, step };
            let e = reconstruction_errors(&model, &aug_held)?;
            row.node_err = Some(e.node_rate());
            row.edge_err = Some(e.edge_rate());
        }
        on_epoch(&row);
        curve.push(row);
    }
    if !cbs.initialized {
        warnings.extend(init_codebooks(&store, &ccfg, &aug_train, cfg, &mut cbs, &mut km_rng)?);
    }
    let model = TrainedModel { cfg: cfg.clone(), node_cats, edge_cats, codec: store, codebooks: cbs, prior: None, step };
    Ok(AeOutcome { model, curve, warnings })
}

pub struct PriorOutcome {
    pub model: TrainedModel,
    pub curve: Vec<MetricsRow>,
    /// Sorted training sequences the prior was fit to.
    pub cache: SequenceCache,
}

fn check_lengths(seqs: &[IndexSequence], n_max: usize, what: &str) -> Result<()> {
    for (i, s) in seqs.iter().enumerate() {
        if s.n() > n_max {
            return Err(Error::Config(vec![format!("{what} graph {i} has {} nodes, beyond n_max = {n_max}", s.n())]));
        }
    }
    Ok(())
}

/// Mean per-position NLL over `seqs` under frozen prior weights.
pub fn mean_nll(model: &TrainedModel, seqs: &[IndexSequence]) -> Result<f64> {
    let prior = model.prior.as_ref().ok_or_else(|| Error::Unsupported("model has no prior".into()))?;
    let pcfg = model.cfg.prior_config();
    let mut total = 0.0;
    for chunk in seqs.chunks(EVAL_CHUNK) {
        let batch = PriorBatch::new(&pcfg, &model.codebooks, chunk)?;
        let tape = Tape::new();
        let ctx = Ctx::frozen(&tape, prior, false);
        total += tape.item(prior_loss(&ctx, &pcfg, &batch)?) * chunk.len() as f64;
    }
    Ok(total / seqs.len().max(1) as f64)
}

/// Stage 2. The training set is encoded, quantized and sorted once; the
/// prior is then fit to those sequences with the stage-1 optimizer policy.
pub fn train_prior(
    stage1: TrainedModel,
    train: &[Graph],
    heldout: &[Graph],
    on_epoch: &mut dyn FnMut(&MetricsRow),
) -> Result<PriorOutcome> {
    let cfg = stage1.cfg.clone();
    cfg.check()?;
    let pcfg = cfg.prior_config();
    if train.is_empty() {
        return Err(Error::InvalidGraph("empty training set".into()));
    }
    let seqs = encode_sequences(&stage1, &augment_all(train, &cfg.features, cfg.seed, STREAM_FEATURES)?)?;
    let held = encode_sequences(&stage1, &augment_all(heldout, &cfg.features, cfg.seed, STREAM_HELDOUT_FEATURES)?)?;
    check_lengths(&seqs, cfg.n_max, "training")?;
    check_lengths(&held, cfg.n_max, "held-out")?;

    let mut store = init_prior(&pcfg, &mut stream_rng(cfg.seed, STREAM_PRIOR_INIT))?;
    let mut shuffle = stream_rng(cfg.seed, STREAM_PRIOR_SHUFFLE);
    let mut adam = Adam::new(cfg.adam());
    let mut step = stage1.step;
    let mut curve = Vec::with_capacity(cfg.epochs_prior);
    let mut model = stage1;
    for epoch in 0..cfg.epochs_prior {
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.shuffle(&mut shuffle);
        let mut nll = Vec::new();
        for chunk in order.chunks(cfg.prior_batch_size) {
            let batch_seqs: Vec<IndexSequence> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let batch = PriorBatch::new(&pcfg, &model.codebooks, &batch_seqs)?;
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, true);
            let loss = prior_loss(&ctx, &pcfg, &batch)?;
            let value = tape.item(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("prior loss at step {step}")));
            }
            let grads = tape.backward(loss)?;
            let mut g = ctx.param_grads(&grads);
            drop(ctx);
            clip_global_norm(&mut g, cfg.clip_norm);
            adam.step(&mut store, &g)?;
            nll.push(value);
            step += 1;
        }
        let mut row = MetricsRow { epoch, step, nll: mean(&nll), ..Default::default() };
        if !held.is_empty() && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs_prior) {
            model.prior = Some(store.clone());
            row.heldout_nll = Some(mean_nll(&model, &held)?);
        }
        on_epoch(&row);
        curve.push(row);
    }
    model.prior = Some(store);
    model.step = step;
    let cache = SequenceCache { m: cfg.m, parts: cfg.parts, seqs };
    Ok(PriorOutcome { model, curve, cache })
}

/// Decoded samples with per-phase wall time.
pub struct Samples {
    pub graphs: Vec<Graph>,
    pub stats: Vec<GenerationStats>,
    pub sample_secs: f64,
    pub decode_secs: f64,
}

impl Samples {
    pub fn sampling_steps(&self) -> usize {
        self.stats.iter().map(|s| s.sampling_steps).sum()
    }
}

/// Ancestral sampling of `count` index sequences, then batched decoding of
/// their codewords and the mode of each decoded distribution.
pub fn sample_graphs(model: &TrainedModel, count: usize, n_max: usize, rng: &mut ChaCha8Rng) -> Result<Samples> {
    let prior = model.prior.as_ref().ok_or_else(|| Error::Unsupported("checkpoint has no prior; run train-prior first".into()))?;
    let mut pcfg = model.cfg.prior_config();
    pcfg.n_max = n_max;
    let pm = PriorModel::new(&pcfg, prior)?;
    let t0 = Instant::now();
    let mut sets = Vec::with_capacity(count);
    let mut stats = Vec::with_capacity(count);
    for _ in 0..count {
        let (_, q, s) = generate(&pm, &model.codebooks, n_max, rng)?;
        sets.push(q);
        stats.push(s);
    }
    let sample_secs = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let ccfg = model.codec_config();
    let mut graphs = Vec::with_capacity(count);
    for chunk in sets.chunks(EVAL_CHUNK) {
        let sizes: Vec<usize> = chunk.iter().map(|q| q.n).collect();
        let rows: Vec<f64> = chunk.iter().flat_map(|q| q.codewords.data().iter().copied()).collect();
        let z = Tensor::matrix(sizes.iter().sum(), model.cfg.d_latent, rows)?;
        for d in decode_eval(&model.codec, &ccfg, &z, &sizes)? {
            graphs.push(sample_graph(&d)?);
        }
    }
    Ok(Samples { graphs, stats, sample_secs, decode_secs: t1.elapsed().as_secs_f64() })
}
