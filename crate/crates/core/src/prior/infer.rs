//! Tape-free forward pass with cached keys and values, used for sampling.

use rand::Rng;

use super::{positional_encoding, step_mask, IndexSequence, PriorConfig};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, NORM_EPS};
use crate::quantizer::{lookup, CodebookSet, QuantizedSet};

struct Lin {
    w: Vec<f64>,
    b: Option<Vec<f64>>,
    fan_out: usize,
}

impl Lin {
    fn load(store: &ParamStore, name: &str) -> Result<Self> {
        let w = store.param(&format!("{name}.w"))?;
        let b = store.param(&format!("{name}.b")).ok().map(|t| t.data().to_vec());
        Ok(Lin { w: w.data().to_vec(), b, fan_out: w.cols() })
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.b.clone().unwrap_or_else(|| vec![0.0; self.fan_out]);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (yo, w) in y.iter_mut().zip(&self.w[i * self.fan_out..(i + 1) * self.fan_out]) {
                *yo += xi * w;
            }
        }
        y
    }
}

struct Norm {
    gamma: Vec<f64>,
    beta: Vec<f64>,
}

impl Norm {
    fn load(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Norm {
            gamma: store.param(&format!("{name}.gamma"))?.data().to_vec(),
            beta: store.param(&format!("{name}.beta"))?.data().to_vec(),
        })
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        x.iter().zip(self.gamma.iter().zip(&self.beta)).map(|(v, (g, b))| (v - mean) * inv * g + b).collect()
    }
}

struct Block {
    q: Vec<Lin>,
    k: Lin,
    v: Lin,
    ln1: Norm,
    ff: Vec<Lin>,
    ln2: Norm,
}

/// Prior weights unpacked for single-position evaluation.
pub struct PriorModel {
    pub cfg: PriorConfig,
    input: Vec<Lin>,
    blocks: Vec<Block>,
    out: Vec<Lin>,
}

impl PriorModel {
    pub fn new(cfg: &PriorConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let input = (0..cfg.parts).map(|c| Lin::load(store, &format!("prior.in.{c}"))).collect::<Result<_>>()?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for l in 0..cfg.blocks {
            blocks.push(Block {
                q: (0..cfg.parts).map(|c| Lin::load(store, &format!("prior.{l}.q.{c}"))).collect::<Result<_>>()?,
                k: Lin::load(store, &format!("prior.{l}.k"))?,
                v: Lin::load(store, &format!("prior.{l}.v"))?,
                ln1: Norm::load(store, &format!("prior.{l}.ln1"))?,
                ff: (0..cfg.ff_depth).map(|k| Lin::load(store, &format!("prior.{l}.ff.{k}"))).collect::<Result<_>>()?,
                ln2: Norm::load(store, &format!("prior.{l}.ln2"))?,
            });
        }
        let out = (0..cfg.parts).map(|c| Lin::load(store, &format!("prior.out.{c}"))).collect::<Result<_>>()?;
        Ok(PriorModel { cfg: cfg.clone(), input, blocks, out })
    }

    pub fn session(&self) -> Session<'_> {
        Session { model: self, keys: vec![Vec::new(); self.cfg.blocks], values: vec![Vec::new(); self.cfg.blocks], cached: 0 }
    }

    /// Logits for every step and stream of a teacher-forced sequence,
    /// indexed `[c][t]` for `t` in `0..=n`.
    pub fn teacher_forced(&self, cbs: &CodebookSet, seq: &IndexSequence) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut s = self.session();
        let mut out = vec![Vec::with_capacity(seq.n() + 1); self.cfg.parts];
        for t in 0..=seq.n() {
            for (c, row) in out.iter_mut().enumerate() {
                let known = if t < seq.n() { &seq.tuple(t)[..c] } else { &[][..] };
                let mut x = position_input(&self.cfg, cbs, (t > 0).then(|| seq.tuple(t - 1)), known);
                // past the last node the known partitions are zero vectors
                x.resize(self.cfg.in_width(c), 0.0);
                row.push(s.position(t, c, &x)?);
            }
        }
        Ok(out)
    }
}

/// `[node t−1 codewords | known partitions of node t]`, zeros where absent.
fn position_input(cfg: &PriorConfig, cbs: &CodebookSet, prev: Option<&[usize]>, known: &[usize]) -> Vec<f64> {
    let mut x = Vec::with_capacity(cfg.in_width(known.len()));
    match prev {
        Some(p) => p.iter().enumerate().for_each(|(c, &k)| x.extend_from_slice(cbs.codeword(c, k))),
        None => x.resize(cfg.d_latent, 0.0),
    }
    for (c, &k) in known.iter().enumerate() {
        x.extend_from_slice(cbs.codeword(c, k));
    }
    x
}

/// Evaluation state: keys and values of the stream-0 positions seen so far.
pub struct Session<'a> {
    model: &'a PriorModel,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    cached: usize,
}

impl Session<'_> {
    /// Logits at step `t`, stream `c`. Stream 0 of each step must be evaluated
    /// first, in step order; it appends that step's keys and values.
    pub fn position(&mut self, t: usize, c: usize, input: &[f64]) -> Result<Vec<f64>> {
        let m = self.model;
        let cfg = &m.cfg;
        if c >= cfg.parts || input.len() != cfg.in_width(c) {
            return Err(Error::Shape(format!("position ({t}, {c}) input of width {}", input.len())));
        }
        let expect = if c == 0 { t } else { t + 1 };
        if self.cached != expect {
            return Err(Error::Shape(format!("position ({t}, {c}) evaluated out of order")));
        }
        let d = cfg.d_model;
        let dk = d / cfg.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut z = m.input[c].apply(input);
        for (zx, p) in z.iter_mut().zip(positional_encoding(t, d)) {
            *zx += p;
        }
        for (l, b) in m.blocks.iter().enumerate() {
            let q = b.q[c].apply(&z);
            let mut a = vec![0.0; d];
            for h in 0..cfg.heads {
                let hs = h * dk..(h + 1) * dk;
                let scores: Vec<f64> = (0..t)
                    .map(|j| q[hs.clone()].iter().zip(&self.keys[l][j * d + hs.start..j * d + hs.end]).map(|(x, y)| x * y).sum::<f64>() * scale)
                    .collect();
                let probs = softmax(&scores);
                for (j, p) in probs.iter().enumerate() {
                    for (ax, vx) in a[hs.clone()].iter_mut().zip(&self.values[l][j * d + hs.start..j * d + hs.end]) {
                        *ax += p * vx;
                    }
                }
            }
            if c == 0 {
                self.keys[l].extend(b.k.apply(&z));
                self.values[l].extend(b.v.apply(&z));
            }
            let res: Vec<f64> = z.iter().zip(&a).map(|(x, y)| x + y).collect();
            let at = b.ln1.apply(&res);
            let mut f = at.clone();
            for (k, lin) in b.ff.iter().enumerate() {
                f = lin.apply(&f);
                if k + 1 < b.ff.len() {
                    f.iter_mut().for_each(|x| *x = x.max(0.0));
                }
            }
            let res: Vec<f64> = at.iter().zip(&f).map(|(x, y)| x + y).collect();
            z = b.ln2.apply(&res);
        }
        if c == 0 {
            self.cached += 1;
        }
        Ok(m.out[c].apply(&z))
    }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; x.len()];
    }
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Draws a class from `logits` restricted to `allowed`.
pub fn sample_masked<R: Rng + ?Sized>(logits: &[f64], allowed: &[bool], rng: &mut R) -> usize {
    let masked: Vec<f64> = logits.iter().zip(allowed).map(|(&l, &ok)| if ok { l } else { f64::NEG_INFINITY }).collect();
    let p = softmax(&masked);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &pk) in p.iter().enumerate() {
        if pk > 0.0 {
            acc += pk;
            last = k;
            if u < acc {
                return k;
            }
        }
    }
    last
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GenerationStats {
    /// Hit `n_max` before sampling end-of-sequence.
    pub truncated: bool,
    pub sampling_steps: usize,
}

/// Ancestral sampling of one index sequence, then codebook lookup.
///
/// End-of-sequence is unavailable before the first node, which is the same
/// distribution as rejecting and redrawing it there.
pub fn generate<R: Rng + ?Sized>(
    model: &PriorModel,
    cbs: &CodebookSet,
    n_max: usize,
    rng: &mut R,
) -> Result<(IndexSequence, QuantizedSet, GenerationStats)> {
    let cfg = &model.cfg;
    let mut s = model.session();
    let mut rows: Vec<usize> = Vec::new();
    let mut stats = GenerationStats::default();
    for t in 0..=n_max {
        if t == n_max {
            stats.truncated = true;
            break;
        }
        let prev: Option<Vec<usize>> = (t > 0).then(|| rows[(t - 1) * cfg.parts..t * cfg.parts].to_vec());
        let mut current = Vec::with_capacity(cfg.parts);
        let mut ended = false;
        for c in 0..cfg.parts {
            let x = position_input(cfg, cbs, prev.as_deref(), &current);
            let logits = s.position(t, c, &x)?;
            let allowed = step_mask(cfg, c, t, prev.as_ref().map(|p| p[0]));
            let k = sample_masked(&logits, &allowed, rng);
            stats.sampling_steps += 1;
            if k == cfg.eos() {
                ended = true;
                break;
            }
            current.push(k);
        }
        if ended {
            break;
        }
        rows.extend(current);
    }
    let seq = IndexSequence::new(cfg.parts, rows)?;
    let q = lookup(cbs, &seq.rows)?;
    Ok((seq, q, stats))
}
