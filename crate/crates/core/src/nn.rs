//! Parameter storage and the small layer vocabulary shared by the models.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Grads, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.9;
pub const NORM_EPS: f64 = 1e-5;

/// Named trainable tensors plus non-trainable buffers (running statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) {
        self.buffers.insert(name.into(), t);
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers.get(name).ok_or_else(|| Error::Format(format!("missing buffer {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers.get_mut(name).ok_or_else(|| Error::Format(format!("missing buffer {name}")))
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.buffers.iter_mut()
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    /// Parameter tensors in name order (the order [`Ctx::from_vars`] expects).
    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params.values().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Weight `in × out` and bias, uniform in `±1/√in`.
    pub fn add_linear<R: Rng + ?Sized>(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert_param(format!("{name}.w"), Tensor::new(vec![fan_in, fan_out], w).expect("linear shape"));
        if bias {
            let b = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            self.insert_param(format!("{name}.b"), Tensor::vector(b));
        }
    }

    /// Linear layers `widths[0] → widths[1] → …` named `{name}.{k}`.
    pub fn add_mlp<R: Rng + ?Sized>(&mut self, name: &str, widths: &[usize], rng: &mut R) {
        for (k, w) in widths.windows(2).enumerate() {
            self.add_linear(&format!("{name}.{k}"), w[0], w[1], true, rng);
        }
    }

    pub fn add_batch_norm(&mut self, name: &str, width: usize) {
        self.insert_param(format!("{name}.gamma"), Tensor::full(&[width], 1.0));
        self.insert_param(format!("{name}.beta"), Tensor::zeros(&[width]));
        self.insert_buffer(format!("{name}.mean"), Tensor::zeros(&[width]));
        self.insert_buffer(format!("{name}.var"), Tensor::full(&[width], 1.0));
    }

    pub fn add_layer_norm(&mut self, name: &str, width: usize) {
        self.insert_param(format!("{name}.gamma"), Tensor::full(&[width], 1.0));
        self.insert_param(format!("{name}.beta"), Tensor::zeros(&[width]));
    }

    /// Folds batch statistics into running averages:
    /// `running = m·running + (1−m)·batch`, variance unbiased.
    pub fn apply_bn_stats(&mut self, stats: &[BnStat]) {
        for s in stats {
            let unbias = if s.count > 1 { s.count as f64 / (s.count - 1) as f64 } else { 1.0 };
            if let Some(m) = self.buffers.get_mut(&format!("{}.mean", s.name)) {
                for (r, b) in m.data_mut().iter_mut().zip(&s.mean) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
            }
            if let Some(v) = self.buffers.get_mut(&format!("{}.var", s.name)) {
                for (r, b) in v.data_mut().iter_mut().zip(&s.var) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b * unbias;
                }
            }
        }
    }
}

/// Batch statistics observed by one training-mode batch norm call.
#[derive(Clone, Debug)]
pub struct BnStat {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// One forward pass: the tape, the parameters bound onto it, and the mode.
pub struct Ctx<'a> {
    pub tape: &'a Tape,
    store: &'a ParamStore,
    vars: BTreeMap<&'a str, Var>,
    pub train: bool,
    bn_stats: RefCell<Vec<BnStat>>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore, train: bool) -> Self {
        let vars = store.params.iter().map(|(k, t)| (k.as_str(), tape.leaf(t.clone()))).collect();
        Ctx { tape, store, vars, train, bn_stats: RefCell::new(Vec::new()) }
    }

    /// Like [`Ctx::new`] but parameters are constants (no gradients).
    pub fn frozen(tape: &'a Tape, store: &'a ParamStore, train: bool) -> Self {
        let vars = store.params.iter().map(|(k, t)| (k.as_str(), tape.constant(t.clone()))).collect();
        Ctx { tape, store, vars, train, bn_stats: RefCell::new(Vec::new()) }
    }

    /// Binds parameters to existing tape variables, in `store` name order.
    pub fn from_vars(tape: &'a Tape, store: &'a ParamStore, vars: &[Var], train: bool) -> Result<Self> {
        if vars.len() != store.params.len() {
            return Err(Error::Shape(format!("{} variables for {} parameters", vars.len(), store.params.len())));
        }
        let vars = store.params.keys().map(String::as_str).zip(vars.iter().copied()).collect();
        Ok(Ctx { tape, store, vars, train, bn_stats: RefCell::new(Vec::new()) })
    }

    pub fn p(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn linear(&self, name: &str, x: Var) -> Result<Var> {
        let y = self.tape.matmul(x, self.p(&format!("{name}.w"))?)?;
        let bias = format!("{name}.b");
        if self.has(&bias) {
            self.tape.add_row(y, self.p(&bias)?)
        } else {
            Ok(y)
        }
    }

    /// Linear layers with ReLU between them (none after the last).
    pub fn mlp(&self, name: &str, depth: usize, x: Var) -> Result<Var> {
        let mut h = x;
        for k in 0..depth {
            h = self.linear(&format!("{name}.{k}"), h)?;
            if k + 1 < depth {
                h = self.tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn batch_norm(&self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.p(&format!("{name}.gamma"))?;
        let beta = self.p(&format!("{name}.beta"))?;
        if self.train {
            let count = self.tape.value(x).rows();
            let (y, mean, var) = self.tape.batch_norm(x, gamma, beta, NORM_EPS)?;
            self.bn_stats.borrow_mut().push(BnStat { name: name.to_string(), mean, var, count });
            Ok(y)
        } else {
            let mean = self.store.buffer(&format!("{name}.mean"))?;
            let var = self.store.buffer(&format!("{name}.var"))?;
            self.tape.batch_norm_eval(x, gamma, beta, mean.data(), var.data(), NORM_EPS)
        }
    }

    pub fn layer_norm(&self, name: &str, x: Var) -> Result<Var> {
        self.tape.layer_norm(x, self.p(&format!("{name}.gamma"))?, self.p(&format!("{name}.beta"))?, NORM_EPS)
    }

    pub fn take_bn_stats(&self) -> Vec<BnStat> {
        std::mem::take(&mut self.bn_stats.borrow_mut())
    }

    /// Gradient per parameter name (zeros where nothing flowed).
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, Vec<f64>> {
        self.vars.iter().map(|(k, &v)| (k.to_string(), grads.data(v))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::new();
        store.add_batch_norm("bn", 1);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, true);
        let x = tape.constant(Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap());
        ctx.batch_norm("bn", x).unwrap();
        let stats = ctx.take_bn_stats();
        drop(ctx);
        store.apply_bn_stats(&stats);
        assert!((store.buffer("bn.mean").unwrap().data()[0] - 0.2).abs() < 1e-15);
        // unbiased batch variance is 2
        assert!((store.buffer("bn.var").unwrap().data()[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn mlp_shapes_and_grads_reach_every_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.add_mlp("f", &[3, 5, 5, 2], &mut rng);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, true);
        let x = tape.constant(Tensor::matrix(4, 3, (0..12).map(|k| k as f64 * 0.1).collect()).unwrap());
        let y = ctx.mlp("f", 3, x).unwrap();
        assert_eq!(tape.shape(y), vec![4, 2]);
        let s = tape.sum_all(y);
        let g = ctx.param_grads(&tape.backward(s).unwrap());
        assert_eq!(g.len(), 6);
        assert!(g["f.2.b"].iter().all(|&v| v == 4.0));
    }
}
