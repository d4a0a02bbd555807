use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::error::{Error, Result};
use crate::featurize::FeatureConfig;
use crate::prior::PriorConfig;

/// Every model and training knob. Defaults are the Community-Small column
/// of the published hyperparameter tables, at desk scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub seed: u64,
    pub features: FeatureConfig,
    /// Draw fresh random node features for every training batch.
    pub redraw_random: bool,

    pub gnn_layers: usize,
    /// Node and edge state width.
    pub hidden: usize,
    pub mlp_hidden: usize,
    /// Linear layers per message-passing perceptron.
    pub mlp_depth: usize,
    pub d_latent: usize,
    /// Partitions `C`.
    pub parts: usize,
    /// Codewords per codebook.
    pub m: usize,
    pub beta: f64,
    pub gamma: f64,
    pub ema_decay: f64,
    pub ema_eps: f64,
    /// Quantization-free warm-up updates before k-means++ init.
    pub t_init: usize,
    /// Encoder outputs collected for k-means++ (capped by the training set).
    pub init_samples: usize,

    pub blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_depth: usize,
    pub n_max: usize,

    pub batch_size: usize,
    pub prior_batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_interval: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub epochs_ae: usize,
    pub epochs_prior: usize,
    pub heldout_fraction: f64,
    /// Held-out metrics are computed every this many epochs and at the end.
    pub eval_every: usize,

    pub mmd_sigma: f64,
    pub clustering_bins: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seed: 0,
            features: FeatureConfig::default(),
            redraw_random: true,
            gnn_layers: 2,
            hidden: 32,
            mlp_hidden: 64,
            mlp_depth: 3,
            d_latent: 16,
            parts: 2,
            m: 16,
            beta: 0.25,
            gamma: 0.1,
            ema_decay: 0.99,
            ema_eps: 1e-5,
            t_init: 200,
            init_samples: 10_000,
            blocks: 3,
            d_model: 64,
            heads: 16,
            ff_depth: 4,
            n_max: 20,
            batch_size: 32,
            prior_batch_size: 32,
            lr: 1e-3,
            lr_decay: 0.5,
            decay_interval: 10_000,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            epochs_ae: 200,
            epochs_prior: 200,
            heldout_fraction: 0.2,
            eval_every: 10,
            mmd_sigma: 1.0,
            clustering_bins: 100,
        }
    }
}

impl ModelConfig {
    /// Parses a TOML document; absent keys keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut v = self.features.validate();
        for (name, x) in [
            ("gnn_layers", self.gnn_layers),
            ("hidden", self.hidden),
            ("mlp_hidden", self.mlp_hidden),
            ("d_latent", self.d_latent),
            ("parts", self.parts),
            ("blocks", self.blocks),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("n_max", self.n_max),
            ("batch_size", self.batch_size),
            ("prior_batch_size", self.prior_batch_size),
            ("decay_interval", self.decay_interval),
            ("init_samples", self.init_samples),
            ("eval_every", self.eval_every),
            ("clustering_bins", self.clustering_bins),
        ] {
            if x == 0 {
                v.push(format!("{name} must be positive"));
            }
        }
        if self.parts > 0 && self.d_latent % self.parts != 0 {
            v.push(format!("parts ({}) must divide d_latent ({})", self.parts, self.d_latent));
        }
        if self.m < 2 {
            v.push(format!("m must be at least 2, got {}", self.m));
        }
        if self.heads > 0 && self.d_model % self.heads != 0 {
            v.push(format!("heads ({}) must divide d_model ({})", self.heads, self.d_model));
        }
        if self.mlp_depth < 2 {
            v.push("mlp_depth must be at least 2".into());
        }
        if self.ff_depth < 2 {
            v.push("ff_depth must be at least 2".into());
        }
        for (name, x) in [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lr", self.lr),
            ("lr_decay", self.lr_decay),
            ("adam_eps", self.adam_eps),
            ("ema_eps", self.ema_eps),
            ("clip_norm", self.clip_norm),
            ("mmd_sigma", self.mmd_sigma),
        ] {
            if !(x.is_finite() && x > 0.0) {
                v.push(format!("{name} must be positive and finite, got {x}"));
            }
        }
        for (name, x) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2), ("ema_decay", self.ema_decay)] {
            if !(0.0..1.0).contains(&x) {
                v.push(format!("{name} must lie in [0, 1), got {x}"));
            }
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            v.push(format!("heldout_fraction must lie in [0, 1), got {}", self.heldout_fraction));
        }
        v
    }

    pub fn check(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn codec_config(&self, node_cats: usize, edge_cats: usize) -> CodecConfig {
        CodecConfig {
            layers: self.gnn_layers,
            hidden: self.hidden,
            mlp_hidden: self.mlp_hidden,
            mlp_depth: self.mlp_depth,
            d_latent: self.d_latent,
            node_in: self.features.node_width(node_cats),
            edge_in: self.features.edge_width(edge_cats),
            node_cats,
            edge_cats,
        }
    }

    pub fn prior_config(&self) -> PriorConfig {
        PriorConfig {
            parts: self.parts,
            m: self.m,
            d_latent: self.d_latent,
            d_model: self.d_model,
            heads: self.heads,
            blocks: self.blocks,
            ff_depth: self.ff_depth,
            n_max: self.n_max,
        }
    }
}
