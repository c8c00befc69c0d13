//! Bi-level episodic training.
//!
//! The inner loop adapts all parameters on an episode's support loss; the
//! outer loop updates the base parameters from the adapted model's query
//! objective, relation loss and bottleneck terms, averaged over a batch.

mod model;
mod optim;
mod trainer;

pub use model::{
    batch_noise_stats, bce_sum, embed_all, encode_context, inner_adapt, molecule_probabilities, outer_loss,
    predict_property, predict_query, retain_probabilities, support_loss, Embeddings, GateDraws,
    ModelConfig, OuterTerms, PreparedEpisode,
};
pub use optim::{OptimizerKind, OuterOptimizer};
pub use trainer::{Checkpoint, EpisodeReport, GateMonitor, StepReport, Trainer};
pub(crate) use trainer::stream_rng;

use serde::{Deserialize, Serialize};

use crate::cprl::RelationLossMode;
use crate::encoder::Readout;
use crate::error::{config_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub k: usize,
    pub m: usize,
    pub n_auxi: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub beta: f64,
    pub temperature: f64,
    pub inner_steps: usize,
    pub first_order: bool,
    pub rel_loss: RelationLossMode,
    pub no_cprl: bool,
    pub no_cgib: bool,
    pub contrastive: bool,
    pub optimizer: OptimizerKind,
    pub adapt_encoder: bool,
    pub seed: u64,
    /// Support resamplings per test property.
    pub eval_repeats: usize,
    /// Query molecules per context graph at test time.
    pub eval_chunk: usize,
    /// Steps between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            k: 5,
            m: 16,
            n_auxi: 5,
            batch_size: 5,
            epochs: 10,
            steps_per_epoch: 20,
            inner_lr: 0.05,
            outer_lr: 1e-3,
            beta: 0.05,
            temperature: 1.0,
            inner_steps: 1,
            first_order: false,
            rel_loss: RelationLossMode::Mse,
            no_cprl: false,
            no_cgib: false,
            contrastive: false,
            optimizer: OptimizerKind::Sgd,
            adapt_encoder: true,
            seed: 0,
            eval_repeats: 10,
            eval_chunk: 16,
            checkpoint_every: 0,
            threads: 0,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in documentation order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("k", "support molecules per class"),
    ("m", "query molecules per training episode"),
    ("n_auxi", "auxiliary properties per episode"),
    ("batch_size", "episodes per outer step"),
    ("epochs", "training epochs"),
    ("steps_per_epoch", "outer steps per epoch"),
    ("inner_lr", "inner-loop learning rate"),
    ("outer_lr", "outer-loop learning rate"),
    ("beta", "bottleneck penalty weight"),
    ("temperature", "gate temperature"),
    ("inner_steps", "inner gradient steps"),
    ("first_order", "drop second-order terms (true/false)"),
    ("rel_loss", "relation loss: mse or bce"),
    ("no_cprl", "disable relation learning"),
    ("no_cgib", "disable the gated bottleneck"),
    ("contrastive", "add the contrastive alignment term"),
    ("optimizer", "outer optimizer: sgd or adam"),
    ("adapt_encoder", "adapt the molecular encoder in the inner loop"),
    ("seed", "random seed"),
    ("eval_repeats", "support resamplings per test property"),
    ("eval_chunk", "query molecules per context graph at test time"),
    ("checkpoint_every", "steps between checkpoints (0 = off)"),
    ("threads", "worker threads (0 = all cores)"),
    ("enc_layers", "encoder layers"),
    ("d1", "encoder width"),
    ("readout", "encoder readout: mean or sum"),
    ("ctx_layers", "context encoder layers"),
    ("d2", "context encoder width"),
    ("head_hidden", "hidden width of the prediction, relation and gate heads"),
    ("include_unknown", "materialize unknown edges in the context graph"),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| config_err!("invalid value `{value}` for `{key}`"))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.inner_lr > 0.0) || !(self.outer_lr > 0.0) {
            return Err(config_err!("learning rates must be positive"));
        }
        if !(self.beta >= 0.0) {
            return Err(config_err!("beta must be non-negative"));
        }
        if !(self.temperature > 0.0) {
            return Err(config_err!("temperature must be positive"));
        }
        if self.batch_size == 0 || self.k == 0 {
            return Err(config_err!("batch size and K must be at least 1"));
        }
        if self.contrastive && self.batch_size < 2 {
            return Err(config_err!("contrastive term needs a batch of at least 2 episodes"));
        }
        if self.eval_repeats == 0 || self.eval_chunk == 0 {
            return Err(config_err!("evaluation repeats and chunk size must be at least 1"));
        }
        Ok(())
    }

    /// Sets one field from its flat-config key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "k" => self.k = parse(key, v)?,
            "m" => self.m = parse(key, v)?,
            "n_auxi" => self.n_auxi = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(key, v)?,
            "inner_lr" => self.inner_lr = parse(key, v)?,
            "outer_lr" => self.outer_lr = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "inner_steps" => self.inner_steps = parse(key, v)?,
            "first_order" => self.first_order = parse(key, v)?,
            "rel_loss" => {
                self.rel_loss = match v {
                    "mse" => RelationLossMode::Mse,
                    "bce" => RelationLossMode::Bce,
                    _ => return Err(config_err!("rel_loss must be mse or bce, got `{v}`")),
                }
            }
            "no_cprl" => self.no_cprl = parse(key, v)?,
            "no_cgib" => self.no_cgib = parse(key, v)?,
            "contrastive" => self.contrastive = parse(key, v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam,
                    _ => return Err(config_err!("optimizer must be sgd or adam, got `{v}`")),
                }
            }
            "adapt_encoder" => self.adapt_encoder = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "eval_repeats" => self.eval_repeats = parse(key, v)?,
            "eval_chunk" => self.eval_chunk = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "enc_layers" => self.model.encoder.layers = parse(key, v)?,
            "d1" => self.model.encoder.dim = parse(key, v)?,
            "readout" => {
                self.model.encoder.readout = match v {
                    "mean" => Readout::Mean,
                    "sum" => Readout::Sum,
                    _ => return Err(config_err!("readout must be mean or sum, got `{v}`")),
                }
            }
            "ctx_layers" => self.model.context_layers = parse(key, v)?,
            "d2" => self.model.context_dim = parse(key, v)?,
            "head_hidden" => self.model.head_hidden = parse(key, v)?,
            "include_unknown" => self.model.include_unknown = parse(key, v)?,
            other => return Err(config_err!("unknown configuration key `{other}`")),
        }
        Ok(())
    }

    /// Applies a named ablation variant: `full`, `no_cprl`, `no_cgib`,
    /// `no_cprl_cgib` or `contrastive`.
    pub fn apply_mode(&mut self, mode: &str) -> Result<()> {
        let (cprl, cgib, cont) = match mode {
            "full" => (true, true, false),
            "no_cprl" => (false, true, false),
            "no_cgib" => (true, false, false),
            "no_cprl_cgib" => (false, false, false),
            "contrastive" => (true, true, true),
            _ => return Err(config_err!("unknown ablation mode `{mode}`")),
        };
        self.no_cprl = !cprl;
        self.no_cgib = !cgib;
        self.contrastive = cont;
        Ok(())
    }
}
