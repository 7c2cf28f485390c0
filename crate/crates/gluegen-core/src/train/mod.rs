//! Training: AdamW, the adversarial train loop, checkpointing, and the
//! `translate` / `loop_stability_eval` entry points.
//!
//! One optimizer step consumes one batch. When the adversarial weight is
//! positive, each step first updates the discriminator on (real targets,
//! detached fakes) and only then updates the translator pair against the
//! freshly-updated critic.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::objectives::LossWeights;

mod adamw;
mod checkpoint;
mod trainer;

pub use adamw::{adamw_step, AdamWParams, AdamWState};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use trainer::{
    loop_stability_eval, loss_csv, train, translate, LoopStability, LossRow, TrainOutcome, Trainer,
};

/// Hyperparameters for one training run.
///
/// `steps` counts optimizer steps (one batch each); `checkpoint_every = 0`
/// disables scheduled checkpoints. When `reweight` is set, the per-token MSE
/// weights are computed once before training, from the store at
/// `weights_from` when given and from the corpus targets otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_disc: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub reweight: bool,
    pub weights_from: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            lr_disc: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            steps: 1000,
            batch_size: 32,
            loss_weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
            reweight: false,
            weights_from: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr", self.lr), ("lr_disc", self.lr_disc)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !b.is_finite() || !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !self.eps.is_finite() || self.eps <= 0.0 {
            return Err(Error::Config(format!("eps must be finite and > 0, got {}", self.eps)));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.loss_weights.validate()
    }

    /// Canonical text form, mirroring [`GlueNetConfig::to_text`]: fixed key
    /// order, one `key = value` per line, `weights_from` omitted when unset.
    ///
    /// [`GlueNetConfig::to_text`]: crate::model::GlueNetConfig::to_text
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "lr = {}\nlr_disc = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\nweight_decay = {}\nsteps = {}\nbatch_size = {}\nlambda_mse = {}\nlambda_adv = {}\nlambda_rec = {}\nseed = {}\ncheckpoint_every = {}\nreweight = {}\n",
            self.lr,
            self.lr_disc,
            self.beta1,
            self.beta2,
            self.eps,
            self.weight_decay,
            self.steps,
            self.batch_size,
            self.loss_weights.lambda_mse,
            self.loss_weights.lambda_adv,
            self.loss_weights.lambda_rec,
            self.seed,
            self.checkpoint_every,
            self.reweight,
        );
        if let Some(path) = &self.weights_from {
            out.push_str(&format!("weights_from = {}\n", path.display()));
        }
        out
    }

    /// Parse the `key = value` text form. Blank lines and `#` comments are
    /// ignored; unknown or duplicate keys are errors; every key except
    /// `weights_from` is required.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut seen: Vec<String> = Vec::new();
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|s| s == key) {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
            let bad = || Error::Config(format!("invalid value for `{key}`: `{value}`"));
            match key {
                "lr" => cfg.lr = value.parse().map_err(|_| bad())?,
                "lr_disc" => cfg.lr_disc = value.parse().map_err(|_| bad())?,
                "beta1" => cfg.beta1 = value.parse().map_err(|_| bad())?,
                "beta2" => cfg.beta2 = value.parse().map_err(|_| bad())?,
                "eps" => cfg.eps = value.parse().map_err(|_| bad())?,
                "weight_decay" => cfg.weight_decay = value.parse().map_err(|_| bad())?,
                "steps" => cfg.steps = value.parse().map_err(|_| bad())?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad())?,
                "lambda_mse" => cfg.loss_weights.lambda_mse = value.parse().map_err(|_| bad())?,
                "lambda_adv" => cfg.loss_weights.lambda_adv = value.parse().map_err(|_| bad())?,
                "lambda_rec" => cfg.loss_weights.lambda_rec = value.parse().map_err(|_| bad())?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad())?,
                "checkpoint_every" => cfg.checkpoint_every = value.parse().map_err(|_| bad())?,
                "reweight" => cfg.reweight = value.parse().map_err(|_| bad())?,
                "weights_from" => cfg.weights_from = Some(PathBuf::from(value)),
                other => return Err(Error::Config(format!("unknown key `{other}`"))),
            }
            seen.push(key.to_string());
        }
        let all = [
            "lr",
            "lr_disc",
            "beta1",
            "beta2",
            "eps",
            "weight_decay",
            "steps",
            "batch_size",
            "lambda_mse",
            "lambda_adv",
            "lambda_rec",
            "seed",
            "checkpoint_every",
            "reweight",
        ];
        for name in all {
            if !seen.iter().any(|s| s == name) {
                return Err(Error::Config(format!("missing required key `{name}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
