//! Run configuration and its flat `dotted.key = value` text form.
//!
//! ```text
//! # comments and blank lines are ignored
//! profile = desk
//! model.d = 64
//! kpe.alpha = 0.7
//! tpa.gamma = 0.2
//! schedule.beta_max = 0.8
//! ```
//!
//! `profile` selects the base values (`desk` or `full`) and is applied
//! before any other key, wherever it appears. Unknown keys are rejected.

use std::fmt;
use std::str::FromStr;

use crate::error::{config, Error, Result};

/// Normalization applied to TSPS scores and [CLS] attention before mixing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    MinMax,
    Softmax,
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::MinMax => "minmax",
            NormKind::Softmax => "softmax",
        })
    }
}

impl FromStr for NormKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax" => Ok(NormKind::MinMax),
            "softmax" => Ok(NormKind::Softmax),
            other => Err(config(format!("unknown normalization '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Full,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Full => "full",
        })
    }
}

/// Architecture and summarization hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// ViT depth N.
    pub vit_layers: usize,
    pub text_layers: usize,
    pub pad_layers: usize,
    pub fusion_layers: usize,
    pub decoder_layers: usize,
    /// Maximum caption length m, excluding [CLS].
    pub max_text_len: usize,
    pub vocab_size: usize,
    pub tsps_hidden: usize,
    pub init_std: f64,
    pub kpe_enabled: bool,
    /// KPE sits after ViT layer k (1-based).
    pub k: usize,
    pub alpha: f64,
    pub fusion_token: bool,
    pub norm: NormKind,
    pub tpa_enabled: bool,
    pub gamma: f64,
    pub beta_max: f64,
    pub itc_temperature: f64,
    pub seed: u64,
}

/// Optimizer, β schedule and training-loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_d: usize,
    pub batch_o: usize,
    pub checkpoint_every: usize,
    pub eval_samples: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub warmup_iters: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip: f64,
    pub beta_warmup_steps: usize,
    pub ema_threshold: f64,
    pub ema_decay: f64,
    pub mlm_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub profile: Profile,
    pub run: RunConfig,
    pub train: TrainConfig,
    pub bench_iters: usize,
    pub bench_warmup: usize,
    pub bench_batch: usize,
}

impl RunConfig {
    /// Toy dimensions that train in seconds on one core.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            d: 64,
            heads: 4,
            ffn_mult: 4,
            vit_layers: 4,
            text_layers: 3,
            pad_layers: 2,
            fusion_layers: 2,
            decoder_layers: 2,
            max_text_len: 12,
            vocab_size: crate::synth::Vocab::standard().len(),
            tsps_hidden: 64,
            init_std: 0.02,
            kpe_enabled: true,
            k: 2,
            alpha: 0.7,
            fusion_token: true,
            norm: NormKind::MinMax,
            tpa_enabled: true,
            gamma: 0.2,
            beta_max: 0.8,
            itc_temperature: 0.07,
            seed: 0,
        }
    }

    /// ViT-B/16 backbone with BERT-base text stacks, used for FLOPs accounting.
    pub fn full() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            d: 768,
            heads: 12,
            vit_layers: 12,
            text_layers: 10,
            pad_layers: 2,
            fusion_layers: 3,
            decoder_layers: 12,
            max_text_len: 40,
            vocab_size: 30522,
            tsps_hidden: 768,
            k: 6,
            ..Self::desk()
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch count n.
    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// u = ⌊n·α⌋ when KPE is active, n otherwise.
    pub fn kept_patches(&self) -> usize {
        if self.kpe_enabled {
            keep_count(self.num_patches(), self.alpha)
        } else {
            self.num_patches()
        }
    }

    /// s = ⌊γ·u⌋ when TPA is active.
    pub fn seed_patches(&self) -> usize {
        if self.tpa_enabled {
            keep_count(self.kept_patches(), self.gamma)
        } else {
            self.kept_patches()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.image_size", self.image_size),
            ("model.patch_size", self.patch_size),
            ("model.channels", self.channels),
            ("model.d", self.d),
            ("model.heads", self.heads),
            ("model.ffn_mult", self.ffn_mult),
            ("model.vit_layers", self.vit_layers),
            ("model.text_layers", self.text_layers),
            ("model.fusion_layers", self.fusion_layers),
            ("model.decoder_layers", self.decoder_layers),
            ("model.max_text_len", self.max_text_len),
            ("model.vocab_size", self.vocab_size),
            ("model.tsps_hidden", self.tsps_hidden),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(config(format!("{key} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(config(format!("image size {} is not divisible by patch size {}", self.image_size, self.patch_size)));
        }
        if self.d % self.heads != 0 {
            return Err(config(format!("model.d={} is not divisible by model.heads={}", self.d, self.heads)));
        }
        if self.k < 1 || self.k >= self.vit_layers {
            return Err(config(format!("kpe.k={} must satisfy 1 <= k < model.vit_layers={}", self.k, self.vit_layers)));
        }
        for (key, r) in [("kpe.alpha", self.alpha), ("tpa.gamma", self.gamma)] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(config(format!("{key}={r} must lie in (0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.beta_max) {
            return Err(config(format!("schedule.beta_max={} must lie in [0, 1]", self.beta_max)));
        }
        if !(self.itc_temperature > 0.0) {
            return Err(config("itc.temperature must be positive"));
        }
        if self.kept_patches() == 0 {
            return Err(config(format!("kpe.alpha={} keeps no patch out of {}", self.alpha, self.num_patches())));
        }
        if self.tpa_enabled && self.seed_patches() == 0 {
            return Err(config(format!(
                "tpa.gamma={} keeps no seed out of {} retained patches",
                self.gamma,
                self.kept_patches()
            )));
        }
        Ok(())
    }
}

/// ⌊count·ratio⌋, robust to ratios such as 0.29 whose product lands a hair
/// below an integer in binary floating point.
pub fn keep_count(count: usize, ratio: f64) -> usize {
    ((count as f64) * ratio + 1e-9).floor() as usize
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            steps: 200,
            batch_d: 8,
            batch_o: 8,
            checkpoint_every: 0,
            eval_samples: 200,
            lr: 2e-3,
            lr_min: 1e-5,
            warmup_iters: 20,
            weight_decay: 0.02,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip: 1.0,
            beta_warmup_steps: 100,
            ema_threshold: 0.45 * std::f64::consts::LN_2,
            ema_decay: 0.99,
            mlm_rate: 0.15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(self.lr_min >= 0.0) {
            return Err(config("optim.lr and optim.lr_min must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(config("schedule.ema_decay must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.mlm_rate) {
            return Err(config("mlm.rate must lie in [0, 1]"));
        }
        if !(self.clip > 0.0) {
            return Err(config("optim.clip must be positive"));
        }
        Ok(())
    }
}

impl Default for Settings {
    fn default() -> Self {
        Self::for_profile(Profile::Desk)
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| config(format!("invalid value '{value}' for key '{key}'")))
}

impl Settings {
    pub fn for_profile(profile: Profile) -> Self {
        let run = match profile {
            Profile::Desk => RunConfig::desk(),
            Profile::Full => RunConfig::full(),
        };
        Self { profile, run, train: TrainConfig::desk(), bench_iters: 30, bench_warmup: 5, bench_batch: 1 }
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (r, t) = (&mut self.run, &mut self.train);
        match key {
            "profile" => {
                let profile = match value {
                    "desk" => Profile::Desk,
                    "full" => Profile::Full,
                    other => return Err(config(format!("unknown profile '{other}'"))),
                };
                if profile != self.profile {
                    let seed = self.run.seed;
                    *self = Self::for_profile(profile);
                    self.run.seed = seed;
                }
            }
            "model.image_size" => r.image_size = parse(key, value)?,
            "model.patch_size" => r.patch_size = parse(key, value)?,
            "model.channels" => r.channels = parse(key, value)?,
            "model.d" => r.d = parse(key, value)?,
            "model.heads" => r.heads = parse(key, value)?,
            "model.ffn_mult" => r.ffn_mult = parse(key, value)?,
            "model.vit_layers" => r.vit_layers = parse(key, value)?,
            "model.text_layers" => r.text_layers = parse(key, value)?,
            "model.pad_layers" => r.pad_layers = parse(key, value)?,
            "model.fusion_layers" => r.fusion_layers = parse(key, value)?,
            "model.decoder_layers" => r.decoder_layers = parse(key, value)?,
            "model.max_text_len" => r.max_text_len = parse(key, value)?,
            "model.vocab_size" => r.vocab_size = parse(key, value)?,
            "model.tsps_hidden" => r.tsps_hidden = parse(key, value)?,
            "model.init_std" => r.init_std = parse(key, value)?,
            "kpe.enabled" => r.kpe_enabled = parse(key, value)?,
            "kpe.k" => r.k = parse(key, value)?,
            "kpe.alpha" => r.alpha = parse(key, value)?,
            "kpe.fusion_token" => r.fusion_token = parse(key, value)?,
            "kpe.norm" => r.norm = value.parse()?,
            "tpa.enabled" => r.tpa_enabled = parse(key, value)?,
            "tpa.gamma" => r.gamma = parse(key, value)?,
            "schedule.beta_max" => r.beta_max = parse(key, value)?,
            "itc.temperature" => r.itc_temperature = parse(key, value)?,
            "run.seed" => r.seed = parse(key, value)?,
            "schedule.beta_warmup_steps" => t.beta_warmup_steps = parse(key, value)?,
            "schedule.ema_threshold" => t.ema_threshold = parse(key, value)?,
            "schedule.ema_decay" => t.ema_decay = parse(key, value)?,
            "optim.lr" => t.lr = parse(key, value)?,
            "optim.lr_min" => t.lr_min = parse(key, value)?,
            "optim.warmup_iters" => t.warmup_iters = parse(key, value)?,
            "optim.weight_decay" => t.weight_decay = parse(key, value)?,
            "optim.beta1" => t.adam_beta1 = parse(key, value)?,
            "optim.beta2" => t.adam_beta2 = parse(key, value)?,
            "optim.eps" => t.adam_eps = parse(key, value)?,
            "optim.clip" => t.clip = parse(key, value)?,
            "train.steps" => t.steps = parse(key, value)?,
            "train.batch_d" => t.batch_d = parse(key, value)?,
            "train.batch_o" => t.batch_o = parse(key, value)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "train.eval_samples" => t.eval_samples = parse(key, value)?,
            "mlm.rate" => t.mlm_rate = parse(key, value)?,
            "bench.iters" => self.bench_iters = parse(key, value)?,
            "bench.warmup" => self.bench_warmup = parse(key, value)?,
            "bench.batch" => self.bench_batch = parse(key, value)?,
            other => return Err(config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (r, t) = (&self.run, &self.train);
        vec![
            ("profile", self.profile.to_string()),
            ("run.seed", r.seed.to_string()),
            ("model.image_size", r.image_size.to_string()),
            ("model.patch_size", r.patch_size.to_string()),
            ("model.channels", r.channels.to_string()),
            ("model.d", r.d.to_string()),
            ("model.heads", r.heads.to_string()),
            ("model.ffn_mult", r.ffn_mult.to_string()),
            ("model.vit_layers", r.vit_layers.to_string()),
            ("model.text_layers", r.text_layers.to_string()),
            ("model.pad_layers", r.pad_layers.to_string()),
            ("model.fusion_layers", r.fusion_layers.to_string()),
            ("model.decoder_layers", r.decoder_layers.to_string()),
            ("model.max_text_len", r.max_text_len.to_string()),
            ("model.vocab_size", r.vocab_size.to_string()),
            ("model.tsps_hidden", r.tsps_hidden.to_string()),
            ("model.init_std", r.init_std.to_string()),
            ("kpe.enabled", r.kpe_enabled.to_string()),
            ("kpe.k", r.k.to_string()),
            ("kpe.alpha", r.alpha.to_string()),
            ("kpe.fusion_token", r.fusion_token.to_string()),
            ("kpe.norm", r.norm.to_string()),
            ("tpa.enabled", r.tpa_enabled.to_string()),
            ("tpa.gamma", r.gamma.to_string()),
            ("schedule.beta_max", r.beta_max.to_string()),
            ("schedule.beta_warmup_steps", t.beta_warmup_steps.to_string()),
            ("schedule.ema_threshold", t.ema_threshold.to_string()),
            ("schedule.ema_decay", t.ema_decay.to_string()),
            ("itc.temperature", r.itc_temperature.to_string()),
            ("mlm.rate", t.mlm_rate.to_string()),
            ("optim.lr", t.lr.to_string()),
            ("optim.lr_min", t.lr_min.to_string()),
            ("optim.warmup_iters", t.warmup_iters.to_string()),
            ("optim.weight_decay", t.weight_decay.to_string()),
            ("optim.beta1", t.adam_beta1.to_string()),
            ("optim.beta2", t.adam_beta2.to_string()),
            ("optim.eps", t.adam_eps.to_string()),
            ("optim.clip", t.clip.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.batch_d", t.batch_d.to_string()),
            ("train.batch_o", t.batch_o.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.eval_samples", t.eval_samples.to_string()),
            ("bench.iters", self.bench_iters.to_string()),
            ("bench.warmup", self.bench_warmup.to_string()),
            ("bench.batch", self.bench_batch.to_string()),
        ]
    }

    /// Parses config text on top of the desk defaults.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| config(format!("line {}: expected key=value, got '{line}'", lineno + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut s = Self::default();
        s.apply(&pairs)?;
        Ok(s)
    }

    /// Applies overrides, handling `profile` first.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs.iter().filter(|(k, _)| k == "profile") {
            self.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "profile") {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        self.train.validate()?;
        if self.bench_iters == 0 || self.bench_batch == 0 {
            return Err(config("bench.iters and bench.batch must be positive"));
        }
        Ok(())
    }
}
