//! Flat keyed experiment configuration.
//!
//! The on-disk form is `key = value` lines with `#` comments. Unknown keys
//! are hard errors and every violation is reported, not just the first.
//! Defaults reproduce the full-scale protocol; the desk preset shrinks it to
//! workstation scale.

use crate::align::{AlignConfig, AlignMethod};
use crate::density::EstimatorTag;
use crate::error::{Error, Result};
use crate::vae::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Mnist,
}

impl DatasetKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::Mnist => "mnist",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorKind {
    Standard,
    Gmm,
    Vamp,
}

impl PriorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PriorKind::Standard => "standard",
            PriorKind::Gmm => "gmm",
            PriorKind::Vamp => "vamp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "standard" => Some(PriorKind::Standard),
            "gmm" => Some(PriorKind::Gmm),
            "vamp" => Some(PriorKind::Vamp),
            _ => None,
        }
    }
}

/// One experiment cell's full configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    /// Mixture components of the synthetic generator.
    pub synth_components: usize,
    /// Ambient dimension of the synthetic data.
    pub synth_dim: usize,
    pub sigma_pad: f64,
    pub n_train: usize,
    pub n_val: usize,
    /// Directory holding the four standard IDX files (MNIST regime).
    pub mnist_dir: String,

    pub teacher: EstimatorTag,
    pub teacher_k_max: usize,
    /// 0 selects the Silverman rule.
    pub teacher_bandwidth: f64,

    pub prior: PriorKind,
    pub prior_components: usize,
    pub latent_dim: usize,
    pub hidden_activation: Activation,
    /// 0 selects the regime default: D/2 for synthetic, 300 for MNIST.
    pub hidden: usize,

    pub method: AlignMethod,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub sigma_x: f64,

    pub huber_delta: f64,
    pub detach_encoder: bool,
    pub kl_warmup_from: f64,
    pub kl_warmup_to: f64,

    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub flow_scale_bound: f64,

    pub eval_mc_coverage: usize,
    pub eval_mc_posterior: usize,

    pub seeds: Vec<u64>,
    pub out: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetKind::Synthetic,
            synth_components: 4,
            synth_dim: 50,
            sigma_pad: 0.02,
            n_train: 60_000,
            n_val: 10_000,
            mnist_dir: String::new(),
            teacher: EstimatorTag::KnnAdaptive,
            teacher_k_max: 128,
            teacher_bandwidth: 0.0,
            prior: PriorKind::Gmm,
            prior_components: 4,
            latent_dim: 2,
            hidden_activation: Activation::Tanh,
            hidden: 0,
            method: AlignMethod::None,
            lr: 1e-3,
            batch_size: 128,
            epochs: 100,
            sigma_x: 0.02,
            huber_delta: 1.0,
            detach_encoder: false,
            kl_warmup_from: 0.1,
            kl_warmup_to: 1.0,
            flow_layers: 5,
            flow_hidden: 16,
            flow_scale_bound: 2.0,
            eval_mc_coverage: 100_000,
            eval_mc_posterior: 128,
            seeds: vec![0, 1, 2],
            out: "runs".into(),
        }
    }
}

impl ExperimentConfig {
    /// Full-scale protocol (the defaults).
    pub fn paper_preset() -> Self {
        Self::default()
    }

    /// Workstation-scale preset used by the acceptance suite.
    pub fn desk_preset() -> Self {
        ExperimentConfig {
            n_train: 10_000,
            n_val: 2_000,
            epochs: 30,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk_preset()),
            "paper" => Ok(Self::paper_preset()),
            other => Err(Error::Config(vec![format!(
                "unknown preset `{other}` (expected `desk` or `paper`)"
            )])),
        }
    }

    /// Canonical textual form; parsing it back yields an identical config.
    pub fn to_text(&self) -> String {
        let seeds = self
            .seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "dataset = {}\n\
             synth_components = {}\n\
             synth_dim = {}\n\
             sigma_pad = {}\n\
             n_train = {}\n\
             n_val = {}\n\
             mnist_dir = {}\n\
             teacher = {}\n\
             teacher_k_max = {}\n\
             teacher_bandwidth = {}\n\
             prior = {}\n\
             prior_components = {}\n\
             latent_dim = {}\n\
             hidden_activation = {}\n\
             hidden = {}\n\
             method = {}\n\
             lr = {}\n\
             batch_size = {}\n\
             epochs = {}\n\
             sigma_x = {}\n\
             huber_delta = {}\n\
             detach_encoder = {}\n\
             kl_warmup_from = {}\n\
             kl_warmup_to = {}\n\
             flow_layers = {}\n\
             flow_hidden = {}\n\
             flow_scale_bound = {}\n\
             eval_mc_coverage = {}\n\
             eval_mc_posterior = {}\n\
             seeds = {}\n\
             out = {}\n",
            self.dataset.as_str(),
            self.synth_components,
            self.synth_dim,
            self.sigma_pad,
            self.n_train,
            self.n_val,
            self.mnist_dir,
            self.teacher.as_str(),
            self.teacher_k_max,
            self.teacher_bandwidth,
            self.prior.as_str(),
            self.prior_components,
            self.latent_dim,
            self.hidden_activation.as_str(),
            self.hidden,
            self.method.as_str(),
            self.lr,
            self.batch_size,
            self.epochs,
            self.sigma_x,
            self.huber_delta,
            self.detach_encoder,
            self.kl_warmup_from,
            self.kl_warmup_to,
            self.flow_layers,
            self.flow_hidden,
            self.flow_scale_bound,
            self.eval_mc_coverage,
            self.eval_mc_posterior,
            seeds,
            self.out,
        )
    }

    /// Parse `key = value` lines over the given base config. Collects every
    /// violation: unknown keys, malformed values, and semantic checks.
    pub fn parse_over(base: Self, text: &str) -> Result<Self> {
        let mut cfg = base;
        let mut errors = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                errors.push(format!("line {}: expected `key = value`, got `{line}`", lineno + 1));
                continue;
            };
            let key = key.trim();
            let value = value.trim();
            if let Err(msg) = cfg.apply(key, value) {
                errors.push(format!("line {}: {msg}", lineno + 1));
            }
        }
        cfg.validate_into(&mut errors);
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_over(Self::default(), text)
    }

    fn apply(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse::<T>().map_err(|_| format!("key `{key}`: cannot parse `{v}`"))
        }
        match key {
            "dataset" => {
                self.dataset = match value {
                    "synthetic" => DatasetKind::Synthetic,
                    "mnist" => DatasetKind::Mnist,
                    _ => return Err(format!("key `dataset`: unknown value `{value}`")),
                }
            }
            "synth_components" => self.synth_components = num(key, value)?,
            "synth_dim" => self.synth_dim = num(key, value)?,
            "sigma_pad" => self.sigma_pad = num(key, value)?,
            "n_train" => self.n_train = num(key, value)?,
            "n_val" => self.n_val = num(key, value)?,
            "mnist_dir" => self.mnist_dir = value.to_string(),
            "teacher" => {
                self.teacher = EstimatorTag::parse(value)
                    .ok_or_else(|| format!("key `teacher`: unknown value `{value}`"))?
            }
            "teacher_k_max" => self.teacher_k_max = num(key, value)?,
            "teacher_bandwidth" => self.teacher_bandwidth = num(key, value)?,
            "prior" => {
                self.prior = PriorKind::parse(value)
                    .ok_or_else(|| format!("key `prior`: unknown value `{value}`"))?
            }
            "prior_components" => self.prior_components = num(key, value)?,
            "latent_dim" => self.latent_dim = num(key, value)?,
            "hidden_activation" => {
                self.hidden_activation = Activation::parse(value)
                    .ok_or_else(|| format!("key `hidden_activation`: unknown value `{value}`"))?
            }
            "hidden" => self.hidden = num(key, value)?,
            "method" => {
                self.method = AlignMethod::parse(value)
                    .ok_or_else(|| format!("key `method`: unknown value `{value}`"))?
            }
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "sigma_x" => self.sigma_x = num(key, value)?,
            "huber_delta" => self.huber_delta = num(key, value)?,
            "detach_encoder" => self.detach_encoder = num(key, value)?,
            "kl_warmup_from" => self.kl_warmup_from = num(key, value)?,
            "kl_warmup_to" => self.kl_warmup_to = num(key, value)?,
            "flow_layers" => self.flow_layers = num(key, value)?,
            "flow_hidden" => self.flow_hidden = num(key, value)?,
            "flow_scale_bound" => self.flow_scale_bound = num(key, value)?,
            "eval_mc_coverage" => self.eval_mc_coverage = num(key, value)?,
            "eval_mc_posterior" => self.eval_mc_posterior = num(key, value)?,
            "seeds" => {
                let mut seeds = Vec::new();
                for part in value.split(',') {
                    seeds.push(
                        part.trim()
                            .parse::<u64>()
                            .map_err(|_| format!("key `seeds`: bad entry `{part}`"))?,
                    );
                }
                self.seeds = seeds;
            }
            "out" => self.out = value.to_string(),
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    fn validate_into(&self, errors: &mut Vec<String>) {
        if self.synth_components < 1 {
            errors.push("synth_components must be >= 1".into());
        }
        if self.synth_dim < 2 {
            errors.push("synth_dim must be >= 2".into());
        }
        if self.sigma_pad <= 0.0 {
            errors.push("sigma_pad must be positive".into());
        }
        if self.n_train < 2 {
            errors.push("n_train must be >= 2".into());
        }
        if self.n_val < 1 {
            errors.push("n_val must be >= 1".into());
        }
        if self.dataset == DatasetKind::Mnist && self.mnist_dir.is_empty() {
            errors.push("dataset = mnist requires mnist_dir".into());
        }
        if self.dataset == DatasetKind::Mnist && self.teacher == EstimatorTag::Oracle {
            errors.push("teacher = oracle needs a synthetic dataset with generator metadata".into());
        }
        if self.teacher == EstimatorTag::KnnAdaptive {
            if self.teacher_k_max < 4 {
                errors.push("teacher_k_max must be >= 4".into());
            }
            if self.teacher_k_max >= self.n_train {
                errors.push("teacher_k_max must be smaller than n_train".into());
            }
        }
        if self.teacher_bandwidth < 0.0 {
            errors.push("teacher_bandwidth must be >= 0 (0 = Silverman)".into());
        }
        if self.prior_components < 1 {
            errors.push("prior_components must be >= 1".into());
        }
        if self.latent_dim < 1 {
            errors.push("latent_dim must be >= 1".into());
        }
        if self.method == AlignMethod::Flow && self.latent_dim < 2 {
            errors.push("method = flow needs latent_dim >= 2".into());
        }
        if self.lr <= 0.0 {
            errors.push("lr must be positive".into());
        }
        if self.batch_size < 1 {
            errors.push("batch_size must be >= 1".into());
        }
        if self.epochs < 1 {
            errors.push("epochs must be >= 1".into());
        }
        if self.sigma_x <= 0.0 {
            errors.push("sigma_x must be positive".into());
        }
        if self.huber_delta <= 0.0 {
            errors.push("huber_delta must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.kl_warmup_from) || !(0.0..=1.0).contains(&self.kl_warmup_to) {
            errors.push("kl warm-up factors must lie in [0, 1]".into());
        }
        if self.flow_layers < 1 {
            errors.push("flow_layers must be >= 1".into());
        }
        if self.flow_hidden < 1 {
            errors.push("flow_hidden must be >= 1".into());
        }
        if self.flow_scale_bound <= 0.0 {
            errors.push("flow_scale_bound must be positive".into());
        }
        if self.eval_mc_coverage < 100 {
            errors.push("eval_mc_coverage must be >= 100".into());
        }
        if self.eval_mc_posterior < 1 {
            errors.push("eval_mc_posterior must be >= 1".into());
        }
        if self.seeds.is_empty() {
            errors.push("seeds must not be empty".into());
        }
        if self.out.is_empty() {
            errors.push("out must not be empty".into());
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        self.validate_into(&mut errors);
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn align_config(&self) -> AlignConfig {
        AlignConfig {
            method: self.method,
            delta: self.huber_delta,
            detach_encoder: self.detach_encoder,
            kl_warmup_from: self.kl_warmup_from,
            kl_warmup_to: self.kl_warmup_to,
        }
    }

    /// Hidden width resolved per regime.
    pub fn hidden_width(&self, input_dim: usize) -> usize {
        if self.hidden > 0 {
            return self.hidden;
        }
        match self.dataset {
            DatasetKind::Synthetic => (input_dim / 2).max(1),
            DatasetKind::Mnist => 300,
        }
    }

    /// The config text without its disk-location key: relocating `out` must
    /// not change what experiment a run identifies as.
    fn identity_text(&self) -> String {
        self.to_text()
            .lines()
            .filter(|l| !l.starts_with("out ="))
            .map(|l| format!("{l}\n"))
            .collect()
    }

    /// Hash identifying the config content (seed and output path excluded).
    pub fn config_hash(&self) -> String {
        crate::io::sha256_hex(self.identity_text().as_bytes())
    }

    /// Hash identifying one run cell: config plus seed.
    pub fn run_hash(&self, seed: u64) -> String {
        let mut text = self.identity_text();
        text.push_str(&format!("run_seed = {seed}\n"));
        crate::io::sha256_hex(text.as_bytes())
    }
}
