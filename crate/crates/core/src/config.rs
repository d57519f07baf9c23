//! Experiment configuration as flat `section.key = value` lines.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and
//! falls back to its default; unknown keys are errors. [`ExperimentConfig::to_text`]
//! writes every key in a fixed order, so `to_text(parse(text))` is the
//! normal form of `text`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;
use core::str::FromStr;

use crate::corpus::{SyntheticTaskSpec, TaskKind};
use crate::discriminator::DiscriminatorConfig;
use crate::generator::GeneratorConfig;
use crate::numerics::OptimizerSettings;
use crate::reward::RewardConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerChoice {
    Sgd,
    Adam,
}

impl OptimizerChoice {
    pub fn settings(self, lr: f64) -> OptimizerSettings {
        match self {
            OptimizerChoice::Sgd => OptimizerSettings::sgd(lr),
            OptimizerChoice::Adam => OptimizerSettings::adam(lr),
        }
    }

    fn name(self) -> &'static str {
        match self {
            OptimizerChoice::Sgd => "sgd",
            OptimizerChoice::Adam => "adam",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub gen_embed_dim: usize,
    pub gen_hidden_dim: usize,
    pub gen_attention_dim: usize,
    pub gen_readout_dim: usize,
    pub disc_embed_dim: usize,
    pub disc_windows: Vec<usize>,
    pub disc_kernels_per_window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let g = GeneratorConfig::new(8, 1);
        let d = DiscriminatorConfig::new(8, 1);
        Self {
            gen_embed_dim: g.embed_dim,
            gen_hidden_dim: g.hidden_dim,
            gen_attention_dim: g.attention_dim,
            gen_readout_dim: g.readout_dim,
            disc_embed_dim: d.embed_dim,
            disc_windows: d.windows,
            disc_kernels_per_window: d.kernels_per_window,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Held-out accuracy gate for discriminator pretraining.
    pub xi: f64,
    /// Negatives regenerated per adversarial round.
    pub eta: usize,
    /// Discriminator weight clip bound.
    pub clip: f64,
    pub patience: usize,
    /// Generator steps between dev evaluations.
    pub eval_interval: usize,
    pub gen_batch: usize,
    pub pg_batch: usize,
    pub disc_batch: usize,
    pub max_pretrain_steps: usize,
    pub disc_step_cap: usize,
    pub max_adversarial_steps: usize,
    pub optimizer: OptimizerChoice,
    pub gen_lr: f64,
    pub adversarial_lr: f64,
    pub disc_lr: f64,
    pub mrt_sample_size: usize,
    pub gen_seed: u64,
    pub disc_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            xi: 0.82,
            eta: 500,
            clip: 1.0,
            patience: 10,
            eval_interval: 50,
            gen_batch: 32,
            pg_batch: 8,
            disc_batch: 32,
            max_pretrain_steps: 20_000,
            disc_step_cap: 5_000,
            max_adversarial_steps: 2_000,
            optimizer: OptimizerChoice::Adam,
            gen_lr: 1e-3,
            adversarial_lr: 1e-4,
            disc_lr: 1e-3,
            mrt_sample_size: 8,
            gen_seed: 11,
            disc_seed: 13,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.xi > 0.5 && self.xi < 1.0) {
            return bad("train.xi must lie strictly between 0.5 and 1");
        }
        if self.eta == 0 {
            return bad("train.eta must be at least 1");
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return bad("train.clip must be positive");
        }
        if self.patience == 0 {
            return bad("train.patience must be at least 1");
        }
        if self.eval_interval == 0 || self.gen_batch == 0 || self.pg_batch == 0 || self.disc_batch == 0 {
            return bad("intervals and batch sizes must be positive");
        }
        for (name, lr) in [
            ("train.gen_lr", self.gen_lr),
            ("train.adversarial_lr", self.adversarial_lr),
            ("train.disc_lr", self.disc_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub output_dir: String,
    pub seed: u64,
    /// Record elapsed seconds in the metrics; off keeps them at 0 so reruns
    /// are byte-identical.
    pub wall_clock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: "runs".to_string(),
            seed: 7,
            wall_clock: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub corpus: SyntheticTaskSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub reward: RewardConfig,
    pub run: RunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let corpus = SyntheticTaskSpec::default();
        let reward = RewardConfig::new(corpus.t_max);
        Self {
            corpus,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            reward,
            run: RunConfig::default(),
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("invalid value {raw:?} for {key}")))
}

fn flag(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {raw:?} for {key}"))),
    }
}

fn list(key: &str, raw: &str) -> Result<Vec<usize>> {
    raw.split(',').map(|s| value(key, s.trim())).collect()
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, raw) = (key.trim(), raw.trim());
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("duplicate key {key}")));
            }
            seen.push(key.to_string());
            c.set(key, raw)?;
        }
        c.reward.t_max = c.corpus.t_max;
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let (c, m, t, r, u) = (&mut self.corpus, &mut self.model, &mut self.train, &mut self.reward, &mut self.run);
        match key {
            "corpus.task" => c.kind = value::<TaskKind>(key, raw).map_err(|_| Error::Config(format!("unknown task {raw:?}")))?,
            "corpus.vocab_size" => c.vocab_size = value(key, raw)?,
            "corpus.min_len" => c.min_len = value(key, raw)?,
            "corpus.max_len" => c.max_len = value(key, raw)?,
            "corpus.train_size" => c.train_size = value(key, raw)?,
            "corpus.dev_size" => c.dev_size = value(key, raw)?,
            "corpus.test_size" => c.test_size = value(key, raw)?,
            "corpus.t_max" => c.t_max = value(key, raw)?,
            "corpus.seed" => c.seed = value(key, raw)?,
            "model.gen.embed_dim" => m.gen_embed_dim = value(key, raw)?,
            "model.gen.hidden_dim" => m.gen_hidden_dim = value(key, raw)?,
            "model.gen.attention_dim" => m.gen_attention_dim = value(key, raw)?,
            "model.gen.readout_dim" => m.gen_readout_dim = value(key, raw)?,
            "model.disc.embed_dim" => m.disc_embed_dim = value(key, raw)?,
            "model.disc.windows" => m.disc_windows = list(key, raw)?,
            "model.disc.kernels_per_window" => m.disc_kernels_per_window = value(key, raw)?,
            "train.xi" => t.xi = value(key, raw)?,
            "train.eta" => t.eta = value(key, raw)?,
            "train.clip" => t.clip = value(key, raw)?,
            "train.patience" => t.patience = value(key, raw)?,
            "train.eval_interval" => t.eval_interval = value(key, raw)?,
            "train.gen_batch" => t.gen_batch = value(key, raw)?,
            "train.pg_batch" => t.pg_batch = value(key, raw)?,
            "train.disc_batch" => t.disc_batch = value(key, raw)?,
            "train.max_pretrain_steps" => t.max_pretrain_steps = value(key, raw)?,
            "train.disc_step_cap" => t.disc_step_cap = value(key, raw)?,
            "train.max_adversarial_steps" => t.max_adversarial_steps = value(key, raw)?,
            "train.optimizer" => {
                t.optimizer = match raw {
                    "sgd" => OptimizerChoice::Sgd,
                    "adam" => OptimizerChoice::Adam,
                    _ => return Err(Error::Config(format!("unknown optimizer {raw:?}"))),
                }
            }
            "train.gen_lr" => t.gen_lr = value(key, raw)?,
            "train.adversarial_lr" => t.adversarial_lr = value(key, raw)?,
            "train.disc_lr" => t.disc_lr = value(key, raw)?,
            "train.mrt_sample_size" => t.mrt_sample_size = value(key, raw)?,
            "train.gen_seed" => t.gen_seed = value(key, raw)?,
            "train.disc_seed" => t.disc_seed = value(key, raw)?,
            "reward.lambda" => r.lambda = value(key, raw)?,
            "reward.baseline" => r.baseline = value(key, raw)?,
            "reward.rollouts" => r.rollouts = value(key, raw)?,
            "reward.length_normalize" => r.length_normalize = flag(key, raw)?,
            "run.output_dir" => u.output_dir = raw.to_string(),
            "run.seed" => u.seed = value(key, raw)?,
            "run.wall_clock" => u.wall_clock = flag(key, raw)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus
            .validate()
            .map_err(|e| Error::Config(format!("corpus: {e}")))?;
        self.reward
            .validate()
            .map_err(|e| Error::Config(format!("reward: {e}")))?;
        self.train.validate()?;
        let m = &self.model;
        if [m.gen_embed_dim, m.gen_hidden_dim, m.gen_attention_dim, m.gen_readout_dim, m.disc_embed_dim, m.disc_kernels_per_window]
            .contains(&0)
        {
            return Err(Error::Config("model dimensions must be positive".to_string()));
        }
        if m.disc_windows.is_empty() || m.disc_windows.iter().any(|&l| l == 0 || l > self.corpus.t_max) {
            return Err(Error::Config("model.disc.windows must be non-empty and within 1..=t_max".to_string()));
        }
        if self.run.output_dir.is_empty() {
            return Err(Error::Config("run.output_dir must not be empty".to_string()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let (c, m, t, r, u) = (&self.corpus, &self.model, &self.train, &self.reward, &self.run);
        let mut s = String::new();
        let mut line = |k: &str, v: &dyn core::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("corpus.task", &c.kind);
        line("corpus.vocab_size", &c.vocab_size);
        line("corpus.min_len", &c.min_len);
        line("corpus.max_len", &c.max_len);
        line("corpus.train_size", &c.train_size);
        line("corpus.dev_size", &c.dev_size);
        line("corpus.test_size", &c.test_size);
        line("corpus.t_max", &c.t_max);
        line("corpus.seed", &c.seed);
        line("model.gen.embed_dim", &m.gen_embed_dim);
        line("model.gen.hidden_dim", &m.gen_hidden_dim);
        line("model.gen.attention_dim", &m.gen_attention_dim);
        line("model.gen.readout_dim", &m.gen_readout_dim);
        line("model.disc.embed_dim", &m.disc_embed_dim);
        line("model.disc.windows", &join(&m.disc_windows));
        line("model.disc.kernels_per_window", &m.disc_kernels_per_window);
        line("train.xi", &t.xi);
        line("train.eta", &t.eta);
        line("train.clip", &t.clip);
        line("train.patience", &t.patience);
        line("train.eval_interval", &t.eval_interval);
        line("train.gen_batch", &t.gen_batch);
        line("train.pg_batch", &t.pg_batch);
        line("train.disc_batch", &t.disc_batch);
        line("train.max_pretrain_steps", &t.max_pretrain_steps);
        line("train.disc_step_cap", &t.disc_step_cap);
        line("train.max_adversarial_steps", &t.max_adversarial_steps);
        line("train.optimizer", &t.optimizer.name());
        line("train.gen_lr", &t.gen_lr);
        line("train.adversarial_lr", &t.adversarial_lr);
        line("train.disc_lr", &t.disc_lr);
        line("train.mrt_sample_size", &t.mrt_sample_size);
        line("train.gen_seed", &t.gen_seed);
        line("train.disc_seed", &t.disc_seed);
        line("reward.lambda", &r.lambda);
        line("reward.baseline", &r.baseline);
        line("reward.rollouts", &r.rollouts);
        line("reward.length_normalize", &r.length_normalize);
        line("run.output_dir", &u.output_dir);
        line("run.seed", &u.seed);
        line("run.wall_clock", &u.wall_clock);
        s
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            vocab_size: self.corpus.vocab_size,
            embed_dim: self.model.gen_embed_dim,
            hidden_dim: self.model.gen_hidden_dim,
            attention_dim: self.model.gen_attention_dim,
            readout_dim: self.model.gen_readout_dim,
            t_max: self.corpus.t_max,
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        let mut d = DiscriminatorConfig::new(self.corpus.vocab_size, self.corpus.t_max);
        d.embed_dim = self.model.disc_embed_dim;
        d.windows = self.model.disc_windows.clone();
        d.kernels_per_window = self.model.disc_kernels_per_window;
        d
    }
}

/// Normal form of a config file.
pub fn normalize(text: &str) -> Result<String> {
    Ok(ExperimentConfig::parse(text)?.to_text())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c.reward.lambda, 0.7);
        assert_eq!(c.reward.rollouts, 20);
        assert_eq!(c.train.xi, 0.82);
        assert_eq!(c.train.clip, 1.0);
        assert_eq!(c.train.eta, 500);
        assert_eq!(c.train.eval_interval, 50);
        assert_eq!(c.train.disc_step_cap, 5000);
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(ExperimentConfig::parse("reward.lambda = 1.5"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("train.xi = 0.5"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("train.bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("train.eta = x"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("no equals sign"), Err(Error::Config(_))));
        assert!(ExperimentConfig::parse("train.eta = 1\ntrain.eta = 2").is_err());
    }

    #[test]
    fn normal_form_is_a_fixed_point() {
        let text = "# small\ncorpus.task = copy\nreward.lambda=0\n\ntrain.gen_lr = 0.003\nmodel.disc.windows = 1, 2\n";
        let once = normalize(text).unwrap();
        assert_eq!(normalize(&once).unwrap(), once);
        let c = ExperimentConfig::parse(&once).unwrap();
        assert_eq!(c.corpus.kind, TaskKind::Copy);
        assert_eq!(c.reward.lambda, 0.0);
        assert_eq!(c.train.gen_lr, 0.003);
        assert_eq!(c.model.disc_windows, [1, 2]);
        assert_eq!(c, ExperimentConfig::parse(text).unwrap());
    }
}
