//! Run directories and the pipeline phases that fill them.
//!
//! A run directory is created once by `gen-data` and holds the exact config
//! used (`config.txt`), the corpus, and one set of artifacts per phase.
//! Phases refuse to overwrite artifacts that already exist.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use brcsgan_core::config::ExperimentConfig;
use brcsgan_core::corpus::{generate_corpus, Corpus, SentencePair};
use brcsgan_core::discriminator::Discriminator;
use brcsgan_core::generator::Generator;
use brcsgan_core::numerics::Tensor;
use brcsgan_core::rng::RngStream;
use brcsgan_core::trainer::{
    generate_negatives, mrt_baseline, pretrain_discriminator, pretrain_generator, run_sweep, AdversarialSession, Clock,
    Pair, SweepKind, ZeroClock,
};
use brcsgan_core::{Error as CoreError, Token};
use thiserror::Error;

use crate::files::{
    load_checkpoint, load_parallel, load_vocab, replace_checkpoint, save_checkpoint, save_metrics, save_parallel,
    save_vocab, write_new,
};

pub const CONFIG_FILE: &str = "config.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const GEN_PRETRAIN: &str = "gen_pretrain.ckpt";
pub const DISC_PRETRAIN: &str = "disc_pretrain.ckpt";
pub const GAN: &str = "gan.ckpt";
pub const GAN_SESSION: &str = "gan_session.ckpt";
pub const MRT: &str = "mrt.ckpt";

/// Environment variable naming the directory new runs are created under
/// when no explicit run path is given.
pub const OUTPUT_ROOT_VAR: &str = "BRCSGAN_OUTPUT_ROOT";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{phase} has not been run: {path} is missing")]
    MissingPhase { phase: &'static str, path: PathBuf },
    #[error("run directory {0} already exists")]
    Exists(PathBuf),
    #[error("{0} is not a run directory (no {CONFIG_FILE})")]
    NotARun(PathBuf),
}

pub struct WallClock(Instant);

impl Clock for WallClock {
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

fn clock_for(cfg: &ExperimentConfig) -> Box<dyn Clock> {
    if cfg.run.wall_clock {
        Box::new(WallClock(Instant::now()))
    } else {
        Box::new(ZeroClock)
    }
}

pub fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    ExperimentConfig::parse(&text).with_context(|| format!("in config {}", path.display()))
}

pub struct RunDir {
    path: PathBuf,
    config: ExperimentConfig,
}

impl RunDir {
    /// Create a fresh run directory and record `config` in it.
    pub fn create(path: &Path, config: &ExperimentConfig) -> Result<Self> {
        if path.exists() {
            bail!(RunError::Exists(path.to_path_buf()));
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::create_dir(path).with_context(|| format!("creating {}", path.display()))?;
        write_new(&path.join(CONFIG_FILE), config.to_text().as_bytes())?;
        Ok(Self {
            path: path.to_path_buf(),
            config: config.clone(),
        })
    }

    pub fn open(path: &Path) -> Result<Self> {
        let cfg = path.join(CONFIG_FILE);
        if !cfg.is_file() {
            bail!(RunError::NotARun(path.to_path_buf()));
        }
        Ok(Self {
            path: path.to_path_buf(),
            config: read_config(&cfg)?,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn require(&self, name: &str, phase: &'static str) -> Result<PathBuf> {
        let p = self.file(name);
        if !p.is_file() {
            bail!(RunError::MissingPhase { phase, path: p });
        }
        Ok(p)
    }

    pub fn corpus(&self) -> Result<Corpus> {
        let vocab = load_vocab(&self.file(VOCAB_FILE))?;
        let t = self.config.corpus.t_max;
        Ok(Corpus {
            train: load_parallel(&self.path, "train", &vocab, t)?,
            dev: load_parallel(&self.path, "dev", &vocab, t)?,
            test: load_parallel(&self.path, "test", &vocab, t)?,
            vocab,
        })
    }

    fn generator_from(&self, name: &str, phase: &'static str) -> Result<Generator> {
        let named = load_checkpoint(&self.require(name, phase)?)?;
        let cfg = &self.config;
        let mut gen = Generator::new(cfg.generator_config(), cfg.train.gen_seed)?;
        gen.params_mut().load_named(&named)?;
        Ok(gen)
    }

    pub fn pretrained_generator(&self) -> Result<Generator> {
        self.generator_from(GEN_PRETRAIN, "pretrain-gen")
    }

    pub fn pretrained_discriminator(&self) -> Result<Discriminator> {
        let named = load_checkpoint(&self.require(DISC_PRETRAIN, "pretrain-disc")?)?;
        let cfg = &self.config;
        let mut disc = Discriminator::new(cfg.discriminator_config(), cfg.train.disc_seed)?;
        disc.params_mut().load_named(&named)?;
        disc.load_buffers(&named)?;
        Ok(disc)
    }

    /// Generator weights by phase name (`pretrain`, `gan`, `mrt`) or path.
    pub fn generator(&self, model: &str) -> Result<Generator> {
        match model {
            "pretrain" => self.pretrained_generator(),
            "gan" => self.generator_from(GAN, "train-gan"),
            "mrt" => self.generator_from(MRT, "train-mrt"),
            path => {
                let named = load_checkpoint(Path::new(path))?;
                let mut gen = Generator::new(self.config.generator_config(), self.config.train.gen_seed)?;
                gen.params_mut().load_named(&named)?;
                Ok(gen)
            }
        }
    }
}

/// Directory a new run goes to when none is given.
pub fn default_run_path(cfg: &ExperimentConfig) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(&cfg.run.output_dir));
    root.join(format!("{}-seed{}", cfg.corpus.kind, cfg.run.seed))
}

fn with_meta(mut named: Vec<(String, Tensor)>, best_dev_bleu: f64, best_step: usize) -> Vec<(String, Tensor)> {
    named.push(("meta/best_dev_bleu".into(), Tensor::scalar(best_dev_bleu)));
    named.push(("meta/best_step".into(), Tensor::scalar(best_step as f64)));
    named
}

/// Dev BLEU recorded in a generator checkpoint.
pub fn recorded_dev_bleu(named: &[(String, Tensor)]) -> Option<f64> {
    named
        .iter()
        .find(|(n, _)| n == "meta/best_dev_bleu")
        .map(|(_, t)| t.data()[0])
}

pub fn gen_data(config: &ExperimentConfig, path: &Path) -> Result<RunDir> {
    let corpus = generate_corpus(&config.corpus)?;
    let run = RunDir::create(path, config)?;
    save_vocab(&run.file(VOCAB_FILE), &corpus.vocab)?;
    for (split, pairs) in [("train", &corpus.train), ("dev", &corpus.dev), ("test", &corpus.test)] {
        save_parallel(run.path(), split, pairs, &corpus.vocab)?;
    }
    Ok(run)
}

pub fn pretrain_gen(run: &RunDir) -> Result<f64> {
    let cfg = run.config();
    let corpus = run.corpus()?;
    let mut gen = Generator::new(cfg.generator_config(), cfg.train.gen_seed)?;
    let clock = clock_for(cfg);
    let out = pretrain_generator(&mut gen, &corpus.train, &corpus.dev, &cfg.train, clock.as_ref())?;
    save_metrics(&run.file("gen_pretrain_metrics.csv"), &out.metrics)?;
    save_checkpoint(
        &run.file(GEN_PRETRAIN),
        &with_meta(out.best_params, out.state.best_dev_bleu, out.state.best_step),
    )?;
    Ok(out.state.best_dev_bleu)
}

/// Real and machine pools for discriminator pretraining: `eta` training
/// pairs and `eta` greedy decodes of training sources.
pub fn disc_pools(run: &RunDir, gen: &Generator, train: &[SentencePair]) -> Result<(Vec<Pair>, Vec<Pair>)> {
    let cfg = run.config();
    let mut rng = RngStream::derive(cfg.run.seed, &[0xd0015]);
    let mut real: Vec<Pair> = train.iter().map(|p| (p.source.clone(), p.target.clone())).collect();
    rng.shuffle(&mut real);
    real.truncate(cfg.train.eta);
    let sources: Vec<&[Token]> = train.iter().map(|p| p.source.as_slice()).collect();
    let fake = generate_negatives(gen, &sources, cfg.train.eta, cfg.corpus.t_max, &mut rng)?;
    Ok((real, fake))
}

pub fn pretrain_disc(run: &RunDir) -> Result<f64> {
    let cfg = run.config();
    let gen = run.pretrained_generator()?;
    let corpus = run.corpus()?;
    let (real, fake) = disc_pools(run, &gen, &corpus.train)?;
    let mut disc = Discriminator::new(cfg.discriminator_config(), cfg.train.disc_seed)?;
    let clock = clock_for(cfg);
    let out = pretrain_discriminator(&mut disc, &real, &fake, cfg.train.xi, &cfg.train, clock.as_ref())?;
    save_metrics(&run.file("disc_pretrain_metrics.csv"), &out.metrics)?;
    let mut named = disc.params().named_values();
    named.extend(disc.buffers());
    save_checkpoint(&run.file(DISC_PRETRAIN), &named)?;
    Ok(out.accuracy)
}

pub fn train_gan(run: &RunDir) -> Result<f64> {
    let cfg = run.config();
    let gen = run.pretrained_generator()?;
    let disc = run.pretrained_discriminator()?;
    let corpus = run.corpus()?;
    let clock = clock_for(cfg);
    let mut session = AdversarialSession::new(gen, disc, cfg.reward, cfg.train.clone(), cfg.run.seed)?;
    let result = session.run(&corpus.train, &corpus.dev, clock.as_ref());
    if let Err(e) = result {
        replace_checkpoint(&run.file("gan_failure.ckpt"), &session.snapshot())?;
        fs::write(run.file("gan_failure_metrics.csv"), crate::files::metrics_csv(&session.metrics)?)?;
        return Err(anyhow::Error::new(e).context("adversarial training aborted; state dumped to gan_failure.ckpt"));
    }
    save_metrics(&run.file("gan_metrics.csv"), &session.metrics)?;
    save_checkpoint(&run.file(GAN_SESSION), &session.snapshot())?;
    save_checkpoint(
        &run.file(GAN),
        &with_meta(session.best_params.clone(), session.state.best_dev_bleu, session.state.best_step),
    )?;
    Ok(session.state.best_dev_bleu)
}

pub fn train_mrt(run: &RunDir) -> Result<f64> {
    let cfg = run.config();
    let mut gen = run.pretrained_generator()?;
    let corpus = run.corpus()?;
    let clock = clock_for(cfg);
    let out = mrt_baseline(
        &mut gen,
        &corpus.train,
        &corpus.dev,
        &cfg.train,
        cfg.corpus.t_max,
        cfg.run.seed,
        clock.as_ref(),
    )?;
    save_metrics(&run.file("mrt_metrics.csv"), &out.metrics)?;
    save_checkpoint(
        &run.file(MRT),
        &with_meta(out.best_params, out.state.best_dev_bleu, out.state.best_step),
    )?;
    Ok(out.state.best_dev_bleu)
}

pub fn sweep_dir_name(kind: SweepKind) -> &'static str {
    match kind {
        SweepKind::Xi => "sweep_xi",
        SweepKind::Rollouts => "sweep_n",
    }
}

/// Run a sweep into `sweep_xi/` or `sweep_n/`: one metrics CSV per grid
/// value plus `summary.csv`.
pub fn sweep(run: &RunDir, kind: SweepKind, grid: Option<Vec<f64>>) -> Result<PathBuf> {
    let cfg = run.config();
    let grid = grid.unwrap_or_else(|| kind.default_grid());
    let gen = run.pretrained_generator()?;
    let disc = match kind {
        SweepKind::Rollouts => Some(run.pretrained_discriminator()?),
        SweepKind::Xi => None,
    };
    let corpus = run.corpus()?;
    let (real, fake) = match kind {
        SweepKind::Xi => disc_pools(run, &gen, &corpus.train)?,
        SweepKind::Rollouts => (Vec::new(), Vec::new()),
    };
    let dir = run.file(sweep_dir_name(kind));
    if dir.exists() {
        bail!(RunError::Exists(dir));
    }
    let clock = clock_for(cfg);
    let points = run_sweep(
        kind,
        &grid,
        cfg,
        &gen.params().named_values(),
        disc.as_ref(),
        &real,
        &fake,
        &corpus.train,
        &corpus.dev,
        clock.as_ref(),
    )?;
    fs::create_dir(&dir)?;
    let mut summary = csv::Writer::from_writer(Vec::new());
    summary.write_record(["value", "gate_accuracy", "gate_reached", "best_dev_bleu"])?;
    for p in &points {
        save_metrics(&dir.join(format!("point_{}.csv", p.value)), &p.metrics)?;
        summary.write_record([
            p.value.to_string(),
            p.gate_accuracy.map(|a| a.to_string()).unwrap_or_default(),
            p.gate_reached.to_string(),
            p.best_dev_bleu.to_string(),
        ])?;
    }
    write_new(&dir.join("summary.csv"), &summary.into_inner()?)?;
    Ok(dir)
}

/// Translate one source line per input line.
pub fn decode(run: &RunDir, model: &str, input: &Path, beam: usize) -> Result<String> {
    let gen = run.generator(model)?;
    let vocab = load_vocab(&run.file(VOCAB_FILE))?;
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let t_max = run.config().corpus.t_max;
    let mut out = String::new();
    for line in text.lines() {
        let src = vocab.encode(line);
        if src.is_empty() {
            return Err(CoreError::Empty("source line").into());
        }
        let hyp = if beam <= 1 {
            gen.greedy_decode_all(&[&src], t_max)?.remove(0)
        } else {
            gen.beam_search(&src, beam, None, t_max)?
        };
        out.push_str(&vocab.decode(&hyp));
        out.push('\n');
    }
    Ok(out)
}

/// Corpus BLEU of whitespace-tokenized, line-aligned files.
pub fn evaluate(hyp: &Path, reference: &Path) -> Result<f64> {
    let h = fs::read_to_string(hyp).with_context(|| format!("reading {}", hyp.display()))?;
    let r = fs::read_to_string(reference).with_context(|| format!("reading {}", reference.display()))?;
    let mut words: Vec<&str> = h.split_whitespace().chain(r.split_whitespace()).collect();
    words.sort_unstable();
    words.dedup();
    // Decodes may contain reserved names such as `<unk>`; those map to their fixed ids.
    let reserved = brcsgan_core::corpus::Vocab::from_tokens(Vec::<&str>::new())?;
    words.retain(|w| reserved.id(w).is_none());
    let vocab = brcsgan_core::corpus::Vocab::from_tokens(words.iter().copied())?;
    let enc = |t: &str| t.lines().map(|l| vocab.encode(l)).collect::<Vec<_>>();
    Ok(brcsgan_core::bleu::corpus_bleu(&enc(&h), &enc(&r))?.value)
}
