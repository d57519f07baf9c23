//! Training pipeline: generator pretraining, negative generation,
//! gated discriminator pretraining, the adversarial loop, the MRT baseline
//! and parameter sweeps.
//!
//! Nothing here touches the file system. Runs return metrics rows and named
//! tensors; the std crate persists them. Randomness for adversarial
//! iteration `s` is derived from `(seed, s)`, so a run restored from a
//! [`AdversarialSession::snapshot`] continues exactly as the original.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::bleu::{corpus_bleu, sentence_bleu};
use crate::config::{ExperimentConfig, TrainConfig};
use crate::corpus::SentencePair;
use crate::discriminator::Discriminator;
use crate::generator::{Generator, Policy, SampleMode, WeightedSequence};
use crate::numerics::{Optimizer, Tensor};
use crate::reward::{policy_gradient_step, teacher_forcing_step, RewardConfig};
use crate::rng::RngStream;
use crate::{Error, Result, Token};

/// Owned `(source, target)` pair.
pub type Pair = (Vec<Token>, Vec<Token>);

const TAG_PRETRAIN: u64 = 0x9e1;
const TAG_DISC: u64 = 0xd15c;
const TAG_ADV: u64 = 0xadf;
const TAG_MRT: u64 = 0x3717;

/// Elapsed seconds since the run began.
pub trait Clock {
    fn seconds(&self) -> f64;
}

/// Always 0, for byte-identical reruns.
pub struct ZeroClock;

impl Clock for ZeroClock {
    fn seconds(&self) -> f64 {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    GenPretrain,
    DiscPretrain,
    Adversarial,
    Mrt,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::GenPretrain => "gen-pretrain",
            Phase::DiscPretrain => "disc-pretrain",
            Phase::Adversarial => "adversarial",
            Phase::Mrt => "mrt",
        })
    }
}

/// One metrics CSV row. Absent measurements are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub phase: Phase,
    pub mean_reward: Option<f64>,
    pub reward_variance: Option<f64>,
    pub disc_accuracy: Option<f64>,
    pub dev_bleu: Option<f64>,
    pub wall_seconds: f64,
}

impl MetricsRow {
    fn new(step: usize, phase: Phase, clock: &dyn Clock) -> Self {
        Self {
            step,
            phase,
            mean_reward: None,
            reward_variance: None,
            disc_accuracy: None,
            dev_bleu: None,
            wall_seconds: clock.seconds(),
        }
    }
}

/// Early-stopping bookkeeping. The first evaluation sets the best score;
/// patience counts later evaluations that fail to beat it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub phase: Phase,
    pub step: usize,
    pub best_dev_bleu: f64,
    pub best_step: usize,
    pub evals_since_improvement: usize,
    pub evaluations: usize,
}

impl TrainState {
    pub fn new(phase: Phase) -> Self {
        Self {
            phase,
            step: 0,
            best_dev_bleu: f64::NEG_INFINITY,
            best_step: 0,
            evals_since_improvement: 0,
            evaluations: 0,
        }
    }

    /// Record a dev score; true when it is a new best.
    pub fn record(&mut self, step: usize, bleu: f64) -> bool {
        self.evaluations += 1;
        if bleu > self.best_dev_bleu {
            self.best_dev_bleu = bleu;
            self.best_step = step;
            self.evals_since_improvement = 0;
            true
        } else {
            self.evals_since_improvement += 1;
            false
        }
    }

    pub fn exhausted(&self, patience: usize) -> bool {
        self.evals_since_improvement >= patience
    }
}

fn sentence_refs(pairs: &[SentencePair]) -> Vec<(&[Token], &[Token])> {
    pairs.iter().map(|p| (p.source.as_slice(), p.target.as_slice())).collect()
}

/// Distinct indices below `n`, `k` of them (all of them, shuffled, when
/// `k >= n`).
fn draw_indices(n: usize, k: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let k = k.min(n);
    for i in 0..k {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Greedy dev decodes and their corpus BLEU.
pub fn evaluate_dev(gen: &Generator, dev: &[SentencePair], t_max: usize) -> Result<(f64, Vec<Vec<Token>>)> {
    if dev.is_empty() {
        return Err(Error::Empty("dev set"));
    }
    let sources: Vec<&[Token]> = dev.iter().map(|p| p.source.as_slice()).collect();
    let hyps = gen.greedy_decode_all(&sources, t_max)?;
    let refs: Vec<&[Token]> = dev.iter().map(|p| p.target.as_slice()).collect();
    Ok((corpus_bleu(&hyps, &refs)?.value, hyps))
}

/// Accuracy of `disc` on dev references against the generator's dev
/// decodes.
fn dev_disc_accuracy(disc: &Discriminator, dev: &[SentencePair], hyps: &[Vec<Token>]) -> Result<f64> {
    let mut pairs = sentence_refs(dev);
    pairs.extend(dev.iter().zip(hyps).map(|(p, h)| (p.source.as_slice(), h.as_slice())));
    let mut labels = vec![true; dev.len()];
    labels.extend(vec![false; hyps.len()]);
    disc.accuracy(&pairs, &labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutcome {
    pub best_params: Vec<(String, Tensor)>,
    pub state: TrainState,
    pub metrics: Vec<MetricsRow>,
}

/// MLE pretraining with dev evaluation every `eval_interval` steps
/// (and before the first step). Leaves the best parameters loaded.
pub fn pretrain_generator(
    gen: &mut Generator,
    train: &[SentencePair],
    dev: &[SentencePair],
    cfg: &TrainConfig,
    clock: &dyn Clock,
) -> Result<PretrainOutcome> {
    if dev.is_empty() {
        return Err(Error::Empty("dev set"));
    }
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let t_max = gen.config().t_max;
    let mut opt = Optimizer::new(cfg.optimizer.settings(cfg.gen_lr));
    let mut state = TrainState::new(Phase::GenPretrain);
    let mut metrics = Vec::new();
    let mut best = gen.params().named_values();
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    loop {
        if state.step % cfg.eval_interval == 0 {
            let (bleu, _) = evaluate_dev(gen, dev, t_max)?;
            if state.record(state.step, bleu) {
                best = gen.params().named_values();
            }
            let mut row = MetricsRow::new(state.step, Phase::GenPretrain, clock);
            row.dev_bleu = Some(bleu);
            metrics.push(row);
            if state.exhausted(cfg.patience) {
                break;
            }
        }
        if state.step >= cfg.max_pretrain_steps {
            break;
        }
        if order.len() < cfg.gen_batch {
            let mut rng = RngStream::derive(cfg.gen_seed, &[TAG_PRETRAIN, epoch]);
            let mut fresh: Vec<usize> = (0..train.len()).collect();
            rng.shuffle(&mut fresh);
            fresh.extend(order.drain(..));
            order = fresh;
            epoch += 1;
        }
        let at = order.len() - cfg.gen_batch.min(order.len());
        let batch: Vec<(&[Token], &[Token])> = order
            .drain(at..)
            .map(|i| (train[i].source.as_slice(), train[i].target.as_slice()))
            .collect();
        gen.mle_step(&batch, &mut opt)?;
        state.step += 1;
    }
    gen.params_mut().load_named(&best)?;
    Ok(PretrainOutcome {
        best_params: best,
        state,
        metrics,
    })
}

/// `eta` pairs of a source and its greedy decode. Sources are taken without
/// replacement, reshuffling after each full pass.
pub fn generate_negatives(
    gen: &Generator,
    sources: &[&[Token]],
    eta: usize,
    t_max: usize,
    rng: &mut RngStream,
) -> Result<Vec<Pair>> {
    if sources.is_empty() {
        return Err(Error::Empty("negative sources"));
    }
    let mut picked = Vec::with_capacity(eta);
    while picked.len() < eta {
        let mut order: Vec<usize> = (0..sources.len()).collect();
        rng.shuffle(&mut order);
        picked.extend(order.into_iter().take(eta - picked.len()));
    }
    let chosen: Vec<&[Token]> = picked.iter().map(|&i| sources[i]).collect();
    let decodes = gen.greedy_decode_all(&chosen, t_max)?;
    Ok(chosen.into_iter().map(|s| s.to_vec()).zip(decodes).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscPretrainOutcome {
    pub accuracy: f64,
    pub steps: usize,
    pub metrics: Vec<MetricsRow>,
}

/// Balanced held-out accuracy set: the last fifth of each shuffled pool,
/// truncated to the smaller of the two.
pub fn held_out_split(real: &[Pair], fake: &[Pair], seed: u64) -> (Vec<Pair>, Vec<Pair>, Vec<(Pair, bool)>) {
    let split = |pool: &[Pair], tag: u64| {
        let mut p = pool.to_vec();
        RngStream::derive(seed, &[TAG_DISC, tag]).shuffle(&mut p);
        let held = p.split_off(p.len() - p.len() / 5);
        (p, held)
    };
    let (real_train, mut real_held) = split(real, 0);
    let (fake_train, mut fake_held) = split(fake, 1);
    let n = real_held.len().min(fake_held.len());
    real_held.truncate(n);
    fake_held.truncate(n);
    let held = real_held
        .into_iter()
        .map(|p| (p, true))
        .chain(fake_held.into_iter().map(|p| (p, false)))
        .collect();
    (real_train, fake_train, held)
}

/// Train `disc` on balanced batches until held-out accuracy reaches `gate`,
/// checking every `eval_interval` steps. Fails with
/// [`Error::GateNotReached`] at the step cap.
pub fn pretrain_discriminator(
    disc: &mut Discriminator,
    real: &[Pair],
    fake: &[Pair],
    gate: f64,
    cfg: &TrainConfig,
    clock: &dyn Clock,
) -> Result<DiscPretrainOutcome> {
    if real.len() < 5 || fake.len() < 5 {
        return Err(Error::Empty("real or fake pool (at least 5 pairs each)"));
    }
    let (real_train, fake_train, held) = held_out_split(real, fake, cfg.disc_seed);
    let held_pairs: Vec<(&[Token], &[Token])> = held.iter().map(|(p, _)| (p.0.as_slice(), p.1.as_slice())).collect();
    let labels: Vec<bool> = held.iter().map(|h| h.1).collect();
    let mut opt = Optimizer::new(cfg.optimizer.settings(cfg.disc_lr));
    let half = (cfg.disc_batch / 2).max(1);
    let mut metrics = Vec::new();
    let mut step = 0usize;
    loop {
        if step % cfg.eval_interval == 0 || step == cfg.disc_step_cap {
            let accuracy = disc.accuracy(&held_pairs, &labels)?;
            let mut row = MetricsRow::new(step, Phase::DiscPretrain, clock);
            row.disc_accuracy = Some(accuracy);
            metrics.push(row);
            if accuracy >= gate {
                return Ok(DiscPretrainOutcome { accuracy, steps: step, metrics });
            }
            if step >= cfg.disc_step_cap {
                return Err(Error::GateNotReached { accuracy, gate, steps: step });
            }
        }
        let mut rng = RngStream::derive(cfg.disc_seed, &[TAG_DISC, 2, step as u64]);
        let r: Vec<(&[Token], &[Token])> = draw_indices(real_train.len(), half, &mut rng)
            .into_iter()
            .map(|i| (real_train[i].0.as_slice(), real_train[i].1.as_slice()))
            .collect();
        let f: Vec<(&[Token], &[Token])> = draw_indices(fake_train.len(), half, &mut rng)
            .into_iter()
            .map(|i| (fake_train[i].0.as_slice(), fake_train[i].1.as_slice()))
            .collect();
        disc.disc_step(&r, &f, &mut opt, cfg.clip)?;
        step += 1;
    }
}

/// Update counts of one adversarial run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScheduleCounts {
    pub policy_steps: usize,
    pub teacher_steps: usize,
    pub disc_steps: usize,
}

fn optimizer_tensors(prefix: &str, opt: &Optimizer, out: &mut Vec<(String, Tensor)>) {
    let (step, m, v) = opt.state();
    out.push((format!("{prefix}.step"), Tensor::scalar(step as f64)));
    out.push((format!("{prefix}.moments"), Tensor::scalar(m.len() as f64)));
    for (i, (m, v)) in m.iter().zip(v).enumerate() {
        out.push((format!("{prefix}.m{i}"), m.clone()));
        out.push((format!("{prefix}.v{i}"), v.clone()));
    }
}

fn find<'a>(named: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    named
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::MissingEntry(name.to_string()))
}

fn scalar_entry(named: &[(String, Tensor)], name: &str) -> Result<f64> {
    Ok(find(named, name)?.data()[0])
}

fn restore_optimizer(prefix: &str, opt: &mut Optimizer, named: &[(String, Tensor)]) -> Result<()> {
    let step = scalar_entry(named, &format!("{prefix}.step"))? as u64;
    let count = scalar_entry(named, &format!("{prefix}.moments"))? as usize;
    let mut m = Vec::with_capacity(count);
    let mut v = Vec::with_capacity(count);
    for i in 0..count {
        m.push(find(named, &format!("{prefix}.m{i}"))?.clone());
        v.push(find(named, &format!("{prefix}.v{i}"))?.clone());
    }
    opt.restore_state(step, m, v)
}

fn with_prefix(prefix: &str, named: Vec<(String, Tensor)>) -> Vec<(String, Tensor)> {
    named.into_iter().map(|(n, t)| (format!("{prefix}{n}"), t)).collect()
}

fn strip_prefix(prefix: &str, named: &[(String, Tensor)]) -> Vec<(String, Tensor)> {
    named
        .iter()
        .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
        .collect()
}

/// Why a loop ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    StepLimit,
}

/// State of an adversarial (or MRT) run between iterations.
pub struct AdversarialSession {
    pub gen: Generator,
    pub disc: Discriminator,
    gen_opt: Optimizer,
    disc_opt: Optimizer,
    pub reward: RewardConfig,
    pub train_cfg: TrainConfig,
    pub seed: u64,
    pub state: TrainState,
    pub counts: ScheduleCounts,
    pub best_params: Vec<(String, Tensor)>,
    pub metrics: Vec<MetricsRow>,
}

impl AdversarialSession {
    pub fn new(gen: Generator, disc: Discriminator, reward: RewardConfig, train_cfg: TrainConfig, seed: u64) -> Result<Self> {
        reward.validate()?;
        if gen.config().t_max < reward.t_max {
            return Err(Error::invalid("generator t_max is below the reward t_max"));
        }
        Ok(Self {
            gen_opt: Optimizer::new(train_cfg.optimizer.settings(train_cfg.adversarial_lr)),
            disc_opt: Optimizer::new(train_cfg.optimizer.settings(train_cfg.disc_lr)),
            best_params: gen.params().named_values(),
            gen,
            disc,
            reward,
            train_cfg,
            seed,
            state: TrainState::new(Phase::Adversarial),
            counts: ScheduleCounts::default(),
            metrics: Vec::new(),
        })
    }

    /// One round: policy-gradient step, teacher-forcing step on a fresh
    /// batch, `eta` regenerated negatives, one discriminator step (which
    /// clips). Checks the divergence and clip invariants.
    pub fn iterate(&mut self, train: &[SentencePair], clock: &dyn Clock) -> Result<MetricsRow> {
        if train.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let step = self.state.step + 1;
        let cfg = &self.train_cfg;
        let mut rng = RngStream::derive(self.seed, &[TAG_ADV, step as u64]);
        let pg: Vec<(&[Token], &[Token])> = draw_indices(train.len(), cfg.pg_batch, &mut rng)
            .into_iter()
            .map(|i| (train[i].source.as_slice(), train[i].target.as_slice()))
            .collect();
        let diag = policy_gradient_step(&mut self.gen, &self.disc, &pg, &self.reward, &mut self.gen_opt, &mut rng)?;
        self.counts.policy_steps += 1;
        if !(diag.mean_abs_reward <= 10.0) {
            return Err(Error::Diverged {
                step,
                mean_abs_reward: diag.mean_abs_reward,
            });
        }
        let tf: Vec<(&[Token], &[Token])> = draw_indices(train.len(), cfg.pg_batch, &mut rng)
            .into_iter()
            .map(|i| (train[i].source.as_slice(), train[i].target.as_slice()))
            .collect();
        teacher_forcing_step(&mut self.gen, &tf, 1.0, &mut self.gen_opt)?;
        self.counts.teacher_steps += 1;

        let sources: Vec<&[Token]> = train.iter().map(|p| p.source.as_slice()).collect();
        let negatives = generate_negatives(&self.gen, &sources, cfg.eta, self.reward.t_max, &mut rng)?;
        let half = (cfg.disc_batch / 2).max(1);
        let real: Vec<(&[Token], &[Token])> = draw_indices(train.len(), half, &mut rng)
            .into_iter()
            .map(|i| (train[i].source.as_slice(), train[i].target.as_slice()))
            .collect();
        let fake: Vec<(&[Token], &[Token])> = draw_indices(negatives.len(), half, &mut rng)
            .into_iter()
            .map(|i| (negatives[i].0.as_slice(), negatives[i].1.as_slice()))
            .collect();
        self.disc.disc_step(&real, &fake, &mut self.disc_opt, cfg.clip)?;
        self.counts.disc_steps += 1;
        let max_abs = self.disc.params().max_abs_value();
        if max_abs > cfg.clip {
            return Err(Error::invalid(format!(
                "discriminator weight {max_abs} exceeds clip bound {} after step {step}",
                cfg.clip
            )));
        }
        self.state.step = step;
        let mut row = MetricsRow::new(step, Phase::Adversarial, clock);
        row.mean_reward = Some(diag.mean_reward);
        row.reward_variance = Some(diag.reward_variance);
        Ok(row)
    }

    /// Dev evaluation folded into `row`; returns true on a new best.
    pub fn evaluate(&mut self, dev: &[SentencePair], row: &mut MetricsRow) -> Result<bool> {
        let (bleu, hyps) = evaluate_dev(&self.gen, dev, self.reward.t_max)?;
        row.dev_bleu = Some(bleu);
        row.disc_accuracy = Some(dev_disc_accuracy(&self.disc, dev, &hyps)?);
        let improved = self.state.record(row.step, bleu);
        if improved {
            self.best_params = self.gen.params().named_values();
        }
        Ok(improved)
    }

    /// Iterate until patience runs out or `max_adversarial_steps` is hit,
    /// evaluating before the first iteration and every `eval_interval`.
    pub fn run(&mut self, train: &[SentencePair], dev: &[SentencePair], clock: &dyn Clock) -> Result<StopReason> {
        if self.state.evaluations == 0 {
            let mut row = MetricsRow::new(0, Phase::Adversarial, clock);
            self.evaluate(dev, &mut row)?;
            self.metrics.push(row);
        }
        loop {
            if self.state.exhausted(self.train_cfg.patience) {
                return Ok(StopReason::Patience);
            }
            if self.state.step >= self.train_cfg.max_adversarial_steps {
                return Ok(StopReason::StepLimit);
            }
            let mut row = self.iterate(train, clock)?;
            if row.step % self.train_cfg.eval_interval == 0 {
                self.evaluate(dev, &mut row)?;
            }
            self.metrics.push(row);
        }
    }

    /// Everything needed to continue the run: both models, the
    /// discriminator's running statistics, optimizer moments and counters.
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        let mut out = with_prefix("g/", self.gen.params().named_values());
        out.extend(with_prefix("best/", self.best_params.clone()));
        out.extend(with_prefix("d/", self.disc.params().named_values()));
        out.extend(with_prefix("dbuf/", self.disc.buffers()));
        optimizer_tensors("opt/g", &self.gen_opt, &mut out);
        optimizer_tensors("opt/d", &self.disc_opt, &mut out);
        let s = &self.state;
        for (name, v) in [
            ("state/step", s.step as f64),
            ("state/best_dev_bleu", s.best_dev_bleu),
            ("state/best_step", s.best_step as f64),
            ("state/evals_since_improvement", s.evals_since_improvement as f64),
            ("state/evaluations", s.evaluations as f64),
            ("state/policy_steps", self.counts.policy_steps as f64),
            ("state/teacher_steps", self.counts.teacher_steps as f64),
            ("state/disc_steps", self.counts.disc_steps as f64),
        ] {
            out.push((name.to_string(), Tensor::scalar(v)));
        }
        out
    }

    /// Inverse of [`snapshot`](Self::snapshot) on a session built with the
    /// same configuration. Metrics rows are not part of the snapshot.
    pub fn restore(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        self.gen.params_mut().load_named(&strip_prefix("g/", named))?;
        self.best_params = strip_prefix("best/", named);
        self.disc.params_mut().load_named(&strip_prefix("d/", named))?;
        self.disc.load_buffers(&strip_prefix("dbuf/", named))?;
        restore_optimizer("opt/g", &mut self.gen_opt, named)?;
        restore_optimizer("opt/d", &mut self.disc_opt, named)?;
        let get = |n: &str| scalar_entry(named, n);
        self.state.step = get("state/step")? as usize;
        self.state.best_dev_bleu = get("state/best_dev_bleu")?;
        self.state.best_step = get("state/best_step")? as usize;
        self.state.evals_since_improvement = get("state/evals_since_improvement")? as usize;
        self.state.evaluations = get("state/evaluations")? as usize;
        self.counts = ScheduleCounts {
            policy_steps: get("state/policy_steps")? as usize,
            teacher_steps: get("state/teacher_steps")? as usize,
            disc_steps: get("state/disc_steps")? as usize,
        };
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MrtDiagnostics {
    pub risk: f64,
    pub mean_subset_size: f64,
}

/// One minimum-risk step. Per source, `sample_size` draws are deduplicated
/// into a subset whose probabilities are renormalized; the risk is the
/// expected `1 - BLEU` under that distribution, averaged over sources.
pub fn mrt_step(
    gen: &mut Generator,
    pairs: &[(&[Token], &[Token])],
    sample_size: usize,
    t_max: usize,
    opt: &mut Optimizer,
    rng: &mut RngStream,
) -> Result<MrtDiagnostics> {
    let (diag, grads) = mrt_loss(gen, pairs, sample_size, t_max, rng)?;
    gen.apply(&grads, opt)?;
    Ok(diag)
}

/// Risk and its gradient without updating the generator.
pub fn mrt_loss(
    gen: &Generator,
    pairs: &[(&[Token], &[Token])],
    sample_size: usize,
    t_max: usize,
    rng: &mut RngStream,
) -> Result<(MrtDiagnostics, crate::numerics::Gradients)> {
    if sample_size < 2 {
        return Err(Error::invalid("MRT needs a sample size of at least 2"));
    }
    if pairs.is_empty() {
        return Err(Error::Empty("MRT batch"));
    }
    let b = pairs.len() as f64;
    let mut subsets: Vec<(usize, Vec<Vec<Token>>, Vec<f64>)> = Vec::new();
    let (mut risk, mut size) = (0.0, 0.0);
    for (i, (x, y)) in pairs.iter().enumerate() {
        let mut subset: Vec<Vec<Token>> = Vec::new();
        for _ in 0..sample_size {
            let s = gen.sample(x, SampleMode::Multinomial, t_max, rng)?;
            if !subset.contains(&s) {
                subset.push(s);
            }
        }
        let logp: Vec<f64> = subset
            .iter()
            .map(|s| Ok(gen.token_log_probs(x, s)?.iter().sum()))
            .collect::<Result<_>>()?;
        let top = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = logp.iter().map(|l| libm::exp(l - top)).collect();
        let z: f64 = unnorm.iter().sum();
        let q: Vec<f64> = unnorm.iter().map(|u| u / z).collect();
        let delta: Vec<f64> = subset
            .iter()
            .map(|s| Ok(1.0 - sentence_bleu(s, y)?.value))
            .collect::<Result<_>>()?;
        let r: f64 = q.iter().zip(&delta).map(|(q, d)| q * d).sum();
        risk += r / b;
        size += subset.len() as f64 / b;
        let w: Vec<f64> = q.iter().zip(&delta).map(|(q, d)| -q * (d - r) / b).collect();
        subsets.push((i, subset, w));
    }
    let items: Vec<WeightedSequence<'_>> = subsets
        .iter()
        .flat_map(|(i, subset, w)| {
            subset.iter().zip(w).map(move |(s, &w)| WeightedSequence {
                source: pairs[*i].0,
                tokens: s,
                weights: vec![w; s.len()],
            })
        })
        .collect();
    let (_, grads) = gen.weighted_nll(&items)?;
    Ok((
        MrtDiagnostics {
            risk,
            mean_subset_size: size,
        },
        grads,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MrtOutcome {
    pub best_params: Vec<(String, Tensor)>,
    pub state: TrainState,
    pub metrics: Vec<MetricsRow>,
}

/// MRT fine-tuning from the current generator with the same evaluation
/// cadence and stopping rule as the adversarial loop. Leaves the best
/// parameters loaded. `mean_reward` holds the mean BLEU gain `1 - risk`.
pub fn mrt_baseline(
    gen: &mut Generator,
    train: &[SentencePair],
    dev: &[SentencePair],
    cfg: &TrainConfig,
    t_max: usize,
    seed: u64,
    clock: &dyn Clock,
) -> Result<MrtOutcome> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut opt = Optimizer::new(cfg.optimizer.settings(cfg.adversarial_lr));
    let mut state = TrainState::new(Phase::Mrt);
    let mut best = gen.params().named_values();
    let mut metrics = Vec::new();
    loop {
        let step = state.step;
        let mut row = MetricsRow::new(step, Phase::Mrt, clock);
        if step > 0 {
            let mut rng = RngStream::derive(seed, &[TAG_MRT, step as u64]);
            let batch: Vec<(&[Token], &[Token])> = draw_indices(train.len(), cfg.pg_batch, &mut rng)
                .into_iter()
                .map(|i| (train[i].source.as_slice(), train[i].target.as_slice()))
                .collect();
            let d = mrt_step(gen, &batch, cfg.mrt_sample_size, t_max, &mut opt, &mut rng)?;
            row.mean_reward = Some(1.0 - d.risk);
        }
        if step % cfg.eval_interval == 0 {
            let (bleu, _) = evaluate_dev(gen, dev, t_max)?;
            row.dev_bleu = Some(bleu);
            if state.record(step, bleu) {
                best = gen.params().named_values();
            }
        }
        metrics.push(row);
        if state.exhausted(cfg.patience) || step >= cfg.max_adversarial_steps {
            break;
        }
        state.step += 1;
    }
    gen.params_mut().load_named(&best)?;
    Ok(MrtOutcome {
        best_params: best,
        state,
        metrics,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    Xi,
    Rollouts,
}

impl SweepKind {
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepKind::Xi => vec![0.6, 0.7, 0.8, 0.9, 0.95],
            SweepKind::Rollouts => vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    /// Held-out accuracy reached by discriminator pretraining (xi sweep).
    pub gate_accuracy: Option<f64>,
    pub gate_reached: bool,
    pub best_dev_bleu: f64,
    pub metrics: Vec<MetricsRow>,
}

/// Run the adversarial loop once per grid value from the same pretrained
/// generator. For the xi sweep each point pretrains a fresh discriminator to
/// its own gate; a gate not reached by the step cap is recorded and the loop
/// proceeds from where pretraining stopped. For the rollout sweep every point
/// shares `pretrained_disc`, and `N = 0` evaluates the pretrained generator
/// without adversarial training.
pub fn run_sweep(
    kind: SweepKind,
    grid: &[f64],
    cfg: &ExperimentConfig,
    pretrained_gen: &[(String, Tensor)],
    pretrained_disc: Option<&Discriminator>,
    real: &[Pair],
    fake: &[Pair],
    train: &[SentencePair],
    dev: &[SentencePair],
    clock: &dyn Clock,
) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    let mut out = Vec::with_capacity(grid.len());
    for &value in grid {
        let mut gen = Generator::new(cfg.generator_config(), cfg.train.gen_seed)?;
        gen.params_mut().load_named(pretrained_gen)?;
        let mut reward = cfg.reward;
        let mut gate_accuracy = None;
        let mut gate_reached = true;
        let disc = match kind {
            SweepKind::Xi => {
                let mut disc = Discriminator::new(cfg.discriminator_config(), cfg.train.disc_seed)?;
                let mut train_cfg = cfg.train.clone();
                train_cfg.xi = value;
                match pretrain_discriminator(&mut disc, real, fake, value, &train_cfg, clock) {
                    Ok(o) => gate_accuracy = Some(o.accuracy),
                    Err(Error::GateNotReached { accuracy, .. }) => {
                        gate_accuracy = Some(accuracy);
                        gate_reached = false;
                    }
                    Err(e) => return Err(e),
                }
                disc
            }
            SweepKind::Rollouts => {
                let d = pretrained_disc.ok_or(Error::MissingEntry("pretrained discriminator".to_string()))?;
                if value < 0.0 || libm::floor(value) != value {
                    return Err(Error::invalid(format!("rollout count {value} is not a whole number")));
                }
                d.clone()
            }
        };
        if kind == SweepKind::Rollouts && value == 0.0 {
            let (bleu, _) = evaluate_dev(&gen, dev, reward.t_max)?;
            let mut row = MetricsRow::new(0, Phase::Adversarial, clock);
            row.dev_bleu = Some(bleu);
            out.push(SweepPoint {
                value,
                gate_accuracy,
                gate_reached,
                best_dev_bleu: bleu,
                metrics: vec![row],
            });
            continue;
        }
        if kind == SweepKind::Rollouts {
            reward.rollouts = value as usize;
        }
        let mut session = AdversarialSession::new(gen, disc, reward, cfg.train.clone(), cfg.run.seed)?;
        session.run(train, dev, clock)?;
        out.push(SweepPoint {
            value,
            gate_accuracy,
            gate_reached,
            best_dev_bleu: session.state.best_dev_bleu,
            metrics: session.metrics,
        });
    }
    Ok(out)
}
