//! Rewards and policy-gradient updates for the generator.
//!
//! A complete sample `Y` of source `X` with reference `Y*` earns
//!
//! ```text
//! R(Y) = lambda * (D(X, Y) - b) + (1 - lambda) * BLEU(Y, Y*)
//! ```
//!
//! with `D` in evaluation mode. A proper prefix `Y_{1:t}` is worth the mean
//! of `R` over `N` Monte Carlo completions drawn from the generator. The
//! update weights `log p(y_t | Y_{<t}, X)` by these per-position rewards,
//! scaled by `1/T` of the sampled length when `length_normalize` is set.
//!
//! Gradients returned by this module are gradients of a loss (the negated
//! objective) unless stated otherwise, so they can be fed to an optimizer.

use alloc::vec;
use alloc::vec::Vec;

use crate::bleu::sentence_bleu;
use crate::corpus::EOS;
use crate::discriminator::Discriminator;
use crate::generator::{EncodedSource, Generator, SampleMode, Trajectory, WeightedSequence, BANNED};
use crate::numerics::{log_softmax_masked, Gradients, Optimizer, Tape, Tensor};
use crate::rng::RngStream;
use crate::{Error, Result, Token};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardConfig {
    pub lambda: f64,
    pub baseline: f64,
    pub rollouts: usize,
    pub t_max: usize,
    /// Divide each sentence's contribution by its sampled length.
    pub length_normalize: bool,
}

impl RewardConfig {
    pub fn new(t_max: usize) -> Self {
        Self {
            lambda: 0.7,
            baseline: 0.5,
            rollouts: 20,
            t_max,
            length_normalize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid("lambda must lie in [0, 1]"));
        }
        if !self.baseline.is_finite() {
            return Err(Error::invalid("baseline must be finite"));
        }
        if self.rollouts == 0 {
            return Err(Error::invalid("at least one rollout is required"));
        }
        if self.t_max == 0 {
            return Err(Error::invalid("t_max must be positive"));
        }
        Ok(())
    }
}

/// `lambda * (d - b) + (1 - lambda) * q`.
pub fn mix_reward(lambda: f64, d: f64, baseline: f64, q: f64) -> f64 {
    lambda * (d - baseline) + (1.0 - lambda) * q
}

/// Evaluates terminal rewards for one source with cached discriminator
/// features.
pub struct RewardContext<'a> {
    disc: &'a Discriminator,
    source_features: Tensor,
    reference: &'a [Token],
    cfg: RewardConfig,
}

impl<'a> RewardContext<'a> {
    pub fn new(disc: &'a Discriminator, source: &[Token], reference: &'a [Token], cfg: RewardConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            disc,
            source_features: disc.source_features(source)?,
            reference,
            cfg,
        })
    }

    /// Terminal rewards of complete sequences.
    pub fn terminal(&self, sequences: &[Vec<Token>]) -> Result<Vec<f64>> {
        let d = if self.cfg.lambda > 0.0 {
            self.disc.score_targets(&self.source_features, sequences)?
        } else {
            vec![0.0; sequences.len()]
        };
        sequences
            .iter()
            .zip(d)
            .map(|(y, d)| {
                let q = if self.cfg.lambda < 1.0 {
                    sentence_bleu(y, self.reference)?.value
                } else {
                    0.0
                };
                Ok(mix_reward(self.cfg.lambda, d, self.cfg.baseline, q))
            })
            .collect()
    }
}

/// `terminal_reward` for a single complete sequence.
pub fn terminal_reward(
    disc: &Discriminator,
    source: &[Token],
    target: &[Token],
    reference: &[Token],
    cfg: &RewardConfig,
) -> Result<f64> {
    let ctx = RewardContext::new(disc, source, reference, *cfg)?;
    Ok(ctx.terminal(&[target.to_vec()])?[0])
}

/// `N` completions of the first `t` tokens of `traj`, each including the
/// prefix.
pub fn mc_rollouts(
    gen: &Generator,
    enc: &EncodedSource,
    traj: &Trajectory,
    t: usize,
    n: usize,
    t_max: usize,
    rng: &mut RngStream,
) -> Result<Vec<Vec<Token>>> {
    if t == 0 || t > traj.tokens.len() {
        return Err(Error::invalid("prefix length out of range"));
    }
    let prefix = &traj.tokens[..t];
    let tails = gen.rollouts(enc, &traj.states[t - 1], prefix[t - 1], t, n, t_max, rng)?;
    Ok(tails
        .into_iter()
        .map(|tail| {
            let mut y = prefix.to_vec();
            y.extend(tail);
            y
        })
        .collect())
}

/// Reward of the first `t` tokens of `traj`: the terminal reward when the
/// prefix is the whole sequence, otherwise the rollout average.
pub fn intermediate_reward(
    gen: &Generator,
    ctx: &RewardContext<'_>,
    enc: &EncodedSource,
    traj: &Trajectory,
    t: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    if t == traj.tokens.len() {
        return Ok(ctx.terminal(&[traj.tokens.clone()])?[0]);
    }
    let rolls = mc_rollouts(gen, enc, traj, t, ctx.cfg.rollouts, ctx.cfg.t_max, rng)?;
    let r = ctx.terminal(&rolls)?;
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

/// One sampled sequence with its per-position rewards and the rollouts
/// behind every intermediate reward.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub tokens: Vec<Token>,
    pub rewards: Vec<f64>,
    pub rollouts: Vec<Vec<Vec<Token>>>,
}

pub fn run_episode(
    gen: &Generator,
    disc: &Discriminator,
    source: &[Token],
    reference: &[Token],
    cfg: &RewardConfig,
    rng: &mut RngStream,
) -> Result<Episode> {
    let ctx = RewardContext::new(disc, source, reference, *cfg)?;
    let enc = gen.encode(source)?;
    let traj = gen.sample_trajectory(&enc, SampleMode::Multinomial, cfg.t_max, rng)?;
    let len = traj.tokens.len();
    let mut rewards = Vec::with_capacity(len);
    let mut rollouts = Vec::with_capacity(len.saturating_sub(1));
    for t in 1..len {
        let rolls = mc_rollouts(gen, &enc, &traj, t, cfg.rollouts, cfg.t_max, rng)?;
        let r = ctx.terminal(&rolls)?;
        rewards.push(r.iter().sum::<f64>() / r.len() as f64);
        rollouts.push(rolls);
    }
    rewards.push(ctx.terminal(&[traj.tokens.clone()])?[0]);
    Ok(Episode {
        tokens: traj.tokens,
        rewards,
        rollouts,
    })
}

/// Per-position weights of one episode in a batch of `batch` episodes.
pub fn episode_weights(rewards: &[f64], batch: usize, length_normalize: bool) -> Vec<f64> {
    let scale = if length_normalize {
        batch as f64 * rewards.len() as f64
    } else {
        batch as f64
    };
    rewards.iter().map(|r| r / scale).collect()
}

/// Surrogate loss `-(1/B) sum_b c_b sum_t R_bt log p(y_bt)` with
/// `c_b = 1/T_b` under length normalization, and its gradient.
pub fn surrogate_loss(
    gen: &Generator,
    sources: &[&[Token]],
    episodes: &[Episode],
    length_normalize: bool,
) -> Result<(f64, Gradients)> {
    if sources.len() != episodes.len() {
        return Err(Error::invalid("one episode per source is required"));
    }
    let items: Vec<WeightedSequence<'_>> = sources
        .iter()
        .zip(episodes)
        .map(|(s, e)| WeightedSequence {
            source: s,
            tokens: &e.tokens,
            weights: episode_weights(&e.rewards, episodes.len(), length_normalize),
        })
        .collect();
    gen.weighted_nll(&items)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PgDiagnostics {
    pub mean_reward: f64,
    pub reward_variance: f64,
    pub mean_abs_reward: f64,
    pub mean_length: f64,
    pub surrogate_loss: f64,
}

fn diagnostics(episodes: &[Episode], loss: f64) -> PgDiagnostics {
    let all: Vec<f64> = episodes.iter().flat_map(|e| e.rewards.iter().copied()).collect();
    let n = all.len().max(1) as f64;
    let mean = all.iter().sum::<f64>() / n;
    PgDiagnostics {
        mean_reward: mean,
        reward_variance: all.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n,
        mean_abs_reward: all.iter().map(|r| r.abs()).sum::<f64>() / n,
        mean_length: episodes.iter().map(|e| e.tokens.len()).sum::<usize>() as f64 / episodes.len().max(1) as f64,
        surrogate_loss: loss,
    }
}

/// Sample one episode per pair and return the surrogate-loss gradient
/// without updating the generator.
pub fn policy_gradient(
    gen: &Generator,
    disc: &Discriminator,
    pairs: &[(&[Token], &[Token])],
    cfg: &RewardConfig,
    rng: &mut RngStream,
) -> Result<(Gradients, Vec<Episode>, PgDiagnostics)> {
    if pairs.is_empty() {
        return Err(Error::Empty("policy-gradient batch"));
    }
    let episodes = pairs
        .iter()
        .map(|(x, y)| run_episode(gen, disc, x, y, cfg, rng))
        .collect::<Result<Vec<_>>>()?;
    let sources: Vec<&[Token]> = pairs.iter().map(|p| p.0).collect();
    let (loss, grads) = surrogate_loss(gen, &sources, &episodes, cfg.length_normalize)?;
    let diag = diagnostics(&episodes, loss);
    Ok((grads, episodes, diag))
}

/// [`policy_gradient`] followed by one optimizer step.
pub fn policy_gradient_step(
    gen: &mut Generator,
    disc: &Discriminator,
    pairs: &[(&[Token], &[Token])],
    cfg: &RewardConfig,
    opt: &mut Optimizer,
    rng: &mut RngStream,
) -> Result<PgDiagnostics> {
    let (grads, _, diag) = policy_gradient(gen, disc, pairs, cfg, rng)?;
    gen.apply(&grads, opt)?;
    Ok(diag)
}

/// Reward `reward` at every position of the reference targets; with
/// reward 1 this is exactly the MLE update. Returns the pre-step loss.
pub fn teacher_forcing_step(
    gen: &mut Generator,
    pairs: &[(&[Token], &[Token])],
    reward: f64,
    opt: &mut Optimizer,
) -> Result<f64> {
    let (loss, grads) = teacher_forcing_loss(gen, pairs, reward)?;
    gen.apply(&grads, opt)?;
    Ok(loss)
}

pub fn teacher_forcing_loss(gen: &Generator, pairs: &[(&[Token], &[Token])], reward: f64) -> Result<(f64, Gradients)> {
    if pairs.is_empty() {
        return Err(Error::Empty("teacher-forcing batch"));
    }
    let items: Vec<WeightedSequence<'_>> = pairs
        .iter()
        .map(|(x, y)| WeightedSequence {
            source: x,
            tokens: y,
            weights: episode_weights(&vec![reward; y.len()], pairs.len(), true),
        })
        .collect();
    gen.weighted_nll(&items)
}

/// Every complete sequence (EOS-terminated, or cut at `t_max`) with its
/// probability under the generator.
pub fn enumerate_sequences(gen: &Generator, source: &[Token], t_max: usize) -> Result<Vec<(Vec<Token>, f64)>> {
    let emittable = gen.config().vocab_size - BANNED.len();
    if emittable > 4 || t_max > 3 {
        let open = emittable.saturating_sub(1) as u128;
        let mut count: u128 = 0;
        for len in 1..=t_max as u32 {
            count = count.saturating_add(open.saturating_pow(len - 1));
        }
        count = count.saturating_add(open.saturating_pow(t_max as u32));
        return Err(Error::SpaceTooLarge(count.min(usize::MAX as u128) as usize));
    }
    let enc = gen.encode(source)?;
    let mut out = Vec::new();
    let mut stack = vec![(Vec::<Token>::new(), 0.0f64, enc.init_state.clone())];
    while let Some((prefix, logp, hidden)) = stack.pop() {
        let prev = prefix.last().copied().unwrap_or(crate::corpus::BOS);
        let (logits, next) = gen.step_rows(&enc, &hidden, &[prev])?;
        let lp = log_softmax_masked(logits.data(), &BANNED);
        for (y, l) in lp.into_iter().enumerate().rev() {
            if !l.is_finite() {
                continue;
            }
            let mut seq = prefix.clone();
            seq.push(y as Token);
            let total = logp + l;
            if y as Token == EOS || seq.len() == t_max {
                out.push((seq, libm::exp(total)));
            } else {
                stack.push((seq, total, next.clone()));
            }
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Exact objective `J = sum_Y p(Y) R(Y)` and the sequences behind it.
pub struct ExactObjective {
    pub value: f64,
    /// `(sequence, probability, terminal reward)`.
    pub sequences: Vec<(Vec<Token>, f64, f64)>,
}

pub fn exact_objective(
    gen: &Generator,
    disc: &Discriminator,
    source: &[Token],
    reference: &[Token],
    cfg: &RewardConfig,
) -> Result<ExactObjective> {
    let seqs = enumerate_sequences(gen, source, cfg.t_max)?;
    let ctx = RewardContext::new(disc, source, reference, *cfg)?;
    let ys: Vec<Vec<Token>> = seqs.iter().map(|s| s.0.clone()).collect();
    let rewards = ctx.terminal(&ys)?;
    let sequences: Vec<(Vec<Token>, f64, f64)> = seqs.into_iter().zip(rewards).map(|((y, p), r)| (y, p, r)).collect();
    Ok(ExactObjective {
        value: sequences.iter().map(|s| s.1 * s.2).sum(),
        sequences,
    })
}

/// Expected terminal reward of all completions of `prefix`.
pub fn exact_prefix_value(objective: &ExactObjective, prefix: &[Token]) -> Result<f64> {
    let (mut mass, mut value) = (0.0, 0.0);
    for (y, p, r) in &objective.sequences {
        if y.starts_with(prefix) {
            mass += p;
            value += p * r;
        }
    }
    if mass == 0.0 {
        return Err(Error::invalid("prefix has no completions"));
    }
    Ok(value / mass)
}

/// Exact expectation of the sampled update direction, as an ascent vector
/// in store order, by enumerating every sequence (`D` frozen).
///
/// Without length normalization this is `grad J`. With it, each position
/// carries the exact prefix value weighted by `1/T`, which is what the
/// sampled estimator averages to.
pub fn exact_expected_gradient(
    gen: &Generator,
    disc: &Discriminator,
    source: &[Token],
    reference: &[Token],
    cfg: &RewardConfig,
) -> Result<Vec<f64>> {
    let obj = exact_objective(gen, disc, source, reference, cfg)?;
    let mut t = Tape::new(gen.params());
    let mut terms = Vec::with_capacity(obj.sequences.len());
    for (y, p, r) in &obj.sequences {
        let weights: Vec<f64> = if cfg.length_normalize {
            (1..=y.len())
                .map(|k| {
                    let v = if k == y.len() { *r } else { exact_prefix_value(&obj, &y[..k])? };
                    Ok(p * v / y.len() as f64)
                })
                .collect::<Result<_>>()?
        } else {
            vec![p * r; y.len()]
        };
        terms.push(gen.weighted_log_prob_on(&mut t, source, y, &weights)?);
    }
    let stacked = t.stack_rows(&terms)?;
    let total = t.sum(stacked)?;
    Ok(t.backward(total)?.flatten(gen.params()))
}
