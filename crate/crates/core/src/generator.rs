//! Attention-based encoder-decoder policy.
//!
//! The encoder runs a forward and a backward GRU over the source embeddings
//! and concatenates their states into annotations `H` (`m x 2h`). The
//! decoder starts from `tanh(mean(H) W_init + b_init)` and BOS; each step
//! scores the annotations with `v . tanh(s W_a + b_a + H U_a)`, forms the
//! context `c = a H`, advances its GRU on `[E(y_prev); c]` and emits logits
//! through `tanh([s; c; E(y_prev)] W_r + b_r) W_o + b_o`. PAD and BOS never
//! receive probability mass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::{BOS, EOS, PAD};
use crate::numerics::{log_softmax_masked, Gradients, Optimizer, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::RngStream;
use crate::{Error, Result, Token};

/// Output ids that are masked out of every distribution.
pub const BANNED: [usize; 2] = [PAD as usize, BOS as usize];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub readout_dim: usize,
    pub t_max: usize,
}

impl GeneratorConfig {
    /// Desk-scale sizes: 32-dim embeddings and readout, 64 hidden units.
    pub fn new(vocab_size: usize, t_max: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 32,
            hidden_dim: 64,
            attention_dim: 64,
            readout_dim: 32,
            t_max,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size <= BANNED.len() + 1 {
            return Err(Error::invalid("generator vocabulary too small"));
        }
        if [self.embed_dim, self.hidden_dim, self.attention_dim, self.readout_dim, self.t_max].contains(&0) {
            return Err(Error::invalid("generator dimensions must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Greedy,
    Multinomial,
}

#[derive(Clone, Copy, Debug)]
struct GruIds {
    w_x: ParamId,
    b_x: ParamId,
    w_h: ParamId,
    b_h: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Ids {
    src_emb: ParamId,
    tgt_emb: ParamId,
    enc_fwd: GruIds,
    enc_bwd: GruIds,
    init_w: ParamId,
    init_b: ParamId,
    att_u: ParamId,
    att_w: ParamId,
    att_b: ParamId,
    att_v: ParamId,
    dec: GruIds,
    read_w: ParamId,
    read_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Annotations of one source sentence plus the derived decoder inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSource {
    /// `m x 2h`; row `j` is `[forward_j; backward_j]`.
    pub annotations: Tensor,
    /// `m x a` projection of the annotations used by attention.
    pub keys: Tensor,
    /// Decoder state before the first step (`1 x h`).
    pub init_state: Tensor,
    /// `false` marks positions attention must ignore.
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeState {
    pub hidden: Tensor,
    pub prev: Token,
    pub step: usize,
}

/// Tape handles for an encoded source.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    pub annotations: Var,
    pub keys: Var,
    pub init_state: Var,
}

/// Tape handles produced by one decoder step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub logits: Var,
    pub state: Var,
    pub weights: Var,
    pub context: Var,
}

/// One sequence scored under teacher forcing: `sum_t weights[t] * log p(tokens[t])`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedSequence<'a> {
    pub source: &'a [Token],
    pub tokens: &'a [Token],
    pub weights: Vec<f64>,
}

/// Sampled sequence with the decoder state after each emitted token.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub tokens: Vec<Token>,
    /// `states[t]` is the state that follows emitting `tokens[t]`.
    pub states: Vec<Tensor>,
}

impl Trajectory {
    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }
}

/// Operations a translation policy offers to the training code.
pub trait Policy {
    fn vocab_size(&self) -> usize;
    fn max_len(&self) -> usize;
    fn sample(&self, source: &[Token], mode: SampleMode, max_len: usize, rng: &mut RngStream) -> Result<Vec<Token>>;
    fn sequence_log_prob(&self, source: &[Token], target: &[Token]) -> Result<f64>;
}

#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    store: ParamStore,
    ids: Ids,
}

fn uniform(rng: &mut RngStream, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-bound, bound)).collect()).expect("valid shape")
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

impl Generator {
    /// Fresh parameters: matrices uniform in `+-1/sqrt(fan_in)`, embeddings
    /// in `+-0.1`, biases zero.
    pub fn new(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngStream::derive(seed, &[0x6e4]);
        let mut store = ParamStore::new();
        let (v, k, h, a, r) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim, cfg.attention_dim, cfg.readout_dim);
        let rng = &mut rng;
        let mat = |store: &mut ParamStore, rng: &mut RngStream, name: &str, shape: &[usize]| {
            let bound = 1.0 / libm::sqrt(shape[0] as f64);
            store.insert(name, uniform(rng, shape, bound))
        };
        let zeros = |store: &mut ParamStore, name: &str, n: usize| store.insert(name, Tensor::zeros(&[n]));
        let gru = |store: &mut ParamStore, rng: &mut RngStream, prefix: &str, input: usize| -> Result<GruIds> {
            Ok(GruIds {
                w_x: mat(store, rng, &format!("{prefix}.w_x"), &[input, 3 * h])?,
                b_x: zeros(store, &format!("{prefix}.b_x"), 3 * h)?,
                w_h: mat(store, rng, &format!("{prefix}.w_h"), &[h, 3 * h])?,
                b_h: zeros(store, &format!("{prefix}.b_h"), 3 * h)?,
            })
        };
        let src_emb = store.insert("gen.src_emb", uniform(rng, &[v, k], 0.1))?;
        let tgt_emb = store.insert("gen.tgt_emb", uniform(rng, &[v, k], 0.1))?;
        let enc_fwd = gru(&mut store, rng, "gen.enc_fwd", k)?;
        let enc_bwd = gru(&mut store, rng, "gen.enc_bwd", k)?;
        let dec = gru(&mut store, rng, "gen.dec", k + 2 * h)?;
        let init_w = mat(&mut store, rng, "gen.init_w", &[2 * h, h])?;
        let init_b = zeros(&mut store, "gen.init_b", h)?;
        let att_u = mat(&mut store, rng, "gen.att_u", &[2 * h, a])?;
        let att_w = mat(&mut store, rng, "gen.att_w", &[h, a])?;
        let att_b = zeros(&mut store, "gen.att_b", a)?;
        let att_v = mat(&mut store, rng, "gen.att_v", &[a])?;
        let read_w = mat(&mut store, rng, "gen.read_w", &[h + 2 * h + k, r])?;
        let read_b = zeros(&mut store, "gen.read_b", r)?;
        let out_w = mat(&mut store, rng, "gen.out_w", &[r, v])?;
        let out_b = zeros(&mut store, "gen.out_b", v)?;
        let ids = Ids {
            src_emb,
            tgt_emb,
            enc_fwd,
            enc_bwd,
            init_w,
            init_b,
            att_u,
            att_w,
            att_b,
            att_v,
            dec,
            read_w,
            read_b,
            out_w,
            out_b,
        };
        Ok(Self { cfg, store, ids })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_tokens(&self, tokens: &[Token], what: &'static str) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Err(Error::Empty(what));
        }
        tokens
            .iter()
            .map(|&t| {
                if (t as usize) < self.cfg.vocab_size {
                    Ok(t as usize)
                } else {
                    Err(Error::invalid(format!("token {t} outside the vocabulary")))
                }
            })
            .collect()
    }

    fn run_gru(&self, t: &mut Tape, x: Var, g: GruIds, reverse: bool) -> Result<Vec<Var>> {
        let m = t.value(x).dims2().0;
        let (w_x, b_x, w_h, b_h) = (t.param(g.w_x), t.param(g.b_x), t.param(g.w_h), t.param(g.b_h));
        let proj = t.matmul(x, w_x)?;
        let gx_all = t.add_row(proj, b_x)?;
        let mut h = t.constant(Tensor::zeros(&[1, self.cfg.hidden_dim]));
        let mut states = vec![h; m];
        let order: Vec<usize> = if reverse { (0..m).rev().collect() } else { (0..m).collect() };
        for pos in order {
            let gx = t.slice_rows(gx_all, pos, 1)?;
            h = t.gru_cell(gx, h, w_h, b_h)?;
            states[pos] = h;
        }
        Ok(states)
    }

    /// Record the encoder for `source` on `t`.
    pub fn encode_on(&self, t: &mut Tape, source: &[Token]) -> Result<EncodedVars> {
        let ids = self.check_tokens(source, "source sentence")?;
        let emb = t.param(self.ids.src_emb);
        let x = t.embedding(emb, &ids)?;
        let fwd = self.run_gru(t, x, self.ids.enc_fwd, false)?;
        let bwd = self.run_gru(t, x, self.ids.enc_bwd, true)?;
        let f = t.stack_rows(&fwd)?;
        let b = t.stack_rows(&bwd)?;
        let annotations = t.concat_cols(&[f, b])?;
        let mean = t.mean_rows(annotations)?;
        let (iw, ib) = (t.param(self.ids.init_w), t.param(self.ids.init_b));
        let pre = t.matmul(mean, iw)?;
        let pre = t.add_row(pre, ib)?;
        let init_state = t.tanh(pre)?;
        let u = t.param(self.ids.att_u);
        let keys = t.matmul(annotations, u)?;
        Ok(EncodedVars {
            annotations,
            keys,
            init_state,
        })
    }

    /// Record one decoder step for `prev.len()` rows that share a source.
    pub fn step_on(
        &self,
        t: &mut Tape,
        enc: &EncodedVars,
        state: Var,
        prev: &[Token],
        mask: Option<&[bool]>,
    ) -> Result<StepVars> {
        let prev_ids = self.check_tokens(prev, "previous tokens")?;
        let emb = t.param(self.ids.tgt_emb);
        let e = t.embedding(emb, &prev_ids)?;
        let (aw, ab, av) = (t.param(self.ids.att_w), t.param(self.ids.att_b), t.param(self.ids.att_v));
        let q = t.matmul(state, aw)?;
        let q = t.add_row(q, ab)?;
        let scores = t.additive_scores(q, enc.keys, av)?;
        let weights = t.softmax_rows(scores, mask)?;
        let context = t.matmul(weights, enc.annotations)?;
        let g = self.ids.dec;
        let (w_x, b_x, w_h, b_h) = (t.param(g.w_x), t.param(g.b_x), t.param(g.w_h), t.param(g.b_h));
        let input = t.concat_cols(&[e, context])?;
        let gx = t.matmul(input, w_x)?;
        let gx = t.add_row(gx, b_x)?;
        let new_state = t.gru_cell(gx, state, w_h, b_h)?;
        let (rw, rb) = (t.param(self.ids.read_w), t.param(self.ids.read_b));
        let feats = t.concat_cols(&[new_state, context, e])?;
        let read = t.matmul(feats, rw)?;
        let read = t.add_row(read, rb)?;
        let read = t.tanh(read)?;
        let (ow, ob) = (t.param(self.ids.out_w), t.param(self.ids.out_b));
        let logits = t.matmul(read, ow)?;
        let logits = t.add_row(logits, ob)?;
        Ok(StepVars {
            logits,
            state: new_state,
            weights,
            context,
        })
    }

    /// Record `sum_t weights[t] * log p(tokens[t] | tokens[..t], source)`
    /// under teacher forcing. No EOS requirement, so truncated samples can
    /// be scored.
    pub fn weighted_log_prob_on(&self, t: &mut Tape, source: &[Token], tokens: &[Token], weights: &[f64]) -> Result<Var> {
        if tokens.len() != weights.len() {
            return Err(Error::invalid("one weight per token is required"));
        }
        let targets = self.check_tokens(tokens, "target sentence")?;
        if tokens.len() > self.cfg.t_max {
            return Err(Error::TooLong {
                len: tokens.len(),
                limit: self.cfg.t_max,
            });
        }
        let enc = self.encode_on(t, source)?;
        let mut state = enc.init_state;
        let mut logits = Vec::with_capacity(tokens.len());
        let mut prev = BOS;
        for &y in tokens {
            let step = self.step_on(t, &enc, state, &[prev], None)?;
            logits.push(step.logits);
            state = step.state;
            prev = y;
        }
        let all = t.stack_rows(&logits)?;
        t.weighted_log_likelihood(all, &BANNED, &targets, weights)
    }

    /// `loss = -sum_i sum_t w_it log p(y_it)` and its gradient.
    pub fn weighted_nll(&self, items: &[WeightedSequence<'_>]) -> Result<(f64, Gradients)> {
        if items.is_empty() {
            return Err(Error::Empty("sequence list"));
        }
        let mut t = Tape::new(&self.store);
        let mut terms = Vec::with_capacity(items.len());
        for item in items {
            terms.push(self.weighted_log_prob_on(&mut t, item.source, item.tokens, &item.weights)?);
        }
        let stacked = t.stack_rows(&terms)?;
        let total = t.sum(stacked)?;
        let loss = t.scale(total, -1.0)?;
        let value = t.value(loss).data()[0];
        Ok((value, t.backward(loss)?))
    }

    /// Mean over sentences of the per-token negative log-likelihood of each
    /// target, with its gradient.
    pub fn mle_loss(&self, pairs: &[(&[Token], &[Token])]) -> Result<(f64, Gradients)> {
        let items: Vec<WeightedSequence<'_>> = pairs
            .iter()
            .map(|(s, y)| WeightedSequence {
                source: s,
                tokens: y,
                weights: vec![1.0 / (pairs.len() * y.len().max(1)) as f64; y.len()],
            })
            .collect();
        self.weighted_nll(&items)
    }

    /// One optimizer update on the MLE loss; returns the pre-step loss.
    pub fn mle_step(&mut self, pairs: &[(&[Token], &[Token])], opt: &mut Optimizer) -> Result<f64> {
        let (loss, grads) = self.mle_loss(pairs)?;
        self.apply(&grads, opt)?;
        Ok(loss)
    }

    /// Accumulate `grads` and take an optimizer step.
    pub fn apply(&mut self, grads: &Gradients, opt: &mut Optimizer) -> Result<()> {
        self.store.zero_grads();
        self.store.accumulate(grads)?;
        opt.step(&mut self.store)
    }

    pub fn encode(&self, source: &[Token]) -> Result<EncodedSource> {
        let mut t = Tape::new(&self.store);
        let enc = self.encode_on(&mut t, source)?;
        Ok(EncodedSource {
            annotations: t.value(enc.annotations).clone(),
            keys: t.value(enc.keys).clone(),
            init_state: t.value(enc.init_state).clone(),
            mask: vec![true; source.len()],
        })
    }

    fn constants(t: &mut Tape, enc: &EncodedSource) -> EncodedVars {
        EncodedVars {
            annotations: t.constant(enc.annotations.clone()),
            keys: t.constant(enc.keys.clone()),
            init_state: t.constant(enc.init_state.clone()),
        }
    }

    fn mask_arg(enc: &EncodedSource) -> Option<&[bool]> {
        if enc.mask.iter().all(|&b| b) {
            None
        } else {
            Some(&enc.mask)
        }
    }

    pub fn initial_state(&self, enc: &EncodedSource) -> DecodeState {
        DecodeState {
            hidden: enc.init_state.clone(),
            prev: BOS,
            step: 0,
        }
    }

    /// Attention weights over source positions and the context vector.
    pub fn attend(&self, state: &DecodeState, enc: &EncodedSource) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut t = Tape::new(&self.store);
        let e = Self::constants(&mut t, enc);
        let s = t.constant(state.hidden.clone());
        let step = self.step_on(&mut t, &e, s, &[state.prev], Self::mask_arg(enc))?;
        Ok((t.value(step.weights).data().to_vec(), t.value(step.context).data().to_vec()))
    }

    /// Logits and next states for rows continuing from `hidden` (`rows x h`).
    pub fn step_rows(&self, enc: &EncodedSource, hidden: &Tensor, prev: &[Token]) -> Result<(Tensor, Tensor)> {
        let mut t = Tape::new(&self.store);
        let e = Self::constants(&mut t, enc);
        let s = t.constant(hidden.clone());
        let step = self.step_on(&mut t, &e, s, prev, Self::mask_arg(enc))?;
        Ok((t.value(step.logits).clone(), t.value(step.state).clone()))
    }

    /// Next-token distribution and the advanced state.
    pub fn decode_step(&self, state: &DecodeState, enc: &EncodedSource) -> Result<(Vec<f64>, DecodeState)> {
        if state.step >= self.cfg.t_max {
            return Err(Error::TooLong {
                len: state.step + 1,
                limit: self.cfg.t_max,
            });
        }
        let (logits, hidden) = self.step_rows(enc, &state.hidden, &[state.prev])?;
        let probs = log_softmax_masked(logits.data(), &BANNED)
            .into_iter()
            .map(libm::exp)
            .collect();
        let next = DecodeState {
            hidden,
            prev: state.prev,
            step: state.step + 1,
        };
        Ok((probs, next))
    }

    fn pick(row_logp: &[f64], mode: SampleMode, rng: &mut RngStream) -> Token {
        match mode {
            SampleMode::Greedy => argmax_lowest(row_logp) as Token,
            SampleMode::Multinomial => {
                let probs: Vec<f64> = row_logp.iter().map(|&l| libm::exp(l)).collect();
                rng.categorical(&probs) as Token
            }
        }
    }

    /// Decode from an encoded source, keeping the state after every token.
    pub fn sample_trajectory(
        &self,
        enc: &EncodedSource,
        mode: SampleMode,
        max_len: usize,
        rng: &mut RngStream,
    ) -> Result<Trajectory> {
        let max_len = self.clamp_len(max_len)?;
        let mut hidden = enc.init_state.clone();
        let mut prev = BOS;
        let mut out = Trajectory {
            tokens: Vec::new(),
            states: Vec::new(),
        };
        while out.tokens.len() < max_len {
            let (logits, next) = self.step_rows(enc, &hidden, &[prev])?;
            let logp = log_softmax_masked(logits.data(), &BANNED);
            let y = Self::pick(&logp, mode, rng);
            out.tokens.push(y);
            out.states.push(next.clone());
            hidden = next;
            prev = y;
            if y == EOS {
                break;
            }
        }
        Ok(out)
    }

    fn clamp_len(&self, max_len: usize) -> Result<usize> {
        if max_len == 0 || max_len > self.cfg.t_max {
            return Err(Error::invalid(format!(
                "max_len must be in 1..={}, got {max_len}",
                self.cfg.t_max
            )));
        }
        Ok(max_len)
    }

    /// Continue `n` copies of a prefix in lockstep from its decoder state.
    /// `used` tokens of the length budget are already spent by the prefix;
    /// rows stop at EOS or `max_len` total tokens. Returns continuations
    /// only.
    pub fn rollouts(
        &self,
        enc: &EncodedSource,
        state: &Tensor,
        last: Token,
        used: usize,
        n: usize,
        max_len: usize,
        rng: &mut RngStream,
    ) -> Result<Vec<Vec<Token>>> {
        let max_len = self.clamp_len(max_len)?;
        if last == EOS {
            return Err(Error::PrefixTerminated);
        }
        let h = self.cfg.hidden_dim;
        let mut out = vec![Vec::new(); n];
        let mut active: Vec<usize> = (0..n).collect();
        let mut hidden = Tensor::matrix(n, h, state.data().repeat(n));
        let mut prev = vec![last; n];
        let mut len = used;
        while !active.is_empty() && len < max_len {
            let (logits, next) = self.step_rows(enc, &hidden, &prev)?;
            let mut keep_rows = Vec::with_capacity(active.len());
            let mut keep_prev = Vec::with_capacity(active.len());
            let mut keep_active = Vec::with_capacity(active.len());
            for (r, &row) in active.iter().enumerate() {
                let logp = log_softmax_masked(logits.row(r), &BANNED);
                let y = Self::pick(&logp, SampleMode::Multinomial, rng);
                out[row].push(y);
                if y != EOS {
                    keep_rows.extend_from_slice(next.row(r));
                    keep_prev.push(y);
                    keep_active.push(row);
                }
            }
            len += 1;
            active = keep_active;
            if !active.is_empty() {
                hidden = Tensor::matrix(active.len(), h, keep_rows);
                prev = keep_prev;
            }
        }
        Ok(out)
    }

    /// Beam search over complete hypotheses. Scores are summed token
    /// log-probabilities, optionally divided by `((5 + len) / 6)^alpha`.
    pub fn beam_search(
        &self,
        source: &[Token],
        beam_size: usize,
        length_penalty: Option<f64>,
        max_len: usize,
    ) -> Result<Vec<Token>> {
        if beam_size == 0 {
            return Err(Error::invalid("beam size must be at least 1"));
        }
        let max_len = self.clamp_len(max_len)?;
        let enc = self.encode(source)?;
        let norm = |score: f64, len: usize| match length_penalty {
            Some(alpha) => score / libm::pow((5.0 + len as f64) / 6.0, alpha),
            None => score,
        };
        struct Hyp {
            tokens: Vec<Token>,
            score: f64,
            hidden: Tensor,
        }
        let mut alive = vec![Hyp {
            tokens: Vec::new(),
            score: 0.0,
            hidden: enc.init_state.clone(),
        }];
        let mut finished: Vec<(Vec<Token>, f64)> = Vec::new();
        let h = self.cfg.hidden_dim;
        for depth in 0..max_len {
            let rows: Vec<f64> = alive.iter().flat_map(|a| a.hidden.data().iter().copied()).collect();
            let prev: Vec<Token> = alive.iter().map(|a| *a.tokens.last().unwrap_or(&BOS)).collect();
            let (logits, next) = self.step_rows(&enc, &Tensor::matrix(alive.len(), h, rows), &prev)?;
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for (i, a) in alive.iter().enumerate() {
                for (y, lp) in log_softmax_masked(logits.row(i), &BANNED).into_iter().enumerate() {
                    if lp.is_finite() {
                        cands.push((a.score + lp, i, y));
                    }
                }
            }
            // Stable order: score, then parent, then token id.
            cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            cands.truncate(beam_size);
            let mut next_alive = Vec::new();
            for (score, i, y) in cands {
                let mut tokens = alive[i].tokens.clone();
                tokens.push(y as Token);
                if y as Token == EOS || depth + 1 == max_len {
                    let len = tokens.len();
                    finished.push((tokens, norm(score, len)));
                } else {
                    next_alive.push(Hyp {
                        tokens,
                        score,
                        hidden: Tensor::matrix(1, h, next.row(i).to_vec()),
                    });
                }
            }
            alive = next_alive;
            if alive.is_empty() {
                break;
            }
            if length_penalty.is_none() {
                let best_done = finished.iter().map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
                let best_alive = alive.iter().map(|a| a.score).fold(f64::NEG_INFINITY, f64::max);
                if best_done >= best_alive {
                    break;
                }
            }
        }
        let mut best: Option<&(Vec<Token>, f64)> = None;
        for f in &finished {
            if best.is_none_or(|b| f.1 > b.1) {
                best = Some(f);
            }
        }
        Ok(best.map(|b| b.0.clone()).unwrap_or_default())
    }

    /// Log-probability of each token of `tokens` under teacher forcing.
    pub fn token_log_probs(&self, source: &[Token], tokens: &[Token]) -> Result<Vec<f64>> {
        self.check_tokens(tokens, "target sentence")?;
        let enc = self.encode(source)?;
        let mut hidden = enc.init_state.clone();
        let mut prev = BOS;
        let mut out = Vec::with_capacity(tokens.len());
        for &y in tokens {
            let (logits, next) = self.step_rows(&enc, &hidden, &[prev])?;
            out.push(log_softmax_masked(logits.data(), &BANNED)[y as usize]);
            hidden = next;
            prev = y;
        }
        Ok(out)
    }

    /// Greedy decode of every source.
    pub fn greedy_decode_all(&self, sources: &[&[Token]], max_len: usize) -> Result<Vec<Vec<Token>>> {
        let mut rng = RngStream::new(0);
        sources
            .iter()
            .map(|s| self.sample(s, SampleMode::Greedy, max_len, &mut rng))
            .collect()
    }
}

impl Policy for Generator {
    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn max_len(&self) -> usize {
        self.cfg.t_max
    }

    fn sample(&self, source: &[Token], mode: SampleMode, max_len: usize, rng: &mut RngStream) -> Result<Vec<Token>> {
        let enc = self.encode(source)?;
        Ok(self.sample_trajectory(&enc, mode, max_len, rng)?.tokens)
    }

    fn sequence_log_prob(&self, source: &[Token], target: &[Token]) -> Result<f64> {
        match target.iter().position(|&t| t == EOS) {
            Some(i) if i + 1 == target.len() => {}
            Some(_) => return Err(Error::invalid("EOS before the end of the target")),
            None => return Err(Error::MissingEos),
        }
        Ok(self.token_log_probs(source, target)?.iter().sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(v: usize) -> Generator {
        let cfg = GeneratorConfig {
            vocab_size: v,
            embed_dim: 4,
            hidden_dim: 5,
            attention_dim: 3,
            readout_dim: 4,
            t_max: 6,
        };
        Generator::new(cfg, 3).unwrap()
    }

    #[test]
    fn annotation_shape() {
        let g = small(8);
        let enc = g.encode(&[4, 5, 6]).unwrap();
        assert_eq!(enc.annotations.shape(), &[3, 10]);
        assert!(matches!(g.encode(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn distribution_is_normalized_and_bans_pad() {
        let g = small(8);
        let enc = g.encode(&[4, 7]).unwrap();
        let (p, next) = g.decode_step(&g.initial_state(&enc), &enc).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p[PAD as usize], 0.0);
        assert_eq!(p[BOS as usize], 0.0);
        assert_eq!(next.step, 1);
    }

    #[test]
    fn greedy_ties_pick_lowest_id() {
        assert_eq!(argmax_lowest(&[f64::NEG_INFINITY, 0.5, 0.5, 0.1]), 1);
    }

    #[test]
    fn max_len_one_gives_one_token() {
        let g = small(8);
        let mut rng = RngStream::new(1);
        assert_eq!(g.sample(&[4], SampleMode::Multinomial, 1, &mut rng).unwrap().len(), 1);
        assert!(g.sample(&[4], SampleMode::Greedy, 7, &mut rng).is_err());
    }

    #[test]
    fn log_prob_requires_final_eos() {
        let g = small(8);
        assert_eq!(g.sequence_log_prob(&[4], &[5, 6]), Err(Error::MissingEos));
        assert!(g.sequence_log_prob(&[4], &[5, EOS, 6, EOS]).is_err());
        assert!(g.sequence_log_prob(&[4], &[5, EOS]).unwrap() < 0.0);
    }

    #[test]
    fn rollouts_reject_terminated_prefix() {
        let g = small(8);
        let enc = g.encode(&[4]).unwrap();
        let mut rng = RngStream::new(1);
        let r = g.rollouts(&enc, &enc.init_state, EOS, 1, 3, 6, &mut rng);
        assert_eq!(r, Err(Error::PrefixTerminated));
    }
}
