//! Conditional CNN classifier over (source, target) pairs.
//!
//! Each side is padded to `T` tokens, embedded, and passed through kernel
//! banks of several window sizes. A bank's feature map is batch-normalized,
//! rectified and max-pooled over time; the pooled features of both sides
//! are concatenated and projected to two logits. The probability that a
//! pair is human-produced is the softmax weight of the [`REAL`] logit.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::PAD;
use crate::numerics::{
    clip_to_box, BatchStats, Gradients, Optimizer, ParamId, ParamStore, Tape, Tensor, Var,
};
use crate::rng::RngStream;
use crate::{Error, Result, Token};

pub const FAKE: usize = 0;
pub const REAL: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub windows: Vec<usize>,
    pub kernels_per_window: usize,
    /// Fixed sequence length `T` both sides are padded to.
    pub seq_len: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl DiscriminatorConfig {
    /// Desk-scale sizes: 32-dim embeddings, windows 1 to 4 with 32 kernels each.
    pub fn new(vocab_size: usize, seq_len: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 32,
            windows: vec![1, 2, 3, 4],
            kernels_per_window: 32,
            seq_len,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }

    pub fn features_per_side(&self) -> usize {
        self.windows.len() * self.kernels_per_window
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.kernels_per_window == 0 || self.windows.is_empty() {
            return Err(Error::invalid("discriminator dimensions must be positive"));
        }
        if let Some(&l) = self.windows.iter().find(|&&l| l == 0 || l > self.seq_len) {
            return Err(Error::invalid(format!("window {l} does not fit sequence length {}", self.seq_len)));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return Err(Error::invalid("invalid batch-norm settings"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

impl Side {
    fn index(self) -> usize {
        match self {
            Side::Source => 0,
            Side::Target => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Side::Source => "src",
            Side::Target => "tgt",
        }
    }
}

/// Batch norm uses batch statistics in `Train` and running averages in `Eval`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
struct Bank {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    store: ParamStore,
    emb: [ParamId; 2],
    banks: [Vec<Bank>; 2],
    v: ParamId,
    v_b: ParamId,
    running: [Vec<BatchStats>; 2],
}

/// Pooled features of one side with the batch-norm nodes that produced them.
struct SideVars {
    features: Var,
    bn_nodes: Vec<Var>,
}

/// Pad with PAD or truncate to exactly `len` tokens.
pub fn fit_to_length(tokens: &[Token], len: usize) -> Vec<Token> {
    let mut out: Vec<Token> = tokens.iter().copied().take(len).collect();
    out.resize(len, PAD);
    out
}

impl Discriminator {
    /// Fresh parameters: kernels and the output transform uniform in
    /// `+-1/sqrt(fan_in)`, embeddings in `+-0.1`, `gamma = 1`, other
    /// vectors zero; running statistics start at mean 0, variance 1.
    pub fn new(cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngStream::derive(seed, &[0xd15c]);
        let mut store = ParamStore::new();
        let (v, k, kern) = (cfg.vocab_size, cfg.embed_dim, cfg.kernels_per_window);
        let mut uniform = |shape: &[usize], bound: f64| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-bound, bound)).collect())
        };
        let mut emb = [ParamId(0); 2];
        let mut banks: [Vec<Bank>; 2] = [Vec::new(), Vec::new()];
        for side in [Side::Source, Side::Target] {
            let s = side.name();
            emb[side.index()] = store.insert(&format!("disc.{s}.emb"), uniform(&[v, k], 0.1)?)?;
            for &l in &cfg.windows {
                let bound = 1.0 / libm::sqrt((l * k) as f64);
                banks[side.index()].push(Bank {
                    w: store.insert(&format!("disc.{s}.w{l}"), uniform(&[l * k, kern], bound)?)?,
                    b: store.insert(&format!("disc.{s}.b{l}"), Tensor::zeros(&[kern]))?,
                    gamma: store.insert(&format!("disc.{s}.gamma{l}"), Tensor::full(&[kern], 1.0))?,
                    beta: store.insert(&format!("disc.{s}.beta{l}"), Tensor::zeros(&[kern]))?,
                });
            }
        }
        let feats = 2 * cfg.features_per_side();
        let v = store.insert("disc.v", uniform(&[feats, 2], 1.0 / libm::sqrt(feats as f64))?)?;
        let v_b = store.insert("disc.v_b", Tensor::zeros(&[2]))?;
        let fresh = BatchStats {
            mean: vec![0.0; kern],
            var: vec![1.0; kern],
        };
        let running = [vec![fresh.clone(); cfg.windows.len()], vec![fresh; cfg.windows.len()]];
        Ok(Self {
            cfg,
            store,
            emb,
            banks,
            v,
            v_b,
            running,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Id of the convolution bias for `side` and the `i`-th window size.
    pub fn conv_bias_id(&self, side: Side, i: usize) -> ParamId {
        self.banks[side.index()][i].b
    }

    pub fn running_stats(&self, side: Side) -> &[BatchStats] {
        &self.running[side.index()]
    }

    pub fn set_running_stats(&mut self, side: Side, stats: Vec<BatchStats>) -> Result<()> {
        if stats.len() != self.cfg.windows.len()
            || stats.iter().any(|s| s.mean.len() != self.cfg.kernels_per_window || s.var.len() != s.mean.len())
        {
            return Err(Error::invalid("running statistics do not match the kernel banks"));
        }
        if stats.iter().any(|s| s.var.iter().any(|&v| !(v >= 0.0))) {
            return Err(Error::invalid("running variance must be nonnegative"));
        }
        self.running[side.index()] = stats;
        Ok(())
    }

    /// Running statistics as named tensors, for checkpoints.
    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for side in [Side::Source, Side::Target] {
            for (i, &l) in self.cfg.windows.iter().enumerate() {
                let st = &self.running[side.index()][i];
                out.push((format!("disc.{}.running_mean{l}", side.name()), Tensor::vector(st.mean.clone())));
                out.push((format!("disc.{}.running_var{l}", side.name()), Tensor::vector(st.var.clone())));
            }
        }
        out
    }

    pub fn load_buffers(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let find = |name: &str| -> Result<Vec<f64>> {
            named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.data().to_vec())
                .ok_or_else(|| Error::MissingEntry(name.into()))
        };
        for side in [Side::Source, Side::Target] {
            let mut stats = Vec::new();
            for &l in &self.cfg.windows {
                stats.push(BatchStats {
                    mean: find(&format!("disc.{}.running_mean{l}", side.name()))?,
                    var: find(&format!("disc.{}.running_var{l}", side.name()))?,
                });
            }
            self.set_running_stats(side, stats)?;
        }
        Ok(())
    }

    fn check_ids(&self, tokens: &[Token]) -> Result<Vec<usize>> {
        if tokens.len() != self.cfg.seq_len {
            return Err(Error::ShapeMismatch {
                op: "embed_pair",
                lhs: vec![tokens.len()],
                rhs: vec![self.cfg.seq_len],
            });
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

    /// Embedding matrices (`T x k`) of a padded pair.
    pub fn embed_pair(&self, source: &[Token], target: &[Token]) -> Result<(Tensor, Tensor)> {
        let mut t = Tape::new(&self.store);
        let mut out = Vec::new();
        for (side, toks) in [(Side::Source, source), (Side::Target, target)] {
            let ids = self.check_ids(toks)?;
            let e = t.param(self.emb[side.index()]);
            let m = t.embedding(e, &ids)?;
            out.push(t.value(m).clone());
        }
        let tgt = out.pop().expect("two sides");
        Ok((out.pop().expect("two sides"), tgt))
    }

    /// Pooled features of `rows` stacked `T x k` blocks in `x`.
    fn features_on(&self, t: &mut Tape, x: Var, side: Side, mode: Mode) -> Result<SideVars> {
        let rows = t.value(x).dims2().0 / self.cfg.seq_len;
        let mut pooled = Vec::with_capacity(self.cfg.windows.len());
        let mut bn_nodes = Vec::new();
        for (i, (&l, bank)) in self.cfg.windows.iter().zip(&self.banks[side.index()]).enumerate() {
            let (w, b, g, beta) = (t.param(bank.w), t.param(bank.b), t.param(bank.gamma), t.param(bank.beta));
            let c = t.conv1d(x, w, b, self.cfg.seq_len, l)?;
            let n = match mode {
                Mode::Train => t.batch_norm(c, g, beta, self.cfg.bn_eps)?,
                Mode::Eval => t.batch_norm_fixed(c, g, beta, &self.running[side.index()][i], self.cfg.bn_eps)?,
            };
            bn_nodes.push(n);
            let a = t.relu(n)?;
            pooled.push(t.max_over_time(a, rows)?);
        }
        Ok(SideVars {
            features: t.concat_cols(&pooled)?,
            bn_nodes,
        })
    }

    /// Embeds each row after truncating or PAD-filling it to `T`.
    fn embed_rows(&self, t: &mut Tape, side: Side, rows: &[&[Token]]) -> Result<Var> {
        let mut ids = Vec::with_capacity(rows.len() * self.cfg.seq_len);
        for r in rows {
            ids.extend(self.check_ids(&fit_to_length(r, self.cfg.seq_len))?);
        }
        let e = t.param(self.emb[side.index()]);
        t.embedding(e, &ids)
    }

    /// Pooled features for a stack of `T x k` matrices (`rows*T x k`).
    pub fn extract_features(&self, m: &Tensor, side: Side, mode: Mode) -> Result<Tensor> {
        let (rows, k) = m.dims2();
        if k != self.cfg.embed_dim || rows == 0 || rows % self.cfg.seq_len != 0 {
            return Err(Error::ShapeMismatch {
                op: "extract_features",
                lhs: m.shape().to_vec(),
                rhs: vec![self.cfg.seq_len, self.cfg.embed_dim],
            });
        }
        let mut t = Tape::new(&self.store);
        let x = t.constant(m.clone());
        let f = self.features_on(&mut t, x, side, mode)?;
        Ok(t.value(f.features).clone())
    }

    fn logits_on(&self, t: &mut Tape, src: Var, tgt: Var) -> Result<Var> {
        let feats = t.concat_cols(&[src, tgt])?;
        let (v, vb) = (t.param(self.v), t.param(self.v_b));
        let l = t.matmul(feats, v)?;
        t.add_row(l, vb)
    }

    fn probs_from_logits(logits: &Tensor) -> Vec<f64> {
        let (rows, _) = logits.dims2();
        (0..rows)
            .map(|r| {
                let row = logits.row(r);
                // softmax weight of REAL, written as a logistic of the difference
                let d = row[REAL] - row[FAKE];
                if d >= 0.0 {
                    1.0 / (1.0 + libm::exp(-d))
                } else {
                    let e = libm::exp(d);
                    e / (1.0 + e)
                }
            })
            .collect()
    }

    /// Real-class probabilities of padded pairs, evaluated as one batch.
    pub fn predict_batch(&self, pairs: &[(&[Token], &[Token])], mode: Mode) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Err(Error::Empty("pair set"));
        }
        let mut t = Tape::new(&self.store);
        let srcs: Vec<&[Token]> = pairs.iter().map(|p| p.0).collect();
        let tgts: Vec<&[Token]> = pairs.iter().map(|p| p.1).collect();
        let xs = self.embed_rows(&mut t, Side::Source, &srcs)?;
        let xt = self.embed_rows(&mut t, Side::Target, &tgts)?;
        let fs = self.features_on(&mut t, xs, Side::Source, mode)?;
        let ft = self.features_on(&mut t, xt, Side::Target, mode)?;
        let logits = self.logits_on(&mut t, fs.features, ft.features)?;
        Ok(Self::probs_from_logits(t.value(logits)))
    }

    pub fn predict_prob(&self, source: &[Token], target: &[Token], mode: Mode) -> Result<f64> {
        Ok(self.predict_batch(&[(source, target)], mode)?[0])
    }

    /// Source-side features in evaluation mode, reusable across many
    /// candidate targets of the same source.
    pub fn source_features(&self, source: &[Token]) -> Result<Tensor> {
        let padded = fit_to_length(source, self.cfg.seq_len);
        let mut t = Tape::new(&self.store);
        let x = self.embed_rows(&mut t, Side::Source, &[&padded])?;
        let f = self.features_on(&mut t, x, Side::Source, Mode::Eval)?;
        Ok(t.value(f.features).clone())
    }

    /// Evaluation-mode real probabilities of `targets` (unpadded) given
    /// cached source features.
    pub fn score_targets(&self, source_features: &Tensor, targets: &[Vec<Token>]) -> Result<Vec<f64>> {
        if targets.is_empty() {
            return Ok(Vec::new());
        }
        let padded: Vec<Vec<Token>> = targets.iter().map(|y| fit_to_length(y, self.cfg.seq_len)).collect();
        let refs: Vec<&[Token]> = padded.iter().map(|y| &y[..]).collect();
        let mut t = Tape::new(&self.store);
        let x = self.embed_rows(&mut t, Side::Target, &refs)?;
        let ft = self.features_on(&mut t, x, Side::Target, Mode::Eval)?;
        let row = source_features.data().to_vec();
        let n = targets.len();
        let fs = t.constant(Tensor::matrix(n, row.len(), row.repeat(n)));
        let logits = self.logits_on(&mut t, fs, ft.features)?;
        Ok(Self::probs_from_logits(t.value(logits)))
    }

    /// `-mean log D(real) - mean log(1 - D(fake))` in training mode, its
    /// gradient and the batch statistics of every bank
    /// (`[side][window]`).
    pub fn loss(
        &self,
        real: &[(&[Token], &[Token])],
        fake: &[(&[Token], &[Token])],
    ) -> Result<(f64, Gradients, [Vec<BatchStats>; 2])> {
        if real.is_empty() || fake.is_empty() {
            return Err(Error::Empty("real or fake pair set"));
        }
        let all: Vec<&(&[Token], &[Token])> = real.iter().chain(fake).collect();
        let mut t = Tape::new(&self.store);
        let srcs: Vec<&[Token]> = all.iter().map(|p| p.0).collect();
        let tgts: Vec<&[Token]> = all.iter().map(|p| p.1).collect();
        let xs = self.embed_rows(&mut t, Side::Source, &srcs)?;
        let xt = self.embed_rows(&mut t, Side::Target, &tgts)?;
        let fs = self.features_on(&mut t, xs, Side::Source, Mode::Train)?;
        let ft = self.features_on(&mut t, xt, Side::Target, Mode::Train)?;
        let logits = self.logits_on(&mut t, fs.features, ft.features)?;
        let mut labels = vec![REAL; real.len()];
        labels.extend(vec![FAKE; fake.len()]);
        let mut weights = vec![-1.0 / real.len() as f64; real.len()];
        weights.extend(vec![-1.0 / fake.len() as f64; fake.len()]);
        let loss = t.weighted_log_likelihood(logits, &[], &labels, &weights)?;
        let stats = [fs, ft].map(|side| {
            side.bn_nodes
                .iter()
                .map(|&n| t.batch_stats(n).expect("training-mode node").clone())
                .collect::<Vec<_>>()
        });
        let value = t.value(loss).data()[0];
        Ok((value, t.backward(loss)?, stats))
    }

    /// One optimizer step on the log-loss, then box clipping of every
    /// parameter and the running-statistics update. Returns the pre-step
    /// loss.
    pub fn disc_step(
        &mut self,
        real: &[(&[Token], &[Token])],
        fake: &[(&[Token], &[Token])],
        opt: &mut Optimizer,
        clip: f64,
    ) -> Result<f64> {
        let (loss, grads, stats) = self.loss(real, fake)?;
        self.store.zero_grads();
        self.store.accumulate(&grads)?;
        opt.step(&mut self.store)?;
        clip_to_box(&mut self.store, clip)?;
        let mom = self.cfg.bn_momentum;
        for (running, batch) in self.running.iter_mut().zip(stats) {
            for (r, b) in running.iter_mut().zip(batch) {
                for (rm, bm) in r.mean.iter_mut().zip(&b.mean) {
                    *rm = mom * *rm + (1.0 - mom) * bm;
                }
                for (rv, bv) in r.var.iter_mut().zip(&b.var) {
                    *rv = mom * *rv + (1.0 - mom) * bv;
                }
            }
        }
        Ok(loss)
    }

    /// Fraction of labeled pairs classified correctly in evaluation mode,
    /// with `p >= 0.5` read as real.
    pub fn accuracy(&self, pairs: &[(&[Token], &[Token])], labels: &[bool]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::Empty("labeled pair set"));
        }
        if pairs.len() != labels.len() {
            return Err(Error::invalid("one label per pair is required"));
        }
        let mut correct = 0usize;
        for (chunk, lab) in pairs.chunks(64).zip(labels.chunks(64)) {
            let p = self.predict_batch(chunk, Mode::Eval)?;
            correct += p.iter().zip(lab).filter(|(&p, &l)| (p >= 0.5) == l).count();
        }
        Ok(correct as f64 / pairs.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Discriminator {
        let cfg = DiscriminatorConfig {
            vocab_size: 8,
            embed_dim: 3,
            windows: vec![1, 2],
            kernels_per_window: 2,
            seq_len: 4,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        };
        Discriminator::new(cfg, 1).unwrap()
    }

    #[test]
    fn embed_pair_shapes_and_length_check() {
        let d = small();
        let (s, t) = d.embed_pair(&[4, 5, 0, 0], &[0, 0, 0, 0]).unwrap();
        assert_eq!(s.shape(), &[4, 3]);
        assert_eq!(t.row(0), t.row(3));
        assert!(d.embed_pair(&[4, 5], &[4, 5, 0, 0]).is_err());
    }

    #[test]
    fn zero_output_transform_gives_half() {
        let mut d = small();
        let v = d.v;
        d.params_mut().value_mut(v).fill(0.0);
        for mode in [Mode::Train, Mode::Eval] {
            assert_eq!(d.predict_prob(&[4, 5, 6, 0], &[5, 6, 0, 0], mode).unwrap(), 0.5);
        }
        let pairs: [(&[Token], &[Token]); 2] = [(&[4, 0, 0, 0], &[4, 0, 0, 0]), (&[5, 0, 0, 0], &[6, 0, 0, 0])];
        assert_eq!(d.accuracy(&pairs, &[true, false]).unwrap(), 0.5);
        let (loss, _, _) = d.loss(&pairs[..1], &pairs[1..]).unwrap();
        assert!((loss - 2.0 * core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn window_longer_than_sequence_is_rejected() {
        let mut cfg = DiscriminatorConfig::new(8, 3);
        cfg.windows = vec![4];
        assert!(Discriminator::new(cfg, 1).is_err());
    }

    #[test]
    fn step_clips_and_updates_running_stats() {
        let mut d = small();
        let mut opt = Optimizer::new(crate::numerics::OptimizerSettings::sgd(50.0));
        let real: [(&[Token], &[Token]); 1] = [(&[4, 5, 0, 0], &[4, 5, 2, 0])];
        let fake: [(&[Token], &[Token]); 1] = [(&[4, 5, 0, 0], &[6, 7, 2, 0])];
        d.disc_step(&real, &fake, &mut opt, 0.05).unwrap();
        assert!(d.params().max_abs_value() <= 0.05);
        assert_ne!(d.running_stats(Side::Target)[0].mean, vec![0.0; 2]);
        assert!(d.running_stats(Side::Target).iter().all(|s| s.var.iter().all(|&v| v >= 0.0)));
    }
}
