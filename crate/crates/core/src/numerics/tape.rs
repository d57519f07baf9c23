//! Append-only operation tape with a single reverse sweep.
//!
//! Nodes are pushed in evaluation order, so the node list is already a
//! topological order. Parameter leaves borrow their values from a
//! [`ParamStore`]; several tapes may read the same store at once.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use super::{ensure_finite, Gradients, ParamId, ParamStore, Tensor};
use crate::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Node handle, valid only on the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u32,
    idx: u32,
}

/// Per-column statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Log(Var),
    Softmax(Var),
    WeightedLogLik {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        seq_len: usize,
        window: usize,
    },
    MaxOverTime {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        stats: Option<BatchStats>,
    },
    Sum(Var),
    MeanRows(Var),
    GruCell {
        gx: Var,
        h: Var,
        w: Var,
        b: Var,
        r: Vec<f64>,
        z: Vec<f64>,
        n: Vec<f64>,
        gh_n: Vec<f64>,
    },
    AdditiveScores {
        q: Var,
        keys: Var,
        v: Var,
        act: Vec<f64>,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Tape<'s> {
    id: u32,
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `out[m x n] += a[m x k] * b[k x n]`, row by row.
fn matmul_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Masked, max-shifted softmax of one row. Masked entries become exactly 0.
pub(crate) fn softmax_row(row: &[f64], allowed: impl Fn(usize) -> bool, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    let mut total = 0.0;
    for (j, (&v, o)) in row.iter().zip(out.iter_mut()).enumerate() {
        *o = if allowed(j) { libm::exp(v - max) } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Log-softmax of one row over the allowed entries; banned entries are
/// `-inf` (only ever used outside the tape).
pub fn log_softmax_masked(row: &[f64], banned: &[usize]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if !banned.contains(&j) && v > max {
            max = v;
        }
    }
    let mut total = 0.0;
    for (j, &v) in row.iter().enumerate() {
        if !banned.contains(&j) {
            total += libm::exp(v - max);
        }
    }
    let lse = max + libm::log(total);
    row.iter()
        .enumerate()
        .map(|(j, &v)| if banned.contains(&j) { f64::NEG_INFINITY } else { v - lse })
        .collect()
}

impl<'s> Tape<'s> {
    /// Tape whose parameter leaves read from `store`.
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            store: Some(store),
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    /// Tape without parameters; only constants can be recorded.
    pub fn detached() -> Tape<'static> {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            store: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape == self.id && (v.idx as usize) < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::ForeignVar)
        }
    }

    pub fn owns(&self, v: Var) -> bool {
        self.check(v).is_ok()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert!(self.owns(v), "variable from another tape");
        let node = &self.nodes[v.idx as usize];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.expect("param tape").value(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var { tape: self.id, idx }
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        ensure_finite(name, value.data())?;
        Ok(self.push(value, op))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var { tape: self.id, idx };
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Statistics recorded by a training-mode [`Tape::batch_norm`] node.
    pub fn batch_stats(&self, v: Var) -> Option<&BatchStats> {
        self.check(v).ok()?;
        match &self.nodes[v.idx as usize].op {
            Op::BatchNorm { stats, .. } => stats.as_ref(),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2();
        let (k2, n) = tb.dims2();
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), m, k, tb.data(), n, &mut out);
        self.push_checked("matmul", Tensor::matrix(m, n, out), Op::MatMul(a, b))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_checked(name, t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[m x n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, n) = ta.dims2();
        if tb.numel() != n {
            return Err(mismatch("add_row", ta, tb));
        }
        let mut data = ta.data().to_vec();
        for r in 0..m {
            for (o, &bv) in data[r * n..(r + 1) * n].iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_checked("add_row", t, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|v| v * c).collect())?;
        self.push_checked("scale", t, Op::Scale(a, c))
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(a)?;
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&v| f(v)).collect())?;
        self.push_checked(name, t, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, libm::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map("log", a, libm::log, Op::Log(a))
    }

    /// Row-wise softmax. Columns with `mask[j] == false` get probability 0.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        self.check(a)?;
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        if let Some(mask) = mask {
            if mask.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "softmax",
                    lhs: ta.shape().to_vec(),
                    rhs: vec![mask.len()],
                });
            }
            if !mask.iter().any(|&b| b) {
                return Err(Error::invalid("softmax over a fully masked row"));
            }
        }
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            softmax_row(
                ta.row(r),
                |j| mask.is_none_or(|mk| mk[j]),
                &mut out[r * n..(r + 1) * n],
            );
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        self.push_checked("softmax", t, Op::Softmax(a))
    }

    /// `sum_r weights[r] * log softmax(logits[r])[targets[r]]` as a scalar,
    /// with the `banned` columns excluded from every softmax.
    pub fn weighted_log_likelihood(
        &mut self,
        logits: Var,
        banned: &[usize],
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        self.check(logits)?;
        let tl = self.value(logits);
        let (m, n) = tl.dims2();
        if targets.len() != m || weights.len() != m {
            return Err(Error::ShapeMismatch {
                op: "weighted_log_likelihood",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len(), weights.len()],
            });
        }
        let mut probs = vec![0.0; m * n];
        let mut total = 0.0;
        for r in 0..m {
            let t = targets[r];
            if t >= n || banned.contains(&t) {
                return Err(Error::invalid("target column is out of range or banned"));
            }
            let row = tl.row(r);
            softmax_row(row, |j| !banned.contains(&j), &mut probs[r * n..(r + 1) * n]);
            let lp = log_softmax_masked(row, banned)[t];
            total += weights[r] * lp;
        }
        let op = Op::WeightedLogLik {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            probs,
        };
        self.push_checked("weighted_log_likelihood", Tensor::scalar(total), op)
    }

    /// Mean token cross-entropy of `logits` rows against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, banned: &[usize], targets: &[usize]) -> Result<Var> {
        let w = -1.0 / targets.len().max(1) as f64;
        let weights = vec![w; targets.len()];
        self.weighted_log_likelihood(logits, banned, targets, &weights)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_cols"));
        }
        for &p in parts {
            self.check(p)?;
        }
        let rows = self.value(parts[0]).dims2().0;
        let mut total_cols = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if r != rows {
                return Err(mismatch("concat_cols", self.value(parts[0]), self.value(p)));
            }
            total_cols += c;
        }
        let mut out = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push_checked("concat_cols", Tensor::matrix(rows, total_cols, out), Op::ConcatCols(parts.to_vec()))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("stack_rows"));
        }
        for &p in parts {
            self.check(p)?;
        }
        let cols = self.value(parts[0]).dims2().1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.dims2();
            if c != cols {
                return Err(mismatch("stack_rows", self.value(parts[0]), t));
            }
            out.extend_from_slice(t.data());
            rows += r;
        }
        self.push_checked("stack_rows", Tensor::matrix(rows, cols, out), Op::StackRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let (m, n) = t.dims2();
        if len == 0 || start + len > m {
            return Err(Error::invalid("row slice out of range"));
        }
        let data = t.data()[start * n..(start + len) * n].to_vec();
        self.push_checked("slice_rows", Tensor::matrix(len, n, data), Op::SliceRows { x, start })
    }

    /// Gather rows of `table` (`vocab x dim`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check(table)?;
        if ids.is_empty() {
            return Err(Error::Empty("embedding ids"));
        }
        let t = self.value(table);
        let (v, d) = t.dims2();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::invalid("embedding id out of range"));
            }
            out.extend_from_slice(t.row(id));
        }
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        self.push_checked("embedding", Tensor::matrix(ids.len(), d, out), op)
    }

    /// Convolution over time. `x` stacks `batch` sequences of `seq_len` rows
    /// (`batch*seq_len x dim`), `w` is `(window*dim) x kernels`, `b` has
    /// `kernels` entries. Output: `batch*(seq_len-window+1) x kernels`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, seq_len: usize, window: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (rows, dim) = tx.dims2();
        let (wr, kernels) = tw.dims2();
        if window == 0 || window > seq_len {
            return Err(Error::invalid("convolution window larger than sequence"));
        }
        if rows % seq_len != 0 || wr != window * dim || tb.numel() != kernels {
            return Err(mismatch("conv1d", tx, tw));
        }
        let batch = rows / seq_len;
        let positions = seq_len - window + 1;
        let mut out = vec![0.0; batch * positions * kernels];
        for s in 0..batch {
            for i in 0..positions {
                let start = (s * seq_len + i) * dim;
                let patch = &tx.data()[start..start + window * dim];
                let o = (s * positions + i) * kernels;
                let out_row = &mut out[o..o + kernels];
                out_row.copy_from_slice(tb.data());
                matmul_acc(patch, 1, window * dim, tw.data(), kernels, out_row);
            }
        }
        let op = Op::Conv1d {
            x,
            w,
            b,
            seq_len,
            window,
        };
        self.push_checked("conv1d", Tensor::matrix(batch * positions, kernels, out), op)
    }

    /// Column-wise maximum within each of `segments` equal row blocks.
    /// Ties resolve to the earliest row.
    pub fn max_over_time(&mut self, x: Var, segments: usize) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let (rows, cols) = t.dims2();
        if segments == 0 || rows % segments != 0 {
            return Err(Error::invalid("rows not divisible into segments"));
        }
        let len = rows / segments;
        let mut out = vec![0.0; segments * cols];
        let mut argmax = vec![0; segments * cols];
        for s in 0..segments {
            for c in 0..cols {
                let mut best = s * len;
                for r in s * len + 1..(s + 1) * len {
                    if t.get2(r, c) > t.get2(best, c) {
                        best = r;
                    }
                }
                out[s * cols + c] = t.get2(best, c);
                argmax[s * cols + c] = best;
            }
        }
        self.push_checked("max_over_time", Tensor::matrix(segments, cols, out), Op::MaxOverTime { x, argmax })
    }

    /// Batch normalization over the rows of `x` with batch statistics
    /// (biased variance). The statistics are kept on the node.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let (rows, cols) = t.dims2();
        let mut mean = vec![0.0; cols];
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(t.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        for r in 0..rows {
            for ((s, v), m) in var.iter_mut().zip(t.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= rows as f64);
        let stats = BatchStats { mean, var };
        self.normalize("batch_norm", x, gamma, beta, &stats, eps, true)
    }

    /// Batch normalization with fixed statistics (evaluation mode).
    pub fn batch_norm_fixed(&mut self, x: Var, gamma: Var, beta: Var, stats: &BatchStats, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.normalize("batch_norm_fixed", x, gamma, beta, stats, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        name: &'static str,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &BatchStats,
        eps: f64,
        batch_mode: bool,
    ) -> Result<Var> {
        self.check(gamma)?;
        self.check(beta)?;
        let (t, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, cols) = t.dims2();
        if tg.numel() != cols || tb.numel() != cols || stats.mean.len() != cols || stats.var.len() != cols {
            return Err(mismatch(name, t, tg));
        }
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let mut xhat = vec![0.0; rows * cols];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let h = (t.get2(r, c) - stats.mean[c]) * inv_std[c];
                xhat[r * cols + c] = h;
                out[r * cols + c] = tg.data()[c] * h + tb.data()[c];
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            stats: batch_mode.then(|| stats.clone()),
        };
        self.push_checked(name, Tensor::matrix(rows, cols, out), op)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).data().iter().sum();
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let (m, n) = t.dims2();
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        self.push_checked("mean_rows", Tensor::matrix(1, n, out), Op::MeanRows(a))
    }

    /// Gated recurrent unit update.
    ///
    /// `gx` is the input projection `x W_x + b_x` (`rows x 3h`, gate order
    /// reset, update, candidate), `h` the previous state (`rows x h`), `w`
    /// the recurrent matrix (`h x 3h`) and `b` its bias (`3h`):
    ///
    /// ```text
    /// r = sigmoid(gx_r + gh_r)      gh = h w + b
    /// z = sigmoid(gx_z + gh_z)
    /// n = tanh(gx_n + r * gh_n)
    /// h' = (1 - z) * n + z * h
    /// ```
    pub fn gru_cell(&mut self, gx: Var, h: Var, w: Var, b: Var) -> Result<Var> {
        for v in [gx, h, w, b] {
            self.check(v)?;
        }
        let (tgx, th, tw, tb) = (self.value(gx), self.value(h), self.value(w), self.value(b));
        let (rows, hid) = th.dims2();
        if tgx.dims2() != (rows, 3 * hid) || tw.dims2() != (hid, 3 * hid) || tb.numel() != 3 * hid {
            return Err(mismatch("gru_cell", tgx, th));
        }
        let mut gh = vec![0.0; rows * 3 * hid];
        for r in 0..rows {
            gh[r * 3 * hid..(r + 1) * 3 * hid].copy_from_slice(tb.data());
        }
        matmul_acc(th.data(), rows, hid, tw.data(), 3 * hid, &mut gh);
        let mut rg = vec![0.0; rows * hid];
        let mut zg = vec![0.0; rows * hid];
        let mut ng = vec![0.0; rows * hid];
        let mut gh_n = vec![0.0; rows * hid];
        let mut out = vec![0.0; rows * hid];
        for r in 0..rows {
            let gxr = tgx.row(r);
            let ghr = &gh[r * 3 * hid..(r + 1) * 3 * hid];
            for j in 0..hid {
                let i = r * hid + j;
                let rv = sigmoid(gxr[j] + ghr[j]);
                let zv = sigmoid(gxr[hid + j] + ghr[hid + j]);
                let nv = libm::tanh(gxr[2 * hid + j] + rv * ghr[2 * hid + j]);
                rg[i] = rv;
                zg[i] = zv;
                ng[i] = nv;
                gh_n[i] = ghr[2 * hid + j];
                out[i] = (1.0 - zv) * nv + zv * th.data()[i];
            }
        }
        let op = Op::GruCell {
            gx,
            h,
            w,
            b,
            r: rg,
            z: zg,
            n: ng,
            gh_n,
        };
        self.push_checked("gru_cell", Tensor::matrix(rows, hid, out), op)
    }

    /// Additive attention energies:
    /// `out[r, j] = sum_c v[c] * tanh(q[r, c] + keys[j, c])`.
    pub fn additive_scores(&mut self, q: Var, keys: Var, v: Var) -> Result<Var> {
        for x in [q, keys, v] {
            self.check(x)?;
        }
        let (tq, tk, tv) = (self.value(q), self.value(keys), self.value(v));
        let (rows, a) = tq.dims2();
        let (m, a2) = tk.dims2();
        if a != a2 || tv.numel() != a {
            return Err(mismatch("additive_scores", tq, tk));
        }
        let mut act = vec![0.0; rows * m * a];
        let mut out = vec![0.0; rows * m];
        for r in 0..rows {
            let qr = tq.row(r);
            for j in 0..m {
                let kj = tk.row(j);
                let base = (r * m + j) * a;
                let mut s = 0.0;
                for c in 0..a {
                    let t = libm::tanh(qr[c] + kj[c]);
                    act[base + c] = t;
                    s += tv.data()[c] * t;
                }
                out[r * m + j] = s;
            }
        }
        let op = Op::AdditiveScores { q, keys, v, act };
        self.push_checked("additive_scores", Tensor::matrix(rows, m, out), op)
    }

    /// Reverse sweep from the scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut out = match self.store {
            Some(s) => Gradients::zeros_like(s),
            None => Gradients { grads: Vec::new() },
        };
        let n = loss.idx as usize + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.idx as usize] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn backward_node(
        &self,
        i: usize,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let y = || node.value.as_ref().expect("computed node");
        let val = |v: Var| self.value(v);
        let mut acc = |v: Var, t: Tensor| {
            let slot = &mut grads[v.idx as usize];
            match slot {
                Some(a) => a.add_assign(&t),
                None => *slot = Some(t),
            }
        };
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.value(v).shape().to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.add_to(*id, g),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = ta.dims2();
                let n = tb.dims2().1;
                let gd = g.data();
                let mut da = vec![0.0; m * k];
                for r in 0..m {
                    let grow = &gd[r * n..(r + 1) * n];
                    for p in 0..k {
                        da[r * k + p] = dot(grow, &tb.data()[p * n..(p + 1) * n]);
                    }
                }
                let mut db = vec![0.0; k * n];
                for r in 0..m {
                    let grow = &gd[r * n..(r + 1) * n];
                    for p in 0..k {
                        let av = ta.data()[r * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *d += av * gv;
                        }
                    }
                }
                let (da, db) = (like(*a, da)?, like(*b, db)?);
                acc(*a, da);
                acc(*b, db);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Sub(a, b) => {
                let mut neg = g.clone();
                neg.scale(-1.0);
                acc(*a, g);
                acc(*b, neg);
            }
            Op::Mul(a, b) => {
                let da = g.data().iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                let db = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                let (da, db) = (like(*a, da)?, like(*b, db)?);
                acc(*a, da);
                acc(*b, db);
            }
            Op::AddRow(a, b) => {
                let n = val(*b).numel();
                let mut db = vec![0.0; n];
                for chunk in g.data().chunks(n) {
                    for (d, v) in db.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                let db = like(*b, db)?;
                acc(*a, g);
                acc(*b, db);
            }
            Op::Scale(a, c) => {
                let mut da = g;
                da.scale(*c);
                acc(*a, da);
            }
            Op::Sigmoid(a) => {
                let d = g.data().iter().zip(y().data()).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                acc(*a, like(*a, d)?);
            }
            Op::Tanh(a) => {
                let d = g.data().iter().zip(y().data()).map(|(gv, t)| gv * (1.0 - t * t)).collect();
                acc(*a, like(*a, d)?);
            }
            Op::Relu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(y().data())
                    .map(|(gv, o)| if *o > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc(*a, like(*a, d)?);
            }
            Op::Log(a) => {
                let d = g.data().iter().zip(val(*a).data()).map(|(gv, x)| gv / x).collect();
                acc(*a, like(*a, d)?);
            }
            Op::Softmax(a) => {
                let yv = y();
                let (m, n) = yv.dims2();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    let yr = yv.row(r);
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let s = dot(gr, yr);
                    for j in 0..n {
                        d[r * n + j] = yr[j] * (gr[j] - s);
                    }
                }
                acc(*a, like(*a, d)?);
            }
            Op::WeightedLogLik {
                logits,
                targets,
                weights,
                probs,
            } => {
                let gs = g.data()[0];
                let n = val(*logits).dims2().1;
                let mut d: Vec<f64> = probs.iter().map(|p| -p).collect();
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    d[r * n + t] += 1.0;
                    for v in &mut d[r * n..(r + 1) * n] {
                        *v *= gs * w;
                    }
                }
                acc(*logits, like(*logits, d)?);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = g.dims2();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).dims2().1;
                    let mut d = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                    }
                    offset += c;
                    acc(p, like(p, d)?);
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    let d = g.data()[offset..offset + len].to_vec();
                    offset += len;
                    acc(p, like(p, d)?);
                }
            }
            Op::SliceRows { x, start } => {
                let n = val(*x).dims2().1;
                let mut d = vec![0.0; val(*x).numel()];
                d[start * n..start * n + g.numel()].copy_from_slice(g.data());
                acc(*x, like(*x, d)?);
            }
            Op::Embedding { table, ids } => {
                let (_, dim) = val(*table).dims2();
                let mut d = vec![0.0; val(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in d[id * dim..(id + 1) * dim].iter_mut().zip(&g.data()[r * dim..(r + 1) * dim]) {
                        *o += v;
                    }
                }
                acc(*table, like(*table, d)?);
            }
            Op::Conv1d {
                x,
                w,
                b,
                seq_len,
                window,
            } => {
                let (tx, tw) = (val(*x), val(*w));
                let (rows, dim) = tx.dims2();
                let kernels = tw.dims2().1;
                let batch = rows / seq_len;
                let positions = seq_len - window + 1;
                let width = window * dim;
                let mut dx = vec![0.0; tx.numel()];
                let mut dw = vec![0.0; tw.numel()];
                let mut db = vec![0.0; kernels];
                for s in 0..batch {
                    for i in 0..positions {
                        let o = (s * positions + i) * kernels;
                        let grow = &g.data()[o..o + kernels];
                        let start = (s * seq_len + i) * dim;
                        let patch = &tx.data()[start..start + width];
                        for (d, v) in db.iter_mut().zip(grow) {
                            *d += v;
                        }
                        for p in 0..width {
                            let wrow = &tw.data()[p * kernels..(p + 1) * kernels];
                            dx[start + p] += dot(grow, wrow);
                            let pv = patch[p];
                            if pv != 0.0 {
                                for (d, gv) in dw[p * kernels..(p + 1) * kernels].iter_mut().zip(grow) {
                                    *d += pv * gv;
                                }
                            }
                        }
                    }
                }
                let (dx, dw, db) = (like(*x, dx)?, like(*w, dw)?, like(*b, db)?);
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::MaxOverTime { x, argmax } => {
                let cols = val(*x).dims2().1;
                let mut d = vec![0.0; val(*x).numel()];
                for (k, &row) in argmax.iter().enumerate() {
                    d[row * cols + k % cols] += g.data()[k];
                }
                acc(*x, like(*x, d)?);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                stats,
            } => {
                let tg = val(*gamma);
                let (rows, cols) = val(*x).dims2();
                let gd = g.data();
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dgamma[c] += gd[r * cols + c] * xhat[r * cols + c];
                        dbeta[c] += gd[r * cols + c];
                    }
                }
                let mut dx = vec![0.0; rows * cols];
                if stats.is_some() {
                    let nf = rows as f64;
                    for c in 0..cols {
                        let gam = tg.data()[c];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for r in 0..rows {
                            let dh = gd[r * cols + c] * gam;
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * cols + c];
                        }
                        for r in 0..rows {
                            let dh = gd[r * cols + c] * gam;
                            dx[r * cols + c] =
                                inv_std[c] / nf * (nf * dh - sum_dh - xhat[r * cols + c] * sum_dh_h);
                        }
                    }
                } else {
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] = gd[r * cols + c] * tg.data()[c] * inv_std[c];
                        }
                    }
                }
                let (dx, dg, dbt) = (like(*x, dx)?, like(*gamma, dgamma)?, like(*beta, dbeta)?);
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, dbt);
            }
            Op::Sum(a) => {
                let t = Tensor::full(val(*a).shape(), g.data()[0]);
                acc(*a, t);
            }
            Op::MeanRows(a) => {
                let (m, n) = val(*a).dims2();
                let mut d = Vec::with_capacity(m * n);
                for _ in 0..m {
                    d.extend(g.data().iter().map(|v| v / m as f64));
                }
                acc(*a, like(*a, d)?);
            }
            Op::GruCell {
                gx,
                h,
                w,
                b,
                r: rg,
                z: zg,
                n: ng,
                gh_n,
            } => {
                let (th, tw) = (val(*h), val(*w));
                let (rows, hid) = th.dims2();
                let gd = g.data();
                let mut dgx = vec![0.0; rows * 3 * hid];
                let mut dh = vec![0.0; rows * hid];
                for row in 0..rows {
                    for j in 0..hid {
                        let i = row * hid + j;
                        let (rv, zv, nv) = (rg[i], zg[i], ng[i]);
                        let go = gd[i];
                        let dz = go * (th.data()[i] - nv);
                        let dn = go * (1.0 - zv);
                        dh[i] = go * zv;
                        let dn_pre = dn * (1.0 - nv * nv);
                        let dr = dn_pre * gh_n[i];
                        let base = row * 3 * hid;
                        dgx[base + j] = dr * rv * (1.0 - rv);
                        dgx[base + hid + j] = dz * zv * (1.0 - zv);
                        dgx[base + 2 * hid + j] = dn_pre;
                    }
                }
                // gh gradient differs from gx gradient only in the candidate block.
                let mut dgh = dgx.clone();
                for row in 0..rows {
                    for j in 0..hid {
                        dgh[row * 3 * hid + 2 * hid + j] *= rg[row * hid + j];
                    }
                }
                let mut dw = vec![0.0; hid * 3 * hid];
                let mut db = vec![0.0; 3 * hid];
                for row in 0..rows {
                    let grow = &dgh[row * 3 * hid..(row + 1) * 3 * hid];
                    for (d, v) in db.iter_mut().zip(grow) {
                        *d += v;
                    }
                    for p in 0..hid {
                        dh[row * hid + p] += dot(grow, &tw.data()[p * 3 * hid..(p + 1) * 3 * hid]);
                        let hv = th.data()[row * hid + p];
                        if hv != 0.0 {
                            for (d, gv) in dw[p * 3 * hid..(p + 1) * 3 * hid].iter_mut().zip(grow) {
                                *d += hv * gv;
                            }
                        }
                    }
                }
                let (dgx, dh, dw, db) = (like(*gx, dgx)?, like(*h, dh)?, like(*w, dw)?, like(*b, db)?);
                acc(*gx, dgx);
                acc(*h, dh);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::AdditiveScores { q, keys, v, act } => {
                let (tq, tk, tv) = (val(*q), val(*keys), val(*v));
                let (rows, a) = tq.dims2();
                let m = tk.dims2().0;
                let mut dq = vec![0.0; rows * a];
                let mut dk = vec![0.0; m * a];
                let mut dv = vec![0.0; a];
                for r in 0..rows {
                    for j in 0..m {
                        let go = g.data()[r * m + j];
                        if go == 0.0 {
                            continue;
                        }
                        let base = (r * m + j) * a;
                        for c in 0..a {
                            let t = act[base + c];
                            dv[c] += go * t;
                            let pre = go * tv.data()[c] * (1.0 - t * t);
                            dq[r * a + c] += pre;
                            dk[j * a + c] += pre;
                        }
                    }
                }
                let (dq, dk, dv) = (like(*q, dq)?, like(*keys, dk)?, like(*v, dv)?);
                acc(*q, dq);
                acc(*keys, dk);
                acc(*v, dv);
            }
        }
        Ok(())
    }
}
