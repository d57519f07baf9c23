//! Vocabularies, synthetic parallel tasks, padding and batching.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::rng::RngStream;
use crate::{Error, Result, Token};

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const EOS: Token = 2;
pub const UNK: Token = 3;
/// Ids below this value are reserved.
pub const NUM_RESERVED: usize = 4;
pub const DEFAULT_T_MAX: usize = 20;

const RESERVED_NAMES: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Dense token inventory shared by both languages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, Token>,
}

impl Vocab {
    /// Reserved entries followed by `t4`, `t5`, ... up to `size - 1`.
    pub fn synthetic(size: usize) -> Result<Self> {
        if size <= NUM_RESERVED {
            return Err(Error::invalid(format!(
                "vocab size {size} leaves no room beyond the {NUM_RESERVED} reserved tokens"
            )));
        }
        Self::from_tokens((NUM_RESERVED..size).map(|i| format!("t{i}")))
    }

    /// Reserved entries followed by `tokens` in order.
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        Self::from_list(all)
    }

    /// Full list including the reserved entries, e.g. the lines of a
    /// `vocab.txt`.
    pub fn from_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_RESERVED || tokens[..NUM_RESERVED] != RESERVED_NAMES {
            return Err(Error::invalid("vocabulary must start with <pad> <s> </s> <unk>"));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i as Token).is_some() {
                return Err(Error::invalid(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<Token> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: Token) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Whitespace-separated tokens to ids; unknown tokens become UNK.
    pub fn encode(&self, line: &str) -> Vec<Token> {
        line.split_whitespace().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    /// Ids to a space-joined line, with EOS and PAD dropped.
    pub fn decode(&self, ids: &[Token]) -> String {
        let mut out = String::new();
        for &id in ids.iter().filter(|&&t| t != EOS && t != PAD) {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(self.token(id).unwrap_or(RESERVED_NAMES[UNK as usize]));
        }
        out
    }
}

/// Source and EOS-terminated target.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SentencePair {
    pub source: Vec<Token>,
    pub target: Vec<Token>,
}

impl SentencePair {
    pub fn new(source: Vec<Token>, target: Vec<Token>, t_max: usize) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::Empty("source sentence"));
        }
        if target.last() != Some(&EOS) {
            return Err(Error::MissingEos);
        }
        if source.contains(&PAD) || target.contains(&PAD) {
            return Err(Error::invalid("PAD inside a sentence"));
        }
        for len in [source.len(), target.len()] {
            if len > t_max {
                return Err(Error::TooLong { len, limit: t_max });
            }
        }
        Ok(Self { source, target })
    }

    /// Target without its final EOS.
    pub fn target_words(&self) -> &[Token] {
        &self.target[..self.target.len() - 1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    CipherReorder,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::CipherReorder => "cipher-reorder",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "cipher-reorder" => Ok(TaskKind::CipherReorder),
            _ => Err(Error::invalid(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub t_max: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::CipherReorder,
            vocab_size: 50,
            min_len: 5,
            max_len: 15,
            train_size: 10_000,
            dev_size: 500,
            test_size: 500,
            t_max: DEFAULT_T_MAX,
            seed: 1,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= NUM_RESERVED {
            return Err(Error::invalid(format!(
                "vocab size {} leaves no room beyond the reserved tokens",
                self.vocab_size
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::invalid("length range must satisfy 1 <= min <= max"));
        }
        if self.max_len + 1 > self.t_max {
            return Err(Error::invalid("max length must leave room for EOS within t_max"));
        }
        if self.train_size == 0 || self.dev_size == 0 || self.test_size == 0 {
            return Err(Error::invalid("split sizes must be positive"));
        }
        Ok(())
    }

    fn words(&self) -> usize {
        self.vocab_size - NUM_RESERVED
    }

    /// Number of distinct sources the length range admits, saturating.
    fn source_space(&self) -> usize {
        (self.min_len..=self.max_len)
            .map(|l| self.words().checked_pow(l as u32).unwrap_or(usize::MAX))
            .fold(0usize, |a, b| a.saturating_add(b))
    }
}

/// Token substitution table of the cipher task, as a function of the seed.
pub fn cipher_table(spec: &SyntheticTaskSpec) -> Vec<Token> {
    let mut words: Vec<Token> = (NUM_RESERVED as Token..spec.vocab_size as Token).collect();
    RngStream::derive(spec.seed, &[0xc1f3]).shuffle(&mut words);
    let mut table: Vec<Token> = (0..NUM_RESERVED as Token).collect();
    table.extend(words);
    table
}

/// Apply the task's source-to-target mapping (without EOS).
pub fn task_target(kind: TaskKind, source: &[Token], cipher: &[Token]) -> Vec<Token> {
    match kind {
        TaskKind::Copy => source.to_vec(),
        TaskKind::Reverse => source.iter().rev().copied().collect(),
        TaskKind::CipherReorder => {
            let mut out: Vec<Token> = source.iter().map(|&t| cipher[t as usize]).collect();
            for pair in out.chunks_exact_mut(2) {
                pair.swap(0, 1);
            }
            out
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<SentencePair>,
    pub dev: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
    pub vocab: Vocab,
}

/// Draw distinct sources and map them through the task. Splits never share
/// a source sentence.
pub fn generate_corpus(spec: &SyntheticTaskSpec) -> Result<Corpus> {
    spec.validate()?;
    let total = spec.train_size + spec.dev_size + spec.test_size;
    if spec.source_space() < total {
        return Err(Error::invalid(format!(
            "only {} distinct sources exist for {total} requested pairs",
            spec.source_space()
        )));
    }
    let vocab = Vocab::synthetic(spec.vocab_size)?;
    let cipher = cipher_table(spec);
    let mut rng = RngStream::derive(spec.seed, &[0x5eed]);
    let mut seen = BTreeSet::new();
    let mut pairs = Vec::with_capacity(total);
    while pairs.len() < total {
        let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
        let source: Vec<Token> = (0..len)
            .map(|_| (NUM_RESERVED + rng.below(spec.words())) as Token)
            .collect();
        if !seen.insert(source.clone()) {
            continue;
        }
        let mut target = task_target(spec.kind, &source, &cipher);
        target.push(EOS);
        pairs.push(SentencePair::new(source, target, spec.t_max)?);
    }
    let test = pairs.split_off(spec.train_size + spec.dev_size);
    let dev = pairs.split_off(spec.train_size);
    Ok(Corpus {
        train: pairs,
        dev,
        test,
        vocab,
    })
}

/// Pair padded to a fixed width, with true lengths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedPair {
    pub source: Vec<Token>,
    pub target: Vec<Token>,
    pub source_len: usize,
    pub target_len: usize,
}

/// Right-pad `tokens` with PAD to exactly `width`.
pub fn pad_tokens(tokens: &[Token], width: usize) -> Result<Vec<Token>> {
    if tokens.len() > width {
        return Err(Error::TooLong {
            len: tokens.len(),
            limit: width,
        });
    }
    let mut out = tokens.to_vec();
    out.resize(width, PAD);
    Ok(out)
}

pub fn pad_to_fixed(pair: &SentencePair, width: usize) -> Result<PaddedPair> {
    Ok(PaddedPair {
        source: pad_tokens(&pair.source, width)?,
        target: pad_tokens(&pair.target, width)?,
        source_len: pair.source.len(),
        target_len: pair.target.len(),
    })
}

/// `rows x width` id matrices with their lengths; position `j` of row `i`
/// is real when `j < len[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub width: usize,
    pub source: Vec<Vec<Token>>,
    pub target: Vec<Vec<Token>>,
    pub source_lens: Vec<usize>,
    pub target_lens: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[SentencePair], width: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut b = Batch {
            width,
            source: Vec::with_capacity(pairs.len()),
            target: Vec::with_capacity(pairs.len()),
            source_lens: Vec::with_capacity(pairs.len()),
            target_lens: Vec::with_capacity(pairs.len()),
        };
        for p in pairs {
            let padded = pad_to_fixed(p, width)?;
            b.source.push(padded.source);
            b.target.push(padded.target);
            b.source_lens.push(padded.source_len);
            b.target_lens.push(padded.target_len);
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn source_mask(&self, row: usize) -> Vec<bool> {
        (0..self.width).map(|j| j < self.source_lens[row]).collect()
    }

    pub fn target_mask(&self, row: usize) -> Vec<bool> {
        (0..self.width).map(|j| j < self.target_lens[row]).collect()
    }

    /// Unpadded pair of row `row`.
    pub fn pair(&self, row: usize) -> SentencePair {
        SentencePair {
            source: self.source[row][..self.source_lens[row]].to_vec(),
            target: self.target[row][..self.target_lens[row]].to_vec(),
        }
    }

    pub fn pairs(&self) -> Vec<SentencePair> {
        (0..self.len()).map(|i| self.pair(i)).collect()
    }
}

/// One epoch of batches in a seed-determined order; the last batch may be
/// smaller.
pub fn make_batches(pairs: &[SentencePair], batch_size: usize, width: usize, seed: u64) -> Result<Vec<Batch>> {
    if pairs.is_empty() {
        return Err(Error::Empty("pair list"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    RngStream::new(seed).shuffle(&mut order);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let selected: Vec<SentencePair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            Batch::from_pairs(&selected, width)
        })
        .collect()
}

/// Render pairs as line-aligned source and target texts. Targets are
/// written without their EOS.
pub fn format_parallel(pairs: &[SentencePair], vocab: &Vocab) -> (String, String) {
    let mut src = String::new();
    let mut tgt = String::new();
    for p in pairs {
        src.push_str(&vocab.decode(&p.source));
        src.push('\n');
        tgt.push_str(&vocab.decode(&p.target));
        tgt.push('\n');
    }
    (src, tgt)
}

/// Inverse of [`format_parallel`]: EOS is appended to every target line.
pub fn parse_parallel(source: &str, target: &str, vocab: &Vocab, t_max: usize) -> Result<Vec<SentencePair>> {
    let src: Vec<&str> = source.lines().collect();
    let tgt: Vec<&str> = target.lines().collect();
    if src.len() != tgt.len() {
        return Err(Error::LineCountMismatch {
            source_lines: src.len(),
            target_lines: tgt.len(),
        });
    }
    src.iter()
        .zip(&tgt)
        .map(|(s, t)| {
            let mut target = vocab.encode(t);
            target.push(EOS);
            SentencePair::new(vocab.encode(s), target, t_max)
        })
        .collect()
}

/// Vocabulary file contents: one token per line, reserved entries first.
pub fn format_vocab(vocab: &Vocab) -> String {
    let mut out = String::new();
    for t in vocab.tokens() {
        out.push_str(t);
        out.push('\n');
    }
    out
}

pub fn parse_vocab(text: &str) -> Result<Vocab> {
    Vocab::from_list(text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect())
}
