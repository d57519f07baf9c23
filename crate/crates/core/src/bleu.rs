//! Sentence- and corpus-level BLEU over token ids.
//!
//! EOS and PAD are removed before counting. Sentence BLEU keeps the
//! unigram precision raw and adds one to both counts for orders 2..=4, so
//! a candidate with no unigram overlap scores 0 while short candidates stay
//! bounded.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::corpus::{EOS, PAD};
use crate::{Error, Result, Token};

pub const MAX_ORDER: usize = 4;

/// Per-order candidate n-gram totals and clipped matches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NGramCounts {
    pub matches: [usize; MAX_ORDER],
    pub candidates: [usize; MAX_ORDER],
    pub cand_len: usize,
    pub ref_len: usize,
}

impl NGramCounts {
    fn add(&mut self, other: &NGramCounts) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.candidates[n] += other.candidates[n];
        }
        self.cand_len += other.cand_len;
        self.ref_len += other.ref_len;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BleuScore {
    pub value: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Smoothing {
    /// Raw precisions.
    None,
    /// `(m + 1) / (c + 1)` for orders 2 and up; unigrams stay raw.
    #[default]
    AddOneHigherOrders,
}

/// Drop EOS and PAD.
pub fn strip_specials(tokens: &[Token]) -> Vec<Token> {
    tokens.iter().copied().filter(|&t| t != EOS && t != PAD).collect()
}

fn ngram_multiset(tokens: &[Token], n: usize) -> BTreeMap<&[Token], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram statistics of already stripped sequences.
pub fn ngram_counts(candidate: &[Token], reference: &[Token]) -> NGramCounts {
    let mut counts = NGramCounts {
        cand_len: candidate.len(),
        ref_len: reference.len(),
        ..NGramCounts::default()
    };
    for n in 1..=MAX_ORDER {
        let cand = ngram_multiset(candidate, n);
        let refs = ngram_multiset(reference, n);
        counts.candidates[n - 1] = candidate.len().saturating_sub(n - 1);
        counts.matches[n - 1] = cand
            .iter()
            .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
            .sum();
    }
    counts
}

/// `min(1, exp(1 - r/c))`, with an empty candidate scoring 0.
pub fn brevity_penalty(cand_len: usize, ref_len: usize) -> Result<f64> {
    if ref_len == 0 {
        return Err(Error::Empty("reference"));
    }
    Ok(if cand_len == 0 {
        0.0
    } else if cand_len >= ref_len {
        1.0
    } else {
        libm::exp(1.0 - ref_len as f64 / cand_len as f64)
    })
}

/// Score from pooled counts.
pub fn score_counts(counts: &NGramCounts, smoothing: Smoothing) -> Result<BleuScore> {
    let bp = brevity_penalty(counts.cand_len, counts.ref_len)?;
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        let (m, c) = (counts.matches[n] as f64, counts.candidates[n] as f64);
        precisions[n] = match smoothing {
            Smoothing::AddOneHigherOrders if n > 0 => (m + 1.0) / (c + 1.0),
            _ if c == 0.0 => 0.0,
            _ => m / c,
        };
    }
    let value = if bp == 0.0 || precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|&p| libm::log(p)).sum::<f64>() / MAX_ORDER as f64;
        bp * libm::exp(log_mean)
    };
    Ok(BleuScore {
        value,
        precisions,
        brevity_penalty: bp,
    })
}

/// Smoothed sentence BLEU in `[0, 1]`.
pub fn sentence_bleu(candidate: &[Token], reference: &[Token]) -> Result<BleuScore> {
    sentence_bleu_with(candidate, reference, Smoothing::default())
}

pub fn sentence_bleu_with(candidate: &[Token], reference: &[Token], smoothing: Smoothing) -> Result<BleuScore> {
    let (c, r) = (strip_specials(candidate), strip_specials(reference));
    if r.is_empty() {
        return Err(Error::Empty("reference"));
    }
    score_counts(&ngram_counts(&c, &r), smoothing)
}

/// Unsmoothed corpus BLEU with counts and lengths pooled over all pairs.
pub fn corpus_bleu<C, R>(candidates: &[C], references: &[R]) -> Result<BleuScore>
where
    C: AsRef<[Token]>,
    R: AsRef<[Token]>,
{
    if candidates.len() != references.len() {
        return Err(Error::LineCountMismatch {
            source_lines: candidates.len(),
            target_lines: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut total = NGramCounts::default();
    for (c, r) in candidates.iter().zip(references) {
        let (c, r) = (strip_specials(c.as_ref()), strip_specials(r.as_ref()));
        if r.is_empty() {
            return Err(Error::Empty("reference"));
        }
        total.add(&ngram_counts(&c, &r));
    }
    score_counts(&total, Smoothing::None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn identical_sentence_scores_one() {
        let s = [5, 6, 7, 8, 9];
        assert_eq!(sentence_bleu(&s, &s).unwrap().value, 1.0);
    }

    #[test]
    fn no_overlap_scores_zero() {
        assert_eq!(sentence_bleu(&[5, 6, 7], &[8, 9, 10]).unwrap().value, 0.0);
    }

    #[test]
    fn one_token_substitution() {
        // p = 3/4, (2+1)/(3+1), (1+1)/(2+1), (0+1)/(1+1)
        let s = sentence_bleu(&[10, 11, 12, 13], &[10, 11, 12, 14]).unwrap();
        let expected = libm::pow(0.75 * 0.75 * (2.0 / 3.0) * 0.5, 0.25);
        assert!((s.value - expected).abs() < 1e-15);
        assert!((s.value - 0.6580).abs() < 5e-5);
        assert_eq!(s.brevity_penalty, 1.0);
    }

    #[test]
    fn brevity_penalty_cases() {
        assert_eq!(brevity_penalty(10, 10).unwrap(), 1.0);
        assert!((brevity_penalty(5, 10).unwrap() - libm::exp(-1.0)).abs() < 1e-15);
        assert_eq!(brevity_penalty(0, 10).unwrap(), 0.0);
        assert!(brevity_penalty(3, 0).is_err());
    }

    #[test]
    fn specials_are_ignored() {
        let a = sentence_bleu(&[5, 6, 7, 8, EOS, PAD], &[5, 6, 7, 8, EOS]).unwrap();
        assert_eq!(a.value, 1.0);
        assert_eq!(sentence_bleu(&[EOS], &[5, 6]).unwrap().value, 0.0);
        assert!(sentence_bleu(&[5], &[EOS]).is_err());
    }

    #[test]
    fn corpus_cases() {
        let refs = vec![vec![5, 6, 7, 8], vec![9, 10, 11, 12, 13]];
        assert_eq!(corpus_bleu(&refs, &refs).unwrap().value, 1.0);
        let none: Vec<Vec<Token>> = vec![];
        assert!(corpus_bleu(&none, &none).is_err());
        assert!(corpus_bleu(&refs[..1], &refs).is_err());
    }

    #[test]
    fn single_pair_corpus_is_unsmoothed_sentence_bleu() {
        let (c, r) = ([5, 6, 7, 8, 9, 11], [5, 6, 7, 8, 10, 11, 12]);
        let corpus = corpus_bleu(&[c], &[r]).unwrap().value;
        let raw = sentence_bleu_with(&c, &r, Smoothing::None).unwrap().value;
        let smoothed = sentence_bleu(&c, &r).unwrap().value;
        assert!(corpus > 0.0);
        assert_eq!(corpus, raw);
        assert!(smoothed > corpus);
    }
}
