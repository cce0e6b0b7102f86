//! Corpus BLEU-1/2, DIST-1/2, mean length and repetition rate.
//!
//! Everything is generic over the token type so the same code scores id
//! sequences and word sequences.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Added to an order's match count when it has no matches at all.
pub const ZERO_MATCH_SMOOTHING: f64 = 0.1;

fn check_order(n: usize) -> Result<()> {
    if n == 1 || n == 2 {
        Ok(())
    } else {
        Err(Error::Contract(format!("n-gram order must be 1 or 2, got {n}")))
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

fn ngram_total(len: usize, n: usize) -> u64 {
    (len + 1).saturating_sub(n) as u64
}

/// Pooled clipped n-gram statistics for one order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub matches: u64,
    pub total: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    /// Index `k` holds order `k + 1`.
    pub orders: Vec<MatchCounts>,
    pub hyp_length: u64,
    pub ref_length: u64,
}

pub fn bleu_stats<T, H, R>(hypotheses: &[H], references: &[R], n: usize) -> Result<BleuStats>
where
    T: Eq + Hash,
    H: AsRef<[T]>,
    R: AsRef<[T]>,
{
    check_order(n)?;
    if hypotheses.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut stats = BleuStats {
        orders: vec![MatchCounts::default(); n],
        ..BleuStats::default()
    };
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (h.as_ref(), r.as_ref());
        stats.hyp_length += h.len() as u64;
        stats.ref_length += r.len() as u64;
        for (k, order) in stats.orders.iter_mut().enumerate() {
            let ref_counts = ngram_counts(r, k + 1);
            for (g, c) in ngram_counts(h, k + 1) {
                order.matches += c.min(ref_counts.get(g).copied().unwrap_or(0));
            }
            order.total += ngram_total(h.len(), k + 1);
        }
    }
    Ok(stats)
}

impl BleuStats {
    /// BLEU as a percentage. Zero when some order has no candidate n-grams.
    pub fn score(&self) -> f64 {
        if self.orders.iter().any(|o| o.total == 0) {
            return 0.0;
        }
        let n = self.orders.len() as f64;
        let log_p: f64 = self
            .orders
            .iter()
            .map(|o| {
                let num = if o.matches == 0 {
                    ZERO_MATCH_SMOOTHING
                } else {
                    o.matches as f64
                };
                (num / o.total as f64).ln()
            })
            .sum();
        let bp = (1.0 - self.ref_length as f64 / self.hyp_length as f64).exp().min(1.0);
        100.0 * bp * (log_p / n).exp()
    }
}

/// Corpus-level BLEU-n for `n` in {1, 2} with a single reference per hypothesis.
pub fn corpus_bleu<T, H, R>(hypotheses: &[H], references: &[R], n: usize) -> Result<f64>
where
    T: Eq + Hash,
    H: AsRef<[T]>,
    R: AsRef<[T]>,
{
    Ok(bleu_stats(hypotheses, references, n)?.score())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistinctCounts {
    pub distinct: u64,
    pub total: u64,
}

impl DistinctCounts {
    pub fn percentage(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.distinct as f64 / self.total as f64
        }
    }
}

pub fn distinct_counts<T: Eq + Hash, H: AsRef<[T]>>(hypotheses: &[H], n: usize) -> Result<DistinctCounts> {
    check_order(n)?;
    let mut seen = HashSet::new();
    let mut total = 0;
    for h in hypotheses {
        let h = h.as_ref();
        if h.len() >= n {
            for g in h.windows(n) {
                seen.insert(g);
                total += 1;
            }
        }
    }
    Ok(DistinctCounts {
        distinct: seen.len() as u64,
        total,
    })
}

/// Distinct n-grams over all n-grams, pooled over the corpus, as a percentage.
pub fn dist_n<T: Eq + Hash, H: AsRef<[T]>>(hypotheses: &[H], n: usize) -> Result<f64> {
    Ok(distinct_counts(hypotheses, n)?.percentage())
}

pub fn mean_length<T, H: AsRef<[T]>>(hypotheses: &[H]) -> f64 {
    if hypotheses.is_empty() {
        return 0.0;
    }
    let total: usize = hypotheses.iter().map(|h| h.as_ref().len()).sum();
    total as f64 / hypotheses.len() as f64
}

fn has_repeat<T: Eq + Hash>(tokens: &[T]) -> bool {
    let mut seen = HashSet::with_capacity(tokens.len());
    tokens.iter().any(|t| !seen.insert(t))
}

pub fn repeated_sentences<T: Eq + Hash, H: AsRef<[T]>>(hypotheses: &[H]) -> u64 {
    hypotheses.iter().filter(|h| has_repeat(h.as_ref())).count() as u64
}

/// Share of hypotheses that contain some token at least twice, as a percentage.
pub fn repetition_rate<T: Eq + Hash, H: AsRef<[T]>>(hypotheses: &[H]) -> f64 {
    if hypotheses.is_empty() {
        return 0.0;
    }
    100.0 * repeated_sentences(hypotheses) as f64 / hypotheses.len() as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub sentences: u64,
    pub hyp_tokens: u64,
    pub ref_tokens: u64,
    pub bleu1_matches: u64,
    pub bleu2_matches: u64,
    pub unigrams: u64,
    pub bigrams: u64,
    pub distinct_unigrams: u64,
    pub distinct_bigrams: u64,
    pub repeated_sentences: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub mean_length: f64,
    pub repetition_rate: f64,
    pub counts: EvalCounts,
}

/// Scores aligned hypotheses against references.
pub fn evaluate<T, H, R>(hypotheses: &[H], references: &[R]) -> Result<EvalReport>
where
    T: Eq + Hash,
    H: AsRef<[T]>,
    R: AsRef<[T]>,
{
    let b1 = bleu_stats(hypotheses, references, 1)?;
    let b2 = bleu_stats(hypotheses, references, 2)?;
    let d1 = distinct_counts(hypotheses, 1)?;
    let d2 = distinct_counts(hypotheses, 2)?;
    Ok(EvalReport {
        bleu1: b1.score(),
        bleu2: b2.score(),
        dist1: d1.percentage(),
        dist2: d2.percentage(),
        mean_length: mean_length(hypotheses),
        repetition_rate: repetition_rate(hypotheses),
        counts: EvalCounts {
            sentences: hypotheses.len() as u64,
            hyp_tokens: b1.hyp_length,
            ref_tokens: b1.ref_length,
            bleu1_matches: b1.orders[0].matches,
            bleu2_matches: b2.orders[1].matches,
            unigrams: d1.total,
            bigrams: d2.total,
            distinct_unigrams: d1.distinct,
            distinct_bigrams: d2.distinct,
            repeated_sentences: repeated_sentences(hypotheses),
        },
    })
}
