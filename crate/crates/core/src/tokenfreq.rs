//! Tokenization, vocabulary construction and inverse-token-frequency weights.
//!
//! Token frequencies are counted over the training sentences with the start
//! and end markers counted once per sentence, like any other token. The ITF
//! weight of class `c` is `counts[c]^(-lambda)`, so frequent classes receive
//! small weights and rare classes weights close to one.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;

/// Surface forms of the special tokens, indexed by id.
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

const VOCAB_HEADER: &str = "#divergen-vocab v1";

/// Splits text into maximal letter/digit runs; every other non-whitespace
/// character becomes a token of its own.
pub fn tokenize(text: &str, lowercase: bool) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    if lowercase {
        for t in &mut tokens {
            *t = t.to_lowercase();
        }
    }
    tokens
}

/// Token to id bijection. Ids 0-3 are PAD, UNK, SOS and EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index_of: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 5 {
            return Err(Error::Config(format!(
                "vocabulary needs at least 5 entries, got {}",
                tokens.len()
            )));
        }
        let mut index_of = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index_of.insert(tok.clone(), id).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry `{tok}`")));
            }
        }
        for (id, s) in SPECIALS.iter().enumerate() {
            if tokens[id] != *s {
                return Err(Error::Config(format!("id {id} must hold special token {s}")));
            }
        }
        Ok(Vocab { tokens, index_of })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index_of.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: usize) -> bool {
        id <= EOS
    }

    /// Maps tokens to ids, unknown tokens to UNK, optionally wrapped in SOS/EOS.
    pub fn encode_ids<S: AsRef<str>>(&self, tokens: &[S], add_specials: bool) -> Vec<usize> {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        if add_specials {
            ids.push(SOS);
        }
        ids.extend(tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(UNK)));
        if add_specials {
            ids.push(EOS);
        }
        ids
    }

    /// Inverse of [`Vocab::encode_ids`] with all four specials removed.
    pub fn decode_ids(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| !Self::is_special(id))
            .filter_map(|&id| self.token(id).map(str::to_owned))
            .collect()
    }
}

/// Training-set occurrence count for every vocabulary id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyTable {
    counts: Vec<u64>,
}

impl FrequencyTable {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        if counts.len() < 5 {
            return Err(Error::Config("frequency table shorter than 5".into()));
        }
        Ok(FrequencyTable { counts })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Builds the vocabulary from the `max_size - 4` most frequent tokens (ties
/// by first occurrence) and counts every id over the corpus.
pub fn build_vocab<S: AsRef<str>>(
    corpus: &[Vec<S>],
    max_size: usize,
) -> Result<(Vocab, FrequencyTable)> {
    if max_size < 5 {
        return Err(Error::Config(format!("max vocabulary size {max_size} < 5")));
    }
    if corpus.is_empty() {
        return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
    }

    // (count, first occurrence) per distinct token
    let mut seen: HashMap<&str, (u64, usize)> = HashMap::new();
    let mut order: Vec<&str> = Vec::new();
    for sentence in corpus {
        for tok in sentence {
            let tok = tok.as_ref();
            if SPECIALS.contains(&tok) {
                return Err(Error::Input(format!("token `{tok}` collides with a special token")));
            }
            let next = order.len();
            let entry = seen.entry(tok).or_insert_with(|| {
                order.push(tok);
                (0, next)
            });
            entry.0 += 1;
        }
    }

    let mut ranked: Vec<(&str, u64, usize)> =
        order.iter().map(|&t| (t, seen[t].0, seen[t].1)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    ranked.truncate(max_size - 4);

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let mut counts = vec![0u64; 4];
    let mut kept = 0u64;
    for (tok, count, _) in &ranked {
        tokens.push(tok.to_string());
        counts.push(*count);
        kept += count;
    }
    let total: u64 = seen.values().map(|(c, _)| c).sum();
    let sentences = corpus.len() as u64;
    counts[SOS] = sentences;
    counts[EOS] = sentences;
    counts[UNK] = (total - kept).max(1);
    counts[PAD] = counts.iter().copied().max().unwrap_or(1);

    // fails when the corpus has no ordinary token at all
    let vocab = Vocab::from_tokens(tokens)?;
    Ok((vocab, FrequencyTable { counts }))
}

/// Per-class ITF weights `w_c = counts[c]^(-lambda)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    w: Vec<f64>,
    lambda: f64,
}

impl WeightVector {
    /// All-ones weights, i.e. plain softmax cross-entropy.
    pub fn uniform(len: usize) -> Self {
        WeightVector {
            w: vec![1.0; len],
            lambda: 0.0,
        }
    }

    pub fn from_values(w: Vec<f64>) -> Result<Self> {
        if let Some(bad) = w.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Config(format!("weights must be positive and finite, got {bad}")));
        }
        Ok(WeightVector { w, lambda: f64::NAN })
    }

    pub fn values(&self) -> &[f64] {
        &self.w
    }

    pub fn get(&self, id: usize) -> f64 {
        self.w[id]
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// Exponent used to derive the weights; NaN for hand-supplied vectors.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

pub fn compute_weights(freq: &FrequencyTable, lambda: f64) -> Result<WeightVector> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("ITF lambda must be >= 0, got {lambda}")));
    }
    if let Some(id) = freq.counts.iter().position(|&c| c == 0) {
        return Err(Error::Contract(format!("token id {id} has zero frequency")));
    }
    let w = freq
        .counts
        .iter()
        .map(|&c| weight_for_count(c, lambda))
        .collect();
    Ok(WeightVector { w, lambda })
}

/// `1 / count^lambda`; exactly 1.0 when lambda is zero.
pub fn weight_for_count(count: u64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 1.0;
    }
    1.0 / (count as f64).powf(lambda)
}

/// Renders the vocabulary file: a header line, then `<token>\t<id>\t<count>`.
pub fn format_vocab(vocab: &Vocab, freq: &FrequencyTable) -> String {
    let mut out = format!("{VOCAB_HEADER} size={} lambda-independent\n", vocab.len());
    for (id, tok) in vocab.tokens.iter().enumerate() {
        let _ = writeln!(out, "{tok}\t{id}\t{}", freq.counts[id]);
    }
    out
}

pub fn save_vocab(path: &Path, vocab: &Vocab, freq: &FrequencyTable) -> Result<()> {
    fs::write(path, format_vocab(vocab, freq)).map_err(|e| Error::io(path, e))
}

pub fn parse_vocab(text: &str, path: &Path) -> Result<(Vocab, FrequencyTable)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty vocabulary file"))?;
    let size: usize = header
        .strip_prefix(VOCAB_HEADER)
        .and_then(|rest| rest.trim().strip_suffix("lambda-independent"))
        .and_then(|rest| rest.trim().strip_prefix("size="))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::format(path, format!("bad header `{header}`")))?;

    let mut tokens = Vec::with_capacity(size);
    let mut counts = Vec::with_capacity(size);
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = || Error::format(path, format!("line {}: expected token, id, count", lineno + 2));
        if fields.len() != 3 {
            return Err(bad());
        }
        let id: usize = fields[1].parse().map_err(|_| bad())?;
        let count: u64 = fields[2].parse().map_err(|_| bad())?;
        if id != tokens.len() {
            return Err(Error::format(path, format!("line {}: id {id} out of order", lineno + 2)));
        }
        tokens.push(fields[0].to_string());
        counts.push(count);
    }
    if tokens.len() != size {
        return Err(Error::format(
            path,
            format!("header declares {size} tokens, found {}", tokens.len()),
        ));
    }
    let vocab = Vocab::from_tokens(tokens).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((vocab, FrequencyTable { counts }))
}

pub fn load_vocab(path: &Path) -> Result<(Vocab, FrequencyTable)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_vocab(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(sentences: &[&[&str]]) -> Vec<Vec<String>> {
        sentences
            .iter()
            .map(|s| s.iter().map(|t| t.to_string()).collect())
            .collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Hello, world!", true), ["hello", ",", "world", "!"]);
        assert!(tokenize("", true).is_empty());
        assert_eq!(tokenize("a  a b", false), ["a", "a", "b"]);
        assert_eq!(tokenize("don't 42x", false), ["don", "'", "t", "42x"]);
        assert_eq!(tokenize("Hello", false), ["Hello"]);
    }

    #[test]
    fn counts_with_per_sentence_specials() {
        let (vocab, freq) = build_vocab(&corpus(&[&["a", "a", "b"]]), 10).unwrap();
        assert_eq!(freq.count(vocab.id("a").unwrap()), 2);
        assert_eq!(freq.count(vocab.id("b").unwrap()), 1);
        assert_eq!(freq.count(SOS), 1);
        assert_eq!(freq.count(EOS), 1);
        assert_eq!(freq.count(UNK), 1);
        assert_eq!(freq.count(PAD), 2);

        let (_, freq) = build_vocab(&corpus(&[&["a"], &["b"]]), 10).unwrap();
        assert_eq!(freq.count(SOS), 2);
        assert_eq!(freq.count(EOS), 2);
    }

    #[test]
    fn truncation_sends_overflow_to_unk() {
        let (vocab, freq) = build_vocab(&corpus(&[&["a", "a", "b"]]), 5).unwrap();
        assert_eq!(vocab.len(), 5);
        assert_eq!(vocab.id("a"), Some(4));
        assert_eq!(vocab.id("b"), None);
        assert_eq!(freq.count(UNK), 1);
        assert_eq!(vocab.encode_ids(&["b"], false), vec![UNK]);

        let (_, freq) = build_vocab(&corpus(&[&["a", "a", "b", "c", "c", "b"]]), 5).unwrap();
        // a, b, c tie at 2; a wins by first occurrence
        assert_eq!(freq.count(UNK), 4);
    }

    #[test]
    fn ties_break_by_first_occurrence() {
        let (vocab, _) = build_vocab(&corpus(&[&["z", "y", "x", "y"]]), 10).unwrap();
        assert_eq!(vocab.tokens()[4..], ["y", "z", "x"]);
    }

    #[test]
    fn build_vocab_rejects_small_size_and_empty_corpus() {
        assert!(matches!(
            build_vocab(&corpus(&[&["a"]]), 4),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_vocab::<String>(&[], 10),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn weights_match_reported_examples() {
        for (count, expected) in [(1_096_434u64, 0.00384), (186, 0.124)] {
            let w = weight_for_count(count, 0.4);
            assert!(((w - expected) / expected).abs() < 0.005, "{count}: {w}");
        }
        let freq = FrequencyTable::new(vec![9, 1, 3, 3, 1_000_000]).unwrap();
        let w = compute_weights(&freq, 0.0).unwrap();
        assert!(w.values().iter().all(|&v| v == 1.0));
        assert!(matches!(compute_weights(&freq, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn encode_decode() {
        let (vocab, _) = build_vocab(&corpus(&[&["a", "b"]]), 10).unwrap();
        let a = vocab.id("a").unwrap();
        assert_eq!(vocab.encode_ids(&["a"], true), vec![SOS, a, EOS]);
        assert_eq!(vocab.encode_ids(&["zzz"], false), vec![UNK]);
        let s = ["b", "a", "b"];
        assert_eq!(vocab.decode_ids(&vocab.encode_ids(&s, true)), s);
    }

    #[test]
    fn vocab_file_round_trip() {
        let (vocab, freq) = build_vocab(&corpus(&[&["a", "b", "a"], &["c"]]), 10).unwrap();
        let text = format_vocab(&vocab, &freq);
        assert!(text.starts_with("#divergen-vocab v1 size=7 lambda-independent\n"));
        assert!(text.contains("a\t4\t2\n"));
        let (v2, f2) = parse_vocab(&text, Path::new("mem")).unwrap();
        assert_eq!(v2, vocab);
        assert_eq!(f2, freq);
        assert!(matches!(
            parse_vocab("garbage\n", Path::new("mem")),
            Err(Error::Format { .. })
        ));
    }

    proptest! {
        #[test]
        fn weights_are_antitone_and_bounded(a in 1u64..10_000_000, b in 1u64..10_000_000, lambda in 0.01f64..2.0) {
            let (wa, wb) = (weight_for_count(a, lambda), weight_for_count(b, lambda));
            prop_assert!(wa > 0.0 && wa <= 1.0);
            if a > b {
                prop_assert!(wa < wb);
            }
        }

        #[test]
        fn build_vocab_is_deterministic(
            sentences in proptest::collection::vec(proptest::collection::vec("[a-e]{1,2}", 1..6), 1..8),
            max_size in 5usize..12,
        ) {
            let (v1, f1) = build_vocab(&sentences, max_size).unwrap();
            let (v2, f2) = build_vocab(&sentences, max_size).unwrap();
            prop_assert_eq!(format_vocab(&v1, &f1), format_vocab(&v2, &f2));
            prop_assert!(f1.counts().iter().all(|&c| c >= 1));
            prop_assert_eq!(f1.count(PAD), *f1.counts().iter().max().unwrap());
        }
    }
}
