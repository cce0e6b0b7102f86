//! Corpus ingestion, the synthetic corpus, and the subcommand drivers.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::objectives::TrainingPair;
use crate::rng;
use crate::tokenfreq::{tokenize, Vocab};

mod run;

pub use run::*;

/// Fraction of malformed non-blank lines above which a corpus is rejected.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;

/// Consecutive turns of one conversation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    turns: Vec<String>,
}

impl Episode {
    pub fn new(turns: Vec<String>) -> Result<Self> {
        if turns.len() < 2 {
            return Err(Error::Input(format!("episode needs at least 2 turns, got {}", turns.len())));
        }
        if turns.iter().any(|t| t.trim().is_empty()) {
            return Err(Error::Input("episode has an empty turn".into()));
        }
        Ok(Episode { turns })
    }

    pub fn turns(&self) -> &[String] {
        &self.turns
    }

    /// Adjacent `(previous, next)` turns; `k` turns give `k - 1` pairs.
    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.turns.windows(2).map(|w| (w[0].as_str(), w[1].as_str()))
    }

    pub fn to_line(&self) -> String {
        self.turns.join("\t")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub episodes: Vec<Episode>,
    pub blank_lines: usize,
    /// 1-based line numbers of lines with fewer than two usable turns.
    pub malformed_lines: Vec<usize>,
}

/// One episode per line, turns separated by TAB.
pub fn parse_corpus(text: &str, path: &Path) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    let mut content_lines = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            corpus.blank_lines += 1;
            continue;
        }
        content_lines += 1;
        let turns: Vec<String> = line.split('\t').map(|t| t.trim().to_string()).collect();
        match Episode::new(turns) {
            Ok(ep) => corpus.episodes.push(ep),
            Err(_) => corpus.malformed_lines.push(i + 1),
        }
    }
    let bad = corpus.malformed_lines.len();
    if bad as f64 > MAX_MALFORMED_FRACTION * content_lines as f64 {
        let shown: Vec<String> = corpus.malformed_lines.iter().take(10).map(usize::to_string).collect();
        return Err(Error::format(
            path,
            format!("{bad} of {content_lines} lines are malformed (lines {})", shown.join(", ")),
        ));
    }
    Ok(corpus)
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "corpus is not valid UTF-8"))?;
    parse_corpus(&text, path)
}

pub fn format_corpus(episodes: &[Episode]) -> String {
    let mut out = String::new();
    for ep in episodes {
        out.push_str(&ep.to_line());
        out.push('\n');
    }
    out
}

/// Lowercased tokens of every turn, in corpus order.
pub fn corpus_sentences(episodes: &[Episode]) -> Vec<Vec<String>> {
    episodes
        .iter()
        .flat_map(|ep| ep.turns().iter().map(|t| tokenize(t, true)))
        .collect()
}

/// Text pairs from adjacent turns.
pub fn text_pairs(episodes: &[Episode]) -> Vec<(String, String)> {
    episodes
        .iter()
        .flat_map(|ep| ep.pairs().map(|(a, b)| (a.to_string(), b.to_string())))
        .collect()
}

/// Id pairs from adjacent turns, each side cut to `max_len - 2` tokens.
pub fn make_pairs(episodes: &[Episode], vocab: &Vocab, max_len: usize) -> Vec<TrainingPair> {
    let keep = max_len.saturating_sub(2).max(1);
    text_pairs(episodes)
        .iter()
        .map(|(s, t)| {
            let mut source = vocab.encode_ids(&tokenize(s, true), false);
            let mut target = vocab.encode_ids(&tokenize(t, true), false);
            source.truncate(keep);
            target.truncate(keep);
            TrainingPair { source, target }
        })
        .collect()
}

/// Source words are `s0..`, specific response words `r0..`, and the generic
/// response uses neither.
pub const SYNTH_POOL: usize = 20;
pub const SYNTH_SOURCE_LEN: usize = 3;
pub const GENERIC_RESPONSE: &str = "i do not know";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub sources: usize,
    pub generic_prob: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.sources == 0 {
            return Err(Error::Config("synthetic corpus needs at least one source".into()));
        }
        if !(0.0..=1.0).contains(&self.generic_prob) {
            return Err(Error::Config(format!(
                "generic probability must be in [0, 1], got {}",
                self.generic_prob
            )));
        }
        Ok(())
    }
}

/// Whether a synthetic target is the shared generic response.
pub fn is_generic(response: &str) -> bool {
    response == GENERIC_RESPONSE
}

fn synthetic_stream(spec: &SyntheticSpec, count: usize) -> Vec<Episode> {
    let mut rng = rng::stream(spec.seed, rng::SYNTH);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut words: Vec<usize> = Vec::with_capacity(SYNTH_SOURCE_LEN);
        while words.len() < SYNTH_SOURCE_LEN {
            let w = rng.gen_range(0..SYNTH_POOL);
            if !words.contains(&w) {
                words.push(w);
            }
        }
        let generic = rng.gen_bool(spec.generic_prob);
        if !seen.insert(words.clone()) {
            continue;
        }
        let source: Vec<String> = words.iter().map(|w| format!("s{w}")).collect();
        let target = if generic {
            GENERIC_RESPONSE.to_string()
        } else {
            words.iter().map(|w| format!("r{w}")).collect::<Vec<_>>().join(" ")
        };
        out.push(Episode {
            turns: vec![source.join(" "), target],
        });
    }
    out
}

/// `S` two-turn episodes with distinct sources. Each target is the generic
/// response with probability `p`, otherwise the source's own word-for-word
/// response.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Vec<Episode>> {
    spec.validate()?;
    Ok(synthetic_stream(spec, spec.sources))
}

/// Training corpus plus `holdout` further episodes drawn the same way, with
/// sources unseen in training.
pub fn make_synthetic_split(spec: &SyntheticSpec, holdout: usize) -> Result<(Vec<Episode>, Vec<Episode>)> {
    spec.validate()?;
    let max = (0..SYNTH_SOURCE_LEN).map(|k| SYNTH_POOL - k).product::<usize>();
    if spec.sources + holdout > max {
        return Err(Error::Config(format!("at most {max} distinct synthetic sources exist")));
    }
    let mut all = synthetic_stream(spec, spec.sources + holdout);
    let held = all.split_off(spec.sources);
    Ok((all, held))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenfreq::build_vocab;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn corpus_examples() {
        let c = parse_corpus("hi\thello there\n\na\tb\tc\n", p()).unwrap();
        assert_eq!(c.episodes.len(), 2);
        assert_eq!(c.blank_lines, 1);
        assert_eq!(c.episodes[0].turns(), ["hi", "hello there"]);
        let pairs: Vec<_> = c.episodes[1].pairs().collect();
        assert_eq!(pairs, [("a", "b"), ("b", "c")]);
    }

    #[test]
    fn malformed_lines_are_reported_or_rejected() {
        let mut text = String::new();
        for _ in 0..19 {
            text.push_str("x\ty\n");
        }
        text.push_str("lonely\n");
        let c = parse_corpus(&text, p()).unwrap();
        assert_eq!(c.malformed_lines, [20]);
        assert_eq!(c.episodes.len(), 19);

        let err = parse_corpus("a\tb\nsolo\nx\t\n", p()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("2, 3"), "{err}");
    }

    #[test]
    fn missing_corpus_is_io_error() {
        let err = load_corpus(Path::new("/nonexistent/corpus.tsv")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn pairs_truncate_to_room_for_specials() {
        let c = parse_corpus("a b c d e f\tg h i j k l m n\n", p()).unwrap();
        let (vocab, _) = build_vocab(&corpus_sentences(&c.episodes), 100).unwrap();
        let pairs = make_pairs(&c.episodes, &vocab, 6);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].source.len(), 4);
        assert_eq!(pairs[0].target.len(), 4);
    }

    #[test]
    fn synthetic_examples() {
        let spec = |p, seed| SyntheticSpec {
            sources: 100,
            generic_prob: p,
            seed,
        };
        let all = make_synthetic(&spec(1.0, 3)).unwrap();
        assert!(all.iter().all(|e| is_generic(&e.turns()[1])));
        let none = make_synthetic(&spec(0.0, 3)).unwrap();
        let targets: std::collections::HashSet<_> = none.iter().map(|e| e.turns()[1].clone()).collect();
        assert_eq!(targets.len(), 100);

        let mixed = make_synthetic(&spec(0.6, 7)).unwrap();
        let generic = mixed.iter().filter(|e| is_generic(&e.turns()[1])).count();
        assert!((50..=70).contains(&generic), "{generic}");
        let sources: std::collections::HashSet<_> = mixed.iter().map(|e| e.turns()[0].clone()).collect();
        assert_eq!(sources.len(), 100);
        assert_eq!(mixed, make_synthetic(&spec(0.6, 7)).unwrap());

        let generic_words: Vec<_> = GENERIC_RESPONSE.split(' ').collect();
        for e in &mixed {
            if !is_generic(&e.turns()[1]) {
                assert!(e.turns()[1].split(' ').all(|w| !generic_words.contains(&w)));
            }
        }
    }

    #[test]
    fn holdout_sources_are_unseen() {
        let spec = SyntheticSpec {
            sources: 50,
            generic_prob: 0.5,
            seed: 1,
        };
        let (train, held) = make_synthetic_split(&spec, 30).unwrap();
        assert_eq!(train, make_synthetic(&spec).unwrap());
        assert_eq!(held.len(), 30);
        for h in &held {
            assert!(train.iter().all(|t| t.turns()[0] != h.turns()[0]));
        }
    }

    #[test]
    fn synthetic_spec_is_validated() {
        let bad = SyntheticSpec {
            sources: 10,
            generic_prob: 1.5,
            seed: 0,
        };
        assert!(matches!(make_synthetic(&bad), Err(Error::Config(_))));
    }
}
