//! Sentiment scorers mapping token sequences to scores in `[0, 1]`.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ScoreDistribution;

/// A sentiment score in `[0, 1]`; 0 is fully negative, 1 fully positive.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct SentimentScore(f64);

impl SentimentScore {
    pub const NEUTRAL: SentimentScore = SentimentScore(0.5);

    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(Error::InvalidScore(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for SentimentScore {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SentimentScore> for f64 {
    fn from(s: SentimentScore) -> f64 {
        s.0
    }
}

/// Anything that turns a token sequence into a sentiment score. Implementations
/// must be deterministic.
pub trait SentimentScorer: Send + Sync {
    fn score(&self, tokens: &[String]) -> SentimentScore;
}

/// Positive and negative opinion-word sets. Matching is case-insensitive on
/// whole tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    positive: HashSet<String>,
    negative: HashSet<String>,
}

impl Lexicon {
    pub fn new<P, N>(positive: P, negative: N) -> Result<Self>
    where
        P: IntoIterator,
        P::Item: AsRef<str>,
        N: IntoIterator,
        N::Item: AsRef<str>,
    {
        let positive: HashSet<String> = positive.into_iter().map(|w| w.as_ref().to_lowercase()).collect();
        let negative: HashSet<String> = negative.into_iter().map(|w| w.as_ref().to_lowercase()).collect();
        if positive.is_empty() || negative.is_empty() {
            return Err(Error::InvalidConfig("lexicon word lists must be non-empty".into()));
        }
        if let Some(w) = positive.intersection(&negative).next() {
            return Err(Error::InvalidConfig(format!("`{w}` is listed as both positive and negative")));
        }
        Ok(Self { positive, negative })
    }

    /// Parses two word-list files' contents: one word per line, lines starting
    /// with `;` are comments.
    pub fn from_word_lists(positive: &str, negative: &str) -> Result<Self> {
        fn words(text: &str) -> impl Iterator<Item = &str> {
            text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with(';'))
        }
        Self::new(words(positive), words(negative))
    }

    pub fn from_files(positive: impl AsRef<Path>, negative: impl AsRef<Path>) -> Result<Self> {
        let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
        Self::from_word_lists(&read(positive.as_ref())?, &read(negative.as_ref())?)
    }

    /// Lexicon with polarities swapped.
    pub fn flipped(&self) -> Self {
        Self { positive: self.negative.clone(), negative: self.positive.clone() }
    }

    pub fn is_positive(&self, word: &str) -> bool {
        self.positive.contains(&word.to_lowercase())
    }

    pub fn is_negative(&self, word: &str) -> bool {
        self.negative.contains(&word.to_lowercase())
    }

    pub fn is_opinion_word(&self, word: &str) -> bool {
        let w = word.to_lowercase();
        self.positive.contains(&w) || self.negative.contains(&w)
    }

    pub fn positive_len(&self) -> usize {
        self.positive.len()
    }

    pub fn negative_len(&self) -> usize {
        self.negative.len()
    }

    /// (positive, negative) opinion-word counts.
    pub fn counts<S: AsRef<str>>(&self, tokens: &[S]) -> (usize, usize) {
        tokens.iter().fold((0, 0), |(p, n), t| {
            let w = t.as_ref().to_lowercase();
            if self.positive.contains(&w) {
                (p + 1, n)
            } else if self.negative.contains(&w) {
                (p, n + 1)
            } else {
                (p, n)
            }
        })
    }
}

/// `p / (p + n)`, or 0.5 when the text has no opinion words.
///
/// The fraction is taken on the majority side and complemented otherwise;
/// `1 - x` is exact for `x` in `[0.5, 1]`, so swapping the two word lists
/// yields exactly `1 - score`.
pub fn lexicon_score<S: AsRef<str>>(tokens: &[S], lex: &Lexicon) -> SentimentScore {
    let (p, n) = lex.counts(tokens);
    let total = (p + n) as f64;
    if p + n == 0 {
        SentimentScore::NEUTRAL
    } else if p >= n {
        SentimentScore(p as f64 / total)
    } else {
        SentimentScore(1.0 - n as f64 / total)
    }
}

impl SentimentScorer for Lexicon {
    fn score(&self, tokens: &[String]) -> SentimentScore {
        lexicon_score(tokens, self)
    }
}

/// Scores every text and collects the scores into a distribution.
pub fn score_batch(texts: &[Vec<String>], scorer: &dyn SentimentScorer) -> Result<ScoreDistribution> {
    if texts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    ScoreDistribution::new(texts.iter().map(|t| scorer.score(t).value()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lex() -> Lexicon {
        Lexicon::new(["good", "great", "happy"], ["bad", "terrible", "awful"]).unwrap()
    }

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn score_examples() {
        let lex = lex();
        assert_eq!(lexicon_score(&["great"], &lex).value(), 1.0);
        assert_eq!(lexicon_score(&["terrible", "awful"], &lex).value(), 0.0);
        assert_eq!(lexicon_score(&["the", "sky", "is", "blue"], &lex).value(), 0.5);
        assert!((lexicon_score(&["good", "good", "bad"], &lex).value() - 2.0 / 3.0).abs() < 1e-9);
        assert_eq!(lexicon_score::<&str>(&[], &lex).value(), 0.5);
    }

    #[test]
    fn matching_is_case_insensitive_whole_token() {
        let lex = lex();
        assert!((lexicon_score(&["GREAT", "Bad", "Bad"], &lex).value() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(lexicon_score(&["goodness", "badly"], &lex).value(), 0.5);
    }

    #[test]
    fn word_list_parsing() {
        let lex = Lexicon::from_word_lists("; header\n;\ngood\n\n Great \n", ";c\nbad\n").unwrap();
        assert_eq!((lex.positive_len(), lex.negative_len()), (2, 1));
        assert!(lex.is_positive("great"));
        assert!(Lexicon::from_word_lists("good\n", "good\n").is_err());
        assert!(Lexicon::from_word_lists("; only comments\n", "bad\n").is_err());
    }

    #[test]
    fn batch_sorts_and_counts() {
        let lex = lex();
        let texts = vec![toks(&["great"]), toks(&["bad"]), toks(&["sky"])];
        let d = score_batch(&texts, &lex).unwrap();
        assert_eq!(d.samples(), &[0.0, 0.5, 1.0]);
        let same = score_batch(&vec![toks(&["good", "bad"]); 4], &lex).unwrap();
        assert_eq!(same.samples(), &[0.5; 4]);
        assert!(matches!(score_batch(&[], &lex), Err(Error::EmptyBatch)));
    }

    #[test]
    fn score_newtype_bounds() {
        assert!(SentimentScore::new(1.0001).is_err());
        assert!(SentimentScore::new(-0.0).is_ok());
        assert!(serde_json::from_str::<SentimentScore>("2.0").is_err());
    }

    proptest! {
        #[test]
        fn permutation_and_polarity_flip(words in proptest::collection::vec(0usize..8, 0..30), seed in any::<u64>()) {
            let vocab = ["good", "great", "happy", "bad", "terrible", "awful", "the", "sky"];
            let lex = lex();
            let text: Vec<&str> = words.iter().map(|&i| vocab[i]).collect();
            let s = lexicon_score(&text, &lex).value();
            prop_assert!((0.0..=1.0).contains(&s));

            let mut shuffled = text.clone();
            let n = shuffled.len();
            if n > 1 {
                for i in 0..n { shuffled.swap(i, (seed as usize).wrapping_add(i * 7) % n); }
            }
            prop_assert_eq!(lexicon_score(&shuffled, &lex).value(), s);

            let flipped = lexicon_score(&text, &lex.flipped()).value();
            let (p, n) = lex.counts(&text);
            if p + n > 0 {
                prop_assert_eq!(flipped, 1.0 - s);
                prop_assert!((s - p as f64 / (p + n) as f64).abs() <= f64::EPSILON);
            } else {
                prop_assert_eq!(flipped, 0.5);
            }
        }
    }
}
