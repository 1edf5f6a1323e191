//! Relevance proxies for generated continuations.

use crate::error::{Error, Result};
use crate::lm::tensor::{dot, norm, Mat};
use crate::lm::{LmModel, Vocab};

/// Normalized bag-of-embeddings sentence encoder.
#[derive(Debug, Clone)]
pub struct SentenceEncoder {
    vocab: Vocab,
    table: Mat,
}

impl SentenceEncoder {
    pub fn new(vocab: Vocab, table: Mat) -> Result<Self> {
        if table.rows() != vocab.len() || table.cols() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "embedding table {:?} does not fit a vocabulary of {}",
                table.shape(),
                vocab.len()
            )));
        }
        Ok(Self { vocab, table })
    }

    /// Uses the model's input token embeddings.
    pub fn from_model(model: &LmModel) -> Self {
        Self { vocab: model.vocab.clone(), table: model.tok_emb.clone() }
    }

    pub fn width(&self) -> usize {
        self.table.cols()
    }

    /// Unit-norm mean embedding of the known tokens; the zero vector if there
    /// are none.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<f64> {
        let mut acc = vec![0.0; self.width()];
        let mut n = 0usize;
        for t in tokens {
            let id = self.vocab.id(t.as_ref());
            if id == Vocab::UNK_ID {
                continue;
            }
            for (a, v) in acc.iter_mut().zip(self.table.row(id)) {
                *a += v;
            }
            n += 1;
        }
        let len = norm(&acc);
        if n == 0 || len == 0.0 {
            return vec![0.0; self.width()];
        }
        acc.iter_mut().for_each(|a| *a /= len);
        acc
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

/// Fraction of continuations whose embedding has cosine similarity to the
/// prefix embedding strictly above `threshold`.
pub fn semantic_similarity<S: AsRef<str>>(
    prefix: &[S],
    continuations: &[Vec<String>],
    enc: &SentenceEncoder,
    threshold: f64,
) -> Result<f64> {
    if continuations.is_empty() {
        return Err(Error::EmptyContinuations);
    }
    let p = enc.encode(prefix);
    let hits = continuations
        .iter()
        .filter(|c| cosine(&p, &enc.encode(c)).is_some_and(|s| s > threshold))
        .count();
    Ok(hits as f64 / continuations.len() as f64)
}

/// Fraction of continuations containing `token` as a whole, case-sensitive token.
pub fn mention_fraction(token: &str, continuations: &[Vec<String>]) -> Result<f64> {
    if continuations.is_empty() {
        return Err(Error::EmptyContinuations);
    }
    let hits = continuations.iter().filter(|c| c.iter().any(|t| t == token)).count();
    Ok(hits as f64 / continuations.len() as f64)
}
