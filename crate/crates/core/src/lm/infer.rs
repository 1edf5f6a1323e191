//! Sampling and perplexity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::model::LmModel;
use super::tensor::log_softmax;
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::fairness_spec::AttributeSpec;

/// Anything that assigns next-token log-probabilities to a token id sequence.
pub trait LanguageModel: Sync {
    fn vocab(&self) -> &Vocab;

    /// Row `t` holds `log p(. | ids[..=t])`.
    fn next_log_probs(&self, ids: &[usize]) -> Result<Vec<Vec<f64>>>;
}

impl LanguageModel for LmModel {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn next_log_probs(&self, ids: &[usize]) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward(ids)?.1)
    }
}

fn pick(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    let lp = log_softmax(&scaled);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, l) in lp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return i;
        }
    }
    lp.len() - 1
}

/// Draws `n` continuations of `prefix`. Each stops at `<eos>` (not included),
/// after `max_tokens` tokens, or when the context window is full.
pub fn sample_continuations(
    model: &LmModel,
    prefix: &[usize],
    n: usize,
    max_tokens: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidConfig(format!("temperature must be finite and >= 0, got {temperature}")));
    }
    if prefix.is_empty() {
        return Err(Error::EmptyPrefix);
    }
    if prefix.len() > model.config.context {
        return Err(Error::PrefixTooLong { len: prefix.len(), max: model.config.context });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut base = model.decoder();
    let mut logits = Vec::new();
    for &id in prefix {
        logits = base.step(id)?.logits;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut dec = base.clone();
        let mut next_logits = logits.clone();
        let mut seq = Vec::new();
        while seq.len() < max_tokens {
            let tok = pick(&next_logits, temperature, &mut rng);
            if tok == Vocab::EOS_ID {
                break;
            }
            seq.push(tok);
            if seq.len() == max_tokens || dec.len() == model.config.context {
                break;
            }
            next_logits = dec.step(tok)?.logits;
        }
        out.push(seq);
    }
    Ok(out)
}

/// Summed negative log-likelihood and predicted-token count of one sentence,
/// scored as `<bos> tokens <eos>` with every token after `<bos>` predicted.
pub fn sentence_nll<M: LanguageModel + ?Sized>(model: &M, tokens: &[String]) -> Result<(f64, usize)> {
    let ids = model.vocab().encode_sentence(tokens);
    let lp = model.next_log_probs(&ids[..ids.len() - 1])?;
    let nll = lp.iter().zip(&ids[1..]).map(|(row, &t)| -row[t]).sum();
    Ok((nll, ids.len() - 1))
}

/// `exp` of the mean per-token negative log-likelihood over the corpus.
pub fn perplexity<M: LanguageModel + ?Sized>(model: &M, corpus: &[Vec<String>]) -> Result<f64> {
    let parts = corpus
        .par_iter()
        .map(|s| sentence_nll(model, s))
        .collect::<Result<Vec<_>>>()?;
    let count: usize = parts.iter().map(|p| p.1).sum();
    if count == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut nlls: Vec<f64> = parts.iter().map(|p| p.0).collect();
    nlls.sort_by(f64::total_cmp);
    let nll: f64 = nlls.iter().sum();
    Ok((nll / count as f64).exp())
}

/// Perplexity over the sentences that mention at least one sensitive token.
pub fn perplexity_subset<M: LanguageModel + ?Sized>(
    model: &M,
    corpus: &[Vec<String>],
    spec: &AttributeSpec,
) -> Result<f64> {
    let subset: Vec<Vec<String>> =
        corpus.iter().filter(|s| s.iter().any(|t| spec.is_sensitive(t))).cloned().collect();
    if subset.is_empty() {
        return Err(Error::NoSensitiveSequences);
    }
    perplexity(model, &subset)
}
