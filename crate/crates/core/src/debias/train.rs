//! Step 1: plain next-token cross-entropy training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::Adam;
use crate::error::{Error, Result};
use crate::lm::model::ParamVars;
use crate::lm::tape::{Tape, Var};
use crate::lm::tensor::Mat;
use crate::lm::{perplexity, LmModel, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: Option<f64>,
    pub seed: u64,
    /// Validation loss is recorded every `eval_every` steps (0: only at the ends).
    pub eval_every: usize,
    /// At most this many validation sentences are scored per evaluation.
    pub val_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 1500, batch_size: 16, lr: 3e-3, clip: Some(1.0), seed: 0, eval_every: 100, val_limit: 256 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: LmModel,
    pub curve: Vec<CurvePoint>,
}

/// Shuffled passes over `0..n`, reshuffled each epoch.
pub(crate) struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = Self { rng: ChaCha8Rng::seed_from_u64(seed), order: (0..n).collect(), cursor: n };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.reshuffle();
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// `<bos> tokens <eos>`, cut so the input part fits the context window.
pub(crate) fn training_ids<S: AsRef<str>>(vocab: &Vocab, tokens: &[S], context: usize) -> Vec<usize> {
    let mut ids = vocab.encode_sentence(tokens);
    ids.truncate(context + 1);
    ids
}

/// Mean next-token cross-entropy of one sequence as a tape node.
pub(crate) fn lm_loss(model: &LmModel, tape: &mut Tape, p: &ParamVars, ids: &[usize]) -> Result<Var> {
    let out = model.graph(tape, p, &ids[..ids.len() - 1])?;
    Ok(tape.cross_entropy(out.logits, &ids[1..]))
}

/// Builds one loss graph per item, differentiates each independently and
/// averages the parameter gradients in item order, so the result does not
/// depend on how rayon schedules the work.
pub(crate) fn batch_gradients<T, R, F>(model: &LmModel, items: &[T], build: F) -> Result<(Vec<R>, Vec<Mat>)>
where
    T: Sync,
    R: Send,
    F: Fn(&mut Tape, &ParamVars, &T) -> Result<(Var, R)> + Sync,
{
    let shapes: Vec<(usize, usize)> = model.tensors().iter().map(|t| t.shape()).collect();
    let parts = items
        .par_iter()
        .map(|item| {
            let mut tape = Tape::new();
            let p = model.register(&mut tape);
            let (loss, r) = build(&mut tape, &p, item)?;
            let grads = tape.backward(loss);
            let g: Vec<Mat> = p.0.iter().zip(&shapes).map(|(v, &s)| grads.get(*v, s)).collect();
            Ok((r, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total: Vec<Mat> = shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect();
    let mut results = Vec::with_capacity(parts.len());
    for (r, g) in parts {
        for (t, gi) in total.iter_mut().zip(&g) {
            t.add_assign(gi);
        }
        results.push(r);
    }
    let inv = 1.0 / items.len().max(1) as f64;
    total.iter_mut().for_each(|t| t.scale_assign(inv));
    Ok((results, total))
}

/// Mean per-token negative log-likelihood over (a prefix of) `corpus`.
pub fn mean_nll(model: &LmModel, corpus: &[Vec<String>], limit: usize) -> Result<f64> {
    Ok(perplexity(model, &corpus[..corpus.len().min(limit)])?.ln())
}

/// Minibatch Adam on next-token cross-entropy.
pub fn train_lm(mut model: LmModel, train: &[Vec<String>], val: &[Vec<String>], cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let context = model.config.context;
    let seqs: Vec<Vec<usize>> = train.iter().map(|s| training_ids(&model.vocab, s, context)).collect();
    let mut sampler = BatchSampler::new(seqs.len(), cfg.seed);
    let mut opt = Adam::new(cfg.lr, cfg.clip);
    let eval = |m: &LmModel| -> Result<Option<f64>> {
        if val.is_empty() {
            Ok(None)
        } else {
            mean_nll(m, val, cfg.val_limit).map(Some)
        }
    };
    let mut curve = vec![CurvePoint { step: 0, train_loss: None, val_loss: eval(&model)? }];
    for step in 1..=cfg.steps {
        let batch: Vec<&[usize]> = sampler.next_batch(cfg.batch_size).into_iter().map(|i| seqs[i].as_slice()).collect();
        let (losses, mut grads) = batch_gradients(&model, &batch, |tape, p, ids| {
            let l = lm_loss(&model, tape, p, ids)?;
            Ok((l, tape.value(l).scalar()))
        })?;
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;
        if !loss.is_finite() {
            return Err(Error::DivergedLoss { step });
        }
        opt.step(model.tensors_mut(), &mut grads);
        if !model.is_finite() {
            return Err(Error::DivergedLoss { step });
        }
        let evaluate = step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        let val_loss = if evaluate { eval(&model)? } else { None };
        curve.push(CurvePoint { step, train_loss: Some(loss), val_loss });
    }
    Ok(TrainOutput { model, curve })
}

type Split = (Vec<Vec<String>>, Vec<Vec<String>>);

/// Seeded train/validation split; both halves keep corpus order.
pub fn split_corpus(corpus: &[Vec<String>], val_fraction: f64, seed: u64) -> Result<Split> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::InvalidConfig(format!("validation fraction must be in [0, 1), got {val_fraction}")));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (corpus.len() as f64 * val_fraction).round() as usize;
    let (v, t) = order.split_at(n_val);
    let pick = |ix: &[usize]| {
        let mut ix = ix.to_vec();
        ix.sort_unstable();
        ix.into_iter().map(|i| corpus[i].clone()).collect::<Vec<_>>()
    };
    Ok((pick(t), pick(v)))
}
