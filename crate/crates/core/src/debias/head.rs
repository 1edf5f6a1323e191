//! Step 2: the sentiment projection head.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::train::training_ids;
use crate::error::{Error, Result};
use crate::lm::tape::{Tape, Var};
use crate::lm::tensor::Mat;
use crate::lm::LmModel;
use crate::sentiment::{lexicon_score, Lexicon};

pub const HEAD_HIDDEN: usize = 128;
pub const HEAD_FORMAT: &str = "fairlm-head/v1";

/// Three affine layers with tanh between them. The second tanh activation
/// (width 128) is the projection used for sentiment regularization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentimentHead {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub w3: Mat,
    pub b3: Mat,
}

pub struct HeadVars([Var; 6]);

#[derive(Serialize, Deserialize)]
struct HeadFile {
    format: String,
    head: SentimentHead,
}

fn tanh_layer(x: &[f64], w: &Mat, b: &Mat) -> Vec<f64> {
    (0..w.cols())
        .map(|j| (b.get(0, j) + x.iter().enumerate().map(|(i, v)| v * w.get(i, j)).sum::<f64>()).tanh())
        .collect()
}

impl SentimentHead {
    /// The output layer starts at zero, so an untrained head scores every
    /// input as a tie.
    pub fn new(input: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            w1: Mat::randn(input, HEAD_HIDDEN, 1.0 / (input as f64).sqrt(), &mut rng),
            b1: Mat::zeros(1, HEAD_HIDDEN),
            w2: Mat::randn(HEAD_HIDDEN, HEAD_HIDDEN, 1.0 / (HEAD_HIDDEN as f64).sqrt(), &mut rng),
            b2: Mat::zeros(1, HEAD_HIDDEN),
            w3: Mat::zeros(HEAD_HIDDEN, 2),
            b3: Mat::zeros(1, 2),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w1.rows()
    }

    pub fn tensors(&self) -> [&Mat; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.w3, &mut self.b3]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn register(&self, tape: &mut Tape) -> HeadVars {
        HeadVars(self.tensors().map(|t| tape.leaf(t.clone())))
    }

    /// Projection of the rows of `x` on the tape.
    pub fn projection_graph(tape: &mut Tape, v: &HeadVars, x: Var) -> Var {
        let h = tape.matmul(x, v.0[0]);
        let h = tape.add_row(h, v.0[1]);
        let h = tape.tanh(h);
        let h = tape.matmul(h, v.0[2]);
        let h = tape.add_row(h, v.0[3]);
        tape.tanh(h)
    }

    pub fn logits_graph(tape: &mut Tape, v: &HeadVars, projection: Var) -> Var {
        let o = tape.matmul(projection, v.0[4]);
        tape.add_row(o, v.0[5])
    }

    pub fn projection(&self, x: &[f64]) -> Vec<f64> {
        let h = tanh_layer(x, &self.w1, &self.b1);
        tanh_layer(&h, &self.w2, &self.b2)
    }

    pub fn logits(&self, x: &[f64]) -> [f64; 2] {
        let p = self.projection(x);
        let out = |j: usize| self.b3.get(0, j) + p.iter().enumerate().map(|(i, v)| v * self.w3.get(i, j)).sum::<f64>();
        [out(0), out(1)]
    }

    /// `true` means positive; ties go to negative.
    pub fn predict(&self, x: &[f64]) -> bool {
        let [neg, pos] = self.logits(x);
        pos > neg
    }

    pub fn accuracy(&self, data: &[HeadExample]) -> f64 {
        let hits = data.iter().filter(|e| self.predict(&e.features) == e.label).count();
        hits as f64 / data.len() as f64
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = HeadFile { format: HEAD_FORMAT.into(), head: self.clone() };
        let json = serde_json::to_string(&file).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: HeadFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if file.format != HEAD_FORMAT {
            return Err(Error::CheckpointVersion { found: file.format, expected: HEAD_FORMAT.into() });
        }
        if !file.head.is_finite() {
            return Err(Error::ShapeMismatch("head checkpoint contains non-finite parameters".into()));
        }
        Ok(file.head)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadExample {
    pub features: Vec<f64>,
    pub label: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadDataConfig {
    pub pos_threshold: f64,
    pub neg_threshold: f64,
    pub min_opinion_words: usize,
}

impl Default for HeadDataConfig {
    fn default() -> Self {
        Self { pos_threshold: 0.8, neg_threshold: 0.2, min_opinion_words: 2 }
    }
}

/// Keeps sentences with a clear lexicon polarity and pairs each with the mean
/// `h_bar` over its token positions.
pub fn build_head_dataset(
    corpus: &[Vec<String>],
    model: &LmModel,
    lexicon: &Lexicon,
    cfg: &HeadDataConfig,
) -> Result<Vec<HeadExample>> {
    let labelled: Vec<(&Vec<String>, bool)> = corpus
        .iter()
        .filter_map(|s| {
            let (p, n) = lexicon.counts(s);
            if p + n < cfg.min_opinion_words {
                return None;
            }
            let score = lexicon_score(s, lexicon).value();
            if score >= cfg.pos_threshold {
                Some((s, true))
            } else if score <= cfg.neg_threshold {
                Some((s, false))
            } else {
                None
            }
        })
        .collect();
    if labelled.is_empty() {
        return Err(Error::NoQualifyingSentences);
    }
    labelled
        .par_iter()
        .map(|&(s, label)| {
            Ok(HeadExample { features: pooled_h_bar(model, s)?, label })
        })
        .collect()
}

/// Mean of `h_bar` over the token positions of `sentence` (the `<bos>` slot is
/// excluded unless the sentence is empty).
pub fn pooled_h_bar(model: &LmModel, sentence: &[String]) -> Result<Vec<f64>> {
    let mut ids = training_ids(&model.vocab, sentence, model.config.context);
    ids.pop();
    let (stack, _) = model.forward(&ids)?;
    let first = if ids.len() > 1 { 1 } else { 0 };
    let mut acc = vec![0.0; model.config.width];
    for pos in first..ids.len() {
        for (a, v) in acc.iter_mut().zip(stack.h_bar(pos)?) {
            *a += v;
        }
    }
    let n = (ids.len() - first) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub holdout_fraction: f64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self { steps: 300, lr: 1e-2, seed: 0, holdout_fraction: 0.2 }
    }
}

#[derive(Debug, Clone)]
pub struct HeadTrainOutput {
    pub head: SentimentHead,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub train_size: usize,
    pub heldout_size: usize,
}

/// Full-batch Adam on two-class cross-entropy over a seeded split.
pub fn train_sentiment_head(data: &[HeadExample], cfg: &HeadTrainConfig) -> Result<HeadTrainOutput> {
    if !(0.0..1.0).contains(&cfg.holdout_fraction) {
        return Err(Error::InvalidConfig(format!("holdout fraction must be in [0, 1), got {}", cfg.holdout_fraction)));
    }
    let positives = data.iter().filter(|e| e.label).count();
    if positives == 0 || positives == data.len() {
        return Err(Error::SingleClassDataset);
    }
    let width = data[0].features.len();
    if data.iter().any(|e| e.features.len() != width) {
        return Err(Error::ShapeMismatch("head features have differing widths".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_hold = ((data.len() as f64 * cfg.holdout_fraction).round() as usize).min(data.len() - 1);
    let heldout: Vec<HeadExample> = order[..n_hold].iter().map(|&i| data[i].clone()).collect();
    let train: Vec<HeadExample> = order[n_hold..].iter().map(|&i| data[i].clone()).collect();

    let x = Mat::from_vec(train.len(), width, train.iter().flat_map(|e| e.features.iter().copied()).collect());
    let y: Vec<usize> = train.iter().map(|e| e.label as usize).collect();
    let mut head = SentimentHead::new(width, cfg.seed.wrapping_add(1));
    let mut opt = Adam::new(cfg.lr, None);
    for step in 1..=cfg.steps {
        let mut tape = Tape::new();
        let hv = head.register(&mut tape);
        let xv = tape.leaf(x.clone());
        let proj = SentimentHead::projection_graph(&mut tape, &hv, xv);
        let logits = SentimentHead::logits_graph(&mut tape, &hv, proj);
        let loss = tape.cross_entropy(logits, &y);
        if !tape.value(loss).scalar().is_finite() {
            return Err(Error::DivergedLoss { step });
        }
        let grads = tape.backward(loss);
        let mut g: Vec<Mat> = hv.0.iter().zip(head.tensors()).map(|(v, t)| grads.get(*v, t.shape())).collect();
        opt.step(head.tensors_mut(), &mut g);
    }
    let train_accuracy = head.accuracy(&train);
    let heldout_accuracy = if heldout.is_empty() { train_accuracy } else { head.accuracy(&heldout) };
    Ok(HeadTrainOutput { head, train_accuracy, heldout_accuracy, train_size: train.len(), heldout_size: heldout.len() })
}
