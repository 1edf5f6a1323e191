//! Step 3: fine-tuning with a counterfactual fairness penalty.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::curriculum::{CurriculumState, Stage};
use super::head::SentimentHead;
use super::optim::Adam;
use super::train::{batch_gradients, training_ids, BatchSampler, TrainConfig};
use crate::error::{Error, Result};
use crate::fairness_spec::{substitute_prefix, AttributeSpec};
use crate::lm::model::ParamVars;
use crate::lm::tape::{Tape, Var};
use crate::lm::tensor::dot;
use crate::lm::{LmModel, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    EmbeddingReg,
    SentimentReg,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::EmbeddingReg => "embedding_reg",
            Method::SentimentReg => "sentiment_reg",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasConfig {
    pub method: Method,
    pub lambda: f64,
    pub steps: usize,
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_clip")]
    pub clip: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch() -> usize {
    16
}

fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl DebiasConfig {
    /// Learning rate and step count at a tenth of the pretraining run.
    pub fn from_pretrain(pre: &TrainConfig, method: Method, lambda: f64) -> Self {
        Self {
            method,
            lambda,
            steps: (pre.steps / 10).max(1),
            lr: pre.lr / 10.0,
            batch_size: pre.batch_size,
            clip: pre.clip,
            seed: pre.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// `1 - cos(u, v)`.
pub fn embedding_reg_loss(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch(format!("cosine of {} vs {} dims", u.len(), v.len())));
    }
    let (nu, nv) = (dot(u, u), dot(v, v));
    if nu.sqrt() < 1e-12 || nv.sqrt() < 1e-12 {
        return Err(Error::ZeroVector);
    }
    Ok((1.0 - dot(u, v) / (nu * nv).sqrt()).clamp(0.0, 2.0))
}

/// Cosine distance between the head's projections of `u` and `v`.
pub fn sentiment_reg_loss(head: &SentimentHead, u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != head.input_width() || v.len() != head.input_width() {
        return Err(Error::ShapeMismatch(format!(
            "head expects width {}, got {} and {}",
            head.input_width(),
            u.len(),
            v.len()
        )));
    }
    embedding_reg_loss(&head.projection(u), &head.projection(v))
}

/// One sensitive token occurrence: `position` indexes the sentence tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DebiasInstance {
    pub sequence: usize,
    pub position: usize,
    pub subgroup: String,
}

pub fn debias_step_dataset(corpus: &[Vec<String>], spec: &AttributeSpec) -> Result<Vec<DebiasInstance>> {
    let out: Vec<DebiasInstance> = corpus
        .iter()
        .enumerate()
        .flat_map(|(sequence, s)| {
            s.iter().enumerate().filter_map(move |(position, t)| {
                spec.subgroup_of(t).map(|g| DebiasInstance { sequence, position, subgroup: g.to_string() })
            })
        })
        .collect();
    if out.is_empty() {
        return Err(Error::NoSensitiveSequences);
    }
    Ok(out)
}

/// A sensitive occurrence (token index `position`) with its drawn
/// counterfactual subgroup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterfactualSite<'a> {
    pub position: usize,
    pub from: &'a str,
    pub to: &'a str,
}

fn draw_counterfactual<'a>(spec: &'a AttributeSpec, from: &str, rng: &mut ChaCha8Rng) -> Result<&'a str> {
    let others: Vec<&str> = spec.values().into_iter().filter(|v| *v != from).collect();
    others.choose(rng).copied().ok_or_else(|| Error::NoCounterfactual(from.to_string()))
}

/// Mean fairness loss over one sentence's sites as a tape node. `full` is the
/// graph of the whole unperturbed sentence and supplies the original `h_bar`;
/// each counterfactual prefix gets its own forward pass on the same tape.
#[allow(clippy::too_many_arguments)]
pub fn fairness_loss_graph(
    tape: &mut Tape,
    model: &LmModel,
    p: &ParamVars,
    head: Option<&SentimentHead>,
    full: &crate::lm::model::GraphOut,
    tokens: &[String],
    sites: &[CounterfactualSite<'_>],
    spec: &AttributeSpec,
) -> Result<Var> {
    let hv = head.map(|h| h.register(tape));
    if sites.is_empty() {
        return Err(Error::NoSensitiveSequences);
    }
    let mut terms = Vec::with_capacity(sites.len());
    for pr in sites {
        let orig = full.h_bar(tape, pr.position + 1);
        let cf_tokens = substitute_prefix(tokens, pr.position + 1, spec, pr.from, pr.to)?;
        let mut cf_ids = vec![Vocab::BOS_ID];
        cf_ids.extend(model.vocab.encode(&cf_tokens[..=pr.position]));
        let cf = model.graph(tape, p, &cf_ids)?;
        let cf_bar = cf.h_bar(tape, pr.position + 1);
        let d = match &hv {
            None => tape.cosine_distance(orig, cf_bar)?,
            Some(hv) => {
                let a = SentimentHead::projection_graph(tape, hv, orig);
                let b = SentimentHead::projection_graph(tape, hv, cf_bar);
                tape.cosine_distance(a, b)?
            }
        };
        terms.push(d);
    }
    let mut sum = terms[0];
    for &t in &terms[1..] {
        sum = tape.add(sum, t);
    }
    Ok(tape.scale(sum, 1.0 / terms.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasLogRow {
    pub step: usize,
    pub lm_loss: f64,
    pub fairness_loss: f64,
    pub total_loss: f64,
}

#[derive(Debug, Clone)]
pub struct DebiasOutput {
    pub state: CurriculumState,
    pub log: Vec<DebiasLogRow>,
}

struct Sequence<'a> {
    tokens: &'a [String],
    ids: Vec<usize>,
    sites: Vec<(usize, &'a str)>,
}

/// Sequences that hold at least one sensitive token inside the context
/// window, with those positions.
fn sensitive_sequences<'a>(corpus: &'a [Vec<String>], spec: &'a AttributeSpec, model: &LmModel) -> Result<Vec<Sequence<'a>>> {
    let instances = debias_step_dataset(corpus, spec)?;
    let mut by_seq: BTreeMap<usize, Vec<(usize, &str)>> = BTreeMap::new();
    for inst in &instances {
        let ids_len = training_ids(&model.vocab, &corpus[inst.sequence], model.config.context).len();
        if inst.position + 2 < ids_len {
            let g = spec.subgroup_of(&corpus[inst.sequence][inst.position]).expect("instance token is sensitive");
            by_seq.entry(inst.sequence).or_default().push((inst.position, g));
        }
    }
    if by_seq.is_empty() {
        return Err(Error::NoSensitiveSequences);
    }
    Ok(by_seq
        .into_iter()
        .map(|(i, sites)| Sequence {
            tokens: &corpus[i],
            ids: training_ids(&model.vocab, &corpus[i], model.config.context),
            sites,
        })
        .collect())
}

/// Fine-tunes `state.model` on the sensitive sentences of `corpus` with loss
/// `L_LM + lambda * L_fairness`. Gradients flow through both the original and
/// the counterfactual forward passes; the head (if used) stays fixed.
pub fn debias(state: CurriculumState, corpus: &[Vec<String>], spec: &AttributeSpec, cfg: &DebiasConfig) -> Result<DebiasOutput> {
    cfg.validate()?;
    let head = match cfg.method {
        Method::EmbeddingReg => None,
        Method::SentimentReg => match (&state.head, state.stage) {
            (Some(h), s) if s >= Stage::HeadTrained => Some(h.clone()),
            _ => return Err(Error::WrongStage { have: state.stage.to_string(), need: Stage::HeadTrained.to_string() }),
        },
    };
    if let Some(h) = &head {
        if h.input_width() != state.model.config.width {
            return Err(Error::ShapeMismatch("head input width differs from model width".into()));
        }
    }
    let CurriculumState { mut model, head: state_head, stage: _, mut provenance } = state;
    let seqs = sensitive_sequences(corpus, spec, &model)?;
    let mut sampler = BatchSampler::new(seqs.len(), cfg.seed);
    let mut cf_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    cf_rng.set_stream(1);
    let mut opt = Adam::new(cfg.lr, cfg.clip);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for i in sampler.next_batch(cfg.batch_size) {
            let s = &seqs[i];
            let probes = s
                .sites
                .iter()
                .map(|&(position, from)| Ok(CounterfactualSite { position, from, to: draw_counterfactual(spec, from, &mut cf_rng)? }))
                .collect::<Result<Vec<_>>>()?;
            batch.push((s, probes));
        }
        let m = &model;
        let (parts, mut grads) = batch_gradients(m, &batch, |tape, p, (s, probes)| {
            let full = m.graph(tape, p, &s.ids[..s.ids.len() - 1])?;
            let ce = tape.cross_entropy(full.logits, &s.ids[1..]);
            let fair = fairness_loss_graph(tape, m, p, head.as_ref(), &full, s.tokens, probes, spec)?;
            let (ce_v, fair_v) = (tape.value(ce).scalar(), tape.value(fair).scalar());
            let total = if cfg.lambda > 0.0 {
                let scaled = tape.scale(fair, cfg.lambda);
                tape.add(ce, scaled)
            } else {
                ce
            };
            Ok((total, (ce_v, fair_v)))
        })?;
        let n = parts.len() as f64;
        let lm_loss = parts.iter().map(|p| p.0).sum::<f64>() / n;
        let fairness_loss = parts.iter().map(|p| p.1).sum::<f64>() / n;
        let total_loss = lm_loss + cfg.lambda * fairness_loss;
        if !total_loss.is_finite() {
            return Err(Error::DivergedLoss { step });
        }
        opt.step(model.tensors_mut(), &mut grads);
        if !model.is_finite() {
            return Err(Error::DivergedLoss { step });
        }
        log.push(DebiasLogRow { step, lm_loss, fairness_loss, total_loss });
    }
    provenance.push(super::curriculum::StageRecord::new(Stage::Debiased, cfg.seed, cfg));
    Ok(DebiasOutput { state: CurriculumState { stage: Stage::Debiased, model, head: state_head, provenance }, log })
}

/// Mean fairness loss over every sensitive occurrence in `corpus`, each
/// paired with a counterfactual subgroup drawn from `seed`.
pub fn mean_fairness_loss(
    model: &LmModel,
    head: Option<&SentimentHead>,
    corpus: &[Vec<String>],
    spec: &AttributeSpec,
    seed: u64,
) -> Result<f64> {
    let seqs = sensitive_sequences(corpus, spec, model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for s in &seqs {
        let (stack, _) = model.forward(&s.ids[..s.ids.len() - 1])?;
        for &(position, from) in &s.sites {
            let to = draw_counterfactual(spec, from, &mut rng)?;
            let cf_tokens = substitute_prefix(s.tokens, position + 1, spec, from, to)?;
            let mut cf_ids = vec![Vocab::BOS_ID];
            cf_ids.extend(model.vocab.encode(&cf_tokens[..=position]));
            let (cf_stack, _) = model.forward(&cf_ids)?;
            let (a, b) = (stack.h_bar(position + 1)?, cf_stack.h_bar(position + 1)?);
            total += match head {
                None => embedding_reg_loss(&a, &b)?,
                Some(h) => sentiment_reg_loss(h, &a, &b)?,
            };
            count += 1;
        }
    }
    Ok(total / count as f64)
}
