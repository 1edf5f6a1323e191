//! Template-based evaluation of a language model.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::read_corpus;
use crate::error::{Error, Result};
use crate::fairness_spec::{enumerate_eval_prefixes, load_templates, AttributeSpec, EvalPrefix, Pairing, Template};
use crate::lm::{perplexity, perplexity_subset, sample_continuations, LmModel, Vocab};
use crate::metrics::{FairnessReport, ScoreDistribution, TemplateKey, TemplateSamples};
use crate::relevance::{mention_fraction, semantic_similarity, SentenceEncoder};
use crate::sentiment::{Lexicon, SentimentScorer};
use crate::text::tokenize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub samples_per_prefix: usize,
    pub max_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
    pub similarity_threshold: f64,
    pub epsilon: Option<f64>,
    pub emit_samples: bool,
    pub parallel: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            samples_per_prefix: 200,
            max_tokens: 50,
            temperature: 1.0,
            seed: 0,
            similarity_threshold: 0.4,
            epsilon: None,
            emit_samples: false,
            parallel: true,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_prefix == 0 || self.max_tokens == 0 {
            return Err(Error::InvalidConfig("samples_per_prefix and max_tokens must be positive".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature must be finite and >= 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Seed of the sampling stream shared by every counterfactual variant of one
/// template slot: template `template_id` filled with the `rank`-th token of
/// any subgroup.
pub fn prefix_seed(seed: u64, template_id: u32, rank: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((u64::from(template_id) << 32) | rank as u64);
    rng.next_u64()
}

/// Samples and statistics for one evaluation prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixResult {
    pub prefix: EvalPrefix,
    pub continuations: Vec<Vec<String>>,
    pub scores: Vec<f64>,
    pub semantic_similarity: f64,
    pub mention_fraction: f64,
}

pub struct EvalInputs<'a> {
    pub model: &'a LmModel,
    pub spec: &'a AttributeSpec,
    pub templates: &'a [Template],
    pub scorer: &'a dyn SentimentScorer,
    pub encoder: &'a SentenceEncoder,
    /// Held-out sentences for PPL and PPL^s.
    pub test_corpus: Option<&'a [Vec<String>]>,
}

fn run_prefix(inp: &EvalInputs<'_>, s: &EvalSettings, p: &EvalPrefix) -> Result<PrefixResult> {
    let group = inp.spec.subgroup(&p.subgroup)?;
    let rank = group.tokens.iter().position(|t| *t == p.token).unwrap_or(0);
    let tokens = tokenize(&p.prefix);
    let mut ids = vec![Vocab::BOS_ID];
    ids.extend(inp.model.vocab.encode(&tokens));
    let samples =
        sample_continuations(inp.model, &ids, s.samples_per_prefix, s.max_tokens, s.temperature, prefix_seed(s.seed, p.template_id, rank))?;
    let continuations: Vec<Vec<String>> = samples.iter().map(|c| inp.model.vocab.decode(c)).collect();
    let scores = continuations.iter().map(|c| inp.scorer.score(c).value()).collect();
    Ok(PrefixResult {
        semantic_similarity: semantic_similarity(&tokens, &continuations, inp.encoder, s.similarity_threshold)?,
        mention_fraction: mention_fraction(&p.token, &continuations)?,
        prefix: p.clone(),
        continuations,
        scores,
    })
}

/// Samples continuations for every prefix and scores them.
pub fn sample_prefixes(inp: &EvalInputs<'_>, s: &EvalSettings) -> Result<Vec<PrefixResult>> {
    s.validate()?;
    let prefixes = enumerate_eval_prefixes(inp.templates, inp.spec)?;
    let one = |p: &EvalPrefix| {
        run_prefix(inp, s, p).map_err(|e| e.context(format!("template {} prefix `{}`", p.template_id, p.prefix)))
    };
    if s.parallel {
        prefixes.par_iter().map(one).collect()
    } else {
        prefixes.iter().map(one).collect()
    }
}

/// Aggregates prefix results into a report.
pub fn build_report(inp: &EvalInputs<'_>, s: &EvalSettings, results: &[PrefixResult]) -> Result<FairnessReport> {
    let level = inp.spec.pairing();
    let mut per_template: BTreeMap<TemplateKey, Vec<f64>> = BTreeMap::new();
    let mut per_group: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in results {
        let value = match level {
            Pairing::SubgroupLevel => r.prefix.subgroup.clone(),
            Pairing::TokenLevel => r.prefix.token.clone(),
        };
        per_template.entry((r.prefix.template_id, value)).or_default().extend(&r.scores);
        per_group.entry(r.prefix.subgroup.clone()).or_default().extend(&r.scores);
    }
    let per_template = per_template
        .into_iter()
        .map(|(k, v)| Ok((k, ScoreDistribution::new(v)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let per_group =
        per_group.into_iter().map(|(k, v)| Ok((k, ScoreDistribution::new(v)?))).collect::<Result<BTreeMap<_, _>>>()?;
    let values: Vec<&str> = match level {
        Pairing::SubgroupLevel => inp.spec.values(),
        Pairing::TokenLevel => inp.spec.all_tokens().collect(),
    };
    let template_ids: Vec<u32> = inp.templates.iter().map(|t| t.id()).collect();
    let mut report =
        FairnessReport::compute(inp.spec.name(), &per_template, &template_ids, &values, &per_group, s.epsilon)?;
    let n = results.len() as f64;
    report.quality.semantic_similarity = Some(results.iter().map(|r| r.semantic_similarity).sum::<f64>() / n);
    report.quality.mention_fraction = Some(results.iter().map(|r| r.mention_fraction).sum::<f64>() / n);
    if let Some(corpus) = inp.test_corpus {
        report.quality.ppl = Some(perplexity(inp.model, corpus)?);
        report.quality.ppl_subset = match perplexity_subset(inp.model, corpus, inp.spec) {
            Ok(v) => Some(v),
            Err(Error::NoSensitiveSequences) => None,
            Err(e) => return Err(e),
        };
    }
    if s.emit_samples {
        report.samples = Some(
            per_template
                .into_iter()
                .map(|((template_id, value), scores)| TemplateSamples { template_id, value, scores })
                .collect(),
        );
    }
    Ok(report)
}

pub fn evaluate(inp: &EvalInputs<'_>, s: &EvalSettings) -> Result<FairnessReport> {
    let results = sample_prefixes(inp, s)?;
    build_report(inp, s, &results)
}

/// File-based evaluation config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRunConfig {
    pub checkpoint: PathBuf,
    pub spec: PathBuf,
    pub templates: PathBuf,
    /// Held-out corpus for PPL and PPL^s.
    #[serde(default)]
    pub test_corpus: Option<PathBuf>,
    /// Checkpoint whose token embeddings drive S.S.; defaults to `checkpoint`.
    #[serde(default)]
    pub encoder_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub scorer: ScorerChoice,
    #[serde(flatten)]
    pub settings: EvalSettings,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerChoice {
    /// The bundled opinion lexicon.
    #[default]
    Lexicon,
    /// Positive and negative word lists in the opinion-lexicon file format.
    LexiconFiles { positive: PathBuf, negative: PathBuf },
}

impl ScorerChoice {
    pub fn load(&self) -> Result<Lexicon> {
        match self {
            ScorerChoice::Lexicon => Ok(crate::data::opinion_lexicon()),
            ScorerChoice::LexiconFiles { positive, negative } => Lexicon::from_files(positive, negative),
        }
    }
}

pub fn evaluate_model(cfg: &EvalRunConfig) -> Result<FairnessReport> {
    cfg.settings.validate()?;
    let model = LmModel::load(&cfg.checkpoint).map_err(|e| e.context("loading checkpoint"))?;
    let spec = AttributeSpec::from_json_file(&cfg.spec).map_err(|e| e.context("loading attribute spec"))?;
    let templates = load_templates(&cfg.templates).map_err(|e| e.context("loading templates"))?;
    let lexicon = cfg.scorer.load().map_err(|e| e.context("loading lexicon"))?;
    let encoder = match &cfg.encoder_checkpoint {
        Some(p) => SentenceEncoder::from_model(&LmModel::load(p).map_err(|e| e.context("loading encoder checkpoint"))?),
        None => SentenceEncoder::from_model(&model),
    };
    let corpus = match &cfg.test_corpus {
        Some(p) => Some(read_corpus(p).map_err(|e| e.context("loading test corpus"))?),
        None => None,
    };
    let inp = EvalInputs {
        model: &model,
        spec: &spec,
        templates: &templates,
        scorer: &lexicon,
        encoder: &encoder,
        test_corpus: corpus.as_deref(),
    };
    evaluate(&inp, &cfg.settings)
}
