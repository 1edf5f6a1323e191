//! Curriculum orchestration and lambda sweeps.

use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalInputs, EvalSettings};
use crate::debias::{
    build_head_dataset, debias, train_lm, train_sentiment_head, CurriculumState, DebiasConfig, HeadDataConfig,
    HeadTrainConfig, Method, Stage, StageRecord, TrainConfig,
};
use crate::debias::head::HeadTrainOutput;
use crate::debias::train::CurvePoint;
use crate::error::Result;
use crate::fairness_spec::{AttributeSpec, Template};
use crate::lm::{LmConfig, LmModel, Vocab};
use crate::metrics::FairnessReport;
use crate::relevance::SentenceEncoder;
use crate::sentiment::{Lexicon, SentimentScorer};

/// Architecture settings; the vocabulary size follows from the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub context: usize,
    pub max_vocab: usize,
    pub init_seed: u64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self { layers: 2, width: 64, heads: 2, context: 64, max_vocab: 2000, init_seed: 0 }
    }
}

/// Vocabulary over `corpus` with every attribute token forced in.
pub fn build_vocab(corpus: &[Vec<String>], spec: &AttributeSpec, max_size: usize) -> Result<Vocab> {
    Vocab::build(corpus, spec.all_tokens(), max_size)
}

/// Step 1 from a fresh initialization.
pub fn pretrain(
    train: &[Vec<String>],
    val: &[Vec<String>],
    spec: &AttributeSpec,
    settings: &ModelSettings,
    cfg: &TrainConfig,
) -> Result<(CurriculumState, Vec<CurvePoint>)> {
    let vocab = build_vocab(train, spec, settings.max_vocab)?;
    let config = LmConfig {
        layers: settings.layers,
        width: settings.width,
        heads: settings.heads,
        context: settings.context,
        vocab_size: vocab.len(),
        ff_mult: 4,
    };
    let model = LmModel::new(config, vocab, settings.init_seed)?;
    let out = train_lm(model, train, val, cfg)?;
    let record = StageRecord::new(Stage::Pretrained, cfg.seed, &(settings, cfg));
    Ok((CurriculumState::pretrained(out.model, record), out.curve))
}

/// Step 2: fits the sentiment head on `corpus` under the current model.
pub fn train_head_stage(
    state: CurriculumState,
    corpus: &[Vec<String>],
    lexicon: &Lexicon,
    data_cfg: &HeadDataConfig,
    head_cfg: &HeadTrainConfig,
) -> Result<(CurriculumState, HeadTrainOutput)> {
    let data = build_head_dataset(corpus, &state.model, lexicon, data_cfg)?;
    let out = train_sentiment_head(&data, head_cfg)?;
    let record = StageRecord::new(Stage::HeadTrained, head_cfg.seed, &(data_cfg, head_cfg));
    let state = state.with_head(out.head.clone(), record)?;
    Ok((state, out))
}

/// Everything a sweep needs besides the starting state.
pub struct SweepInputs<'a> {
    pub train_corpus: &'a [Vec<String>],
    pub spec: &'a AttributeSpec,
    pub templates: &'a [Template],
    pub scorer: &'a dyn SentimentScorer,
    pub encoder: &'a SentenceEncoder,
    pub test_corpus: Option<&'a [Vec<String>]>,
    pub eval: EvalSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub lambda: f64,
    pub report: FairnessReport,
}

/// Evaluates a model with the sweep's shared settings.
pub fn evaluate_with(inp: &SweepInputs<'_>, model: &LmModel) -> Result<FairnessReport> {
    let e = EvalInputs {
        model,
        spec: inp.spec,
        templates: inp.templates,
        scorer: inp.scorer,
        encoder: inp.encoder,
        test_corpus: inp.test_corpus,
    };
    evaluate(&e, &inp.eval)
}

/// Debiases `base` once per lambda (same seeds each time) and evaluates each result.
pub fn sweep_lambda(
    base: &CurriculumState,
    inp: &SweepInputs<'_>,
    cfg: &DebiasConfig,
    lambdas: &[f64],
) -> Result<Vec<SweepRow>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let run = DebiasConfig { lambda, ..cfg.clone() };
            let out = debias(base.clone(), inp.train_corpus, inp.spec, &run)
                .map_err(|e| e.context(format!("debias {} lambda {lambda}", cfg.method)))?;
            let report = evaluate_with(inp, &out.state.model)?;
            Ok(SweepRow { method: cfg.method, lambda, report })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Trade-off table: one row per (method, lambda).
pub fn trade_off_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "lambda", "individual_fairness", "group_fairness", "ppl", "ppl_subset", "semantic_similarity", "mention_fraction"])
        .expect("in-memory write");
    for r in rows {
        let q = &r.report.quality;
        w.write_record([
            r.method.to_string(),
            r.lambda.to_string(),
            r.report.individual_fairness.to_string(),
            r.report.group_fairness.to_string(),
            opt(q.ppl),
            opt(q.ppl_subset),
            opt(q.semantic_similarity),
            opt(q.mention_fraction),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

/// gnuplot script plotting I.F. against S.S. from the trade-off CSV.
pub fn gnuplot_script(csv_file: &str, output_png: &str) -> String {
    format!(
        "set datafile separator ','\n\
         set key autotitle columnhead\n\
         set terminal pngcairo size 800,600\n\
         set output '{output_png}'\n\
         set xlabel 'semantic similarity'\n\
         set ylabel 'individual fairness (W1)'\n\
         plot '{csv_file}' using 7:3 with linespoints title 'I.F. vs S.S.'\n"
    )
}
