mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fairlm_core::debias::{
    debias, split_corpus, CurriculumState, DebiasConfig, DebiasLogRow, Method, Stage, TrainConfig,
};
use fairlm_core::fairness_spec::{load_templates, AttributeSpec};
use fairlm_core::harness::report::to_markdown;
use fairlm_core::harness::sweep::{gnuplot_script, trade_off_csv};
use fairlm_core::harness::{
    evaluate_model, generate_planted_corpus, planted_spec, planted_templates, pretrain, read_corpus, sweep_lambda,
    train_head_stage, write_corpus, EvalRunConfig, PlantedBiasConfig, SweepInputs,
};
use fairlm_core::lm::LmModel;
use fairlm_core::metrics::FairnessReport;
use fairlm_core::relevance::SentenceEncoder;
use fairlm_core::{Error, Result};

use config::*;

#[derive(Parser)]
#[command(name = "fairlm", version, about = "Counterfactual sentiment-bias evaluation and debiasing for small language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with a planted subgroup-sentiment association.
    GenCorpus(GenCorpusArgs),
    /// Pretrain a language model (curriculum step 1).
    Train(TrainArgs),
    /// Train the sentiment head on a pretrained model (step 2).
    TrainHead(HeadArgs),
    /// Fine-tune with embedding or sentiment regularization (step 3).
    Debias(DebiasArgs),
    /// Sample continuations for every template prefix and report fairness metrics.
    Evaluate(EvaluateArgs),
    /// Debias once per lambda from the same checkpoint and tabulate the trade-off.
    Sweep(SweepArgs),
    /// Render a report JSON as Markdown or CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Attribute spec JSON (defaults to the built-in two-subgroup place spec).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Positive-sentence probability for a subgroup, as VALUE=P (repeatable).
    #[arg(long = "prob", value_parser = parse_prob)]
    probs: Vec<(String, f64)>,
    #[arg(long)]
    sentences: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    filler_fraction: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also split off a held-out file.
    #[arg(long)]
    test_out: Option<PathBuf>,
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Write the attribute spec used.
    #[arg(long)]
    spec_out: Option<PathBuf>,
    /// Write matching evaluation templates (built-in spec only).
    #[arg(long)]
    templates_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    val_corpus: Option<PathBuf>,
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    curve: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    context: Option<usize>,
}

#[derive(Args)]
struct HeadArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DebiasArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalFlags {
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    test_corpus: Option<PathBuf>,
    /// Checkpoint whose token embeddings drive semantic similarity.
    #[arg(long)]
    encoder_checkpoint: Option<PathBuf>,
    /// Samples per prefix.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Cosine threshold for semantic similarity.
    #[arg(long)]
    threshold: Option<f64>,
    /// Fairness threshold on every pairwise W1.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Include sorted score samples in the report.
    #[arg(long)]
    emit_samples: bool,
    /// Sample prefixes one at a time.
    #[arg(long)]
    serial: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    eval: EvalFlags,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long = "method", value_enum)]
    methods: Vec<MethodArg>,
    /// Comma-separated lambda values; an empty string sweeps nothing.
    #[arg(long, value_parser = parse_lambdas)]
    lambdas: Option<Lambdas>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    eval: EvalFlags,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Markdown)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    EmbeddingReg,
    SentimentReg,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::EmbeddingReg => Method::EmbeddingReg,
            MethodArg::SentimentReg => Method::SentimentReg,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Markdown,
    Csv,
}

#[derive(Clone, Debug)]
struct Lambdas(Vec<f64>);

fn parse_lambdas(s: &str) -> std::result::Result<Lambdas, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|e| format!("bad lambda `{t}`: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(Lambdas)
}

fn parse_prob(s: &str) -> std::result::Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected VALUE=P, got `{s}`"))?;
    let p = v.parse::<f64>().map_err(|e| format!("bad probability `{v}`: {e}"))?;
    Ok((k.to_string(), p))
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    s
}

fn load_spec(path: Option<&PathBuf>) -> Result<AttributeSpec> {
    match path {
        Some(p) => AttributeSpec::from_json_file(p).map_err(|e| e.context("loading attribute spec")),
        None => Ok(planted_spec()),
    }
}

fn load_state(path: &Path) -> Result<CurriculumState> {
    CurriculumState::load(path).map_err(|e| e.context(format!("loading checkpoint {}", path.display())))
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let mut c: GenCorpusConfig = load(a.config.as_deref())?;
    set_opt(&mut c.spec, a.spec);
    if !a.probs.is_empty() {
        c.positive_probability = a.probs.into_iter().collect();
    }
    set(&mut c.sentences, a.sentences);
    set(&mut c.seed, a.seed);
    set(&mut c.filler_fraction, a.filler_fraction);
    set_opt(&mut c.out, a.out);
    set_opt(&mut c.test_out, a.test_out);
    set(&mut c.test_fraction, a.test_fraction);
    set_opt(&mut c.spec_out, a.spec_out);
    set_opt(&mut c.templates_out, a.templates_out);
    let out = required(&c.out, "out")?;
    let builtin = c.spec.is_none();
    let spec = load_spec(c.spec.as_ref())?;
    let cfg = PlantedBiasConfig {
        spec: spec.clone(),
        positive_probability: c.positive_probability.clone(),
        sentences: c.sentences,
        seed: c.seed,
        filler_fraction: c.filler_fraction,
    };
    let corpus = generate_planted_corpus(&cfg)?;
    match &c.test_out {
        Some(test_out) => {
            let (train, test) = split_corpus(&corpus, c.test_fraction, c.seed)?;
            write_corpus(out, &train)?;
            write_corpus(test_out, &test)?;
        }
        None => write_corpus(out, &corpus)?,
    }
    if let Some(p) = &c.spec_out {
        write_file(p, &to_json(&spec))?;
    }
    if let Some(p) = &c.templates_out {
        if !builtin {
            return Err(Error::InvalidConfig("templates_out needs the built-in spec".into()));
        }
        write_file(p, &to_json(&planted_templates()))?;
    }
    eprintln!("wrote {} sentences to {}", corpus.len(), out.display());
    Ok(())
}

fn curve_csv(curve: &[fairlm_core::debias::train::CurvePoint]) -> String {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("step,train_loss,val_loss\n");
    for c in curve {
        s.push_str(&format!("{},{},{}\n", c.step, cell(c.train_loss), cell(c.val_loss)));
    }
    s
}

fn train(a: TrainArgs) -> Result<()> {
    let mut c: TrainRunConfig = load(a.config.as_deref())?;
    set_opt(&mut c.corpus, a.corpus);
    set_opt(&mut c.val_corpus, a.val_corpus);
    set_opt(&mut c.spec, a.spec);
    set_opt(&mut c.out, a.out);
    set_opt(&mut c.curve, a.curve);
    set(&mut c.train.steps, a.steps);
    set(&mut c.train.lr, a.lr);
    set(&mut c.train.batch_size, a.batch_size);
    set(&mut c.train.seed, a.seed);
    set(&mut c.model.layers, a.layers);
    set(&mut c.model.width, a.width);
    set(&mut c.model.heads, a.heads);
    set(&mut c.model.context, a.context);
    let out = required(&c.out, "out")?;
    let corpus = read_corpus(required(&c.corpus, "corpus")?)?;
    let val = match &c.val_corpus {
        Some(p) => read_corpus(p)?,
        None => Vec::new(),
    };
    let spec = load_spec(c.spec.as_ref())?;
    let (state, curve) = pretrain(&corpus, &val, &spec, &c.model, &c.train)?;
    state.save(out)?;
    if let Some(p) = &c.curve {
        write_file(p, &curve_csv(&curve))?;
    }
    if let Some(v) = curve.last().and_then(|p| p.val_loss) {
        eprintln!("validation perplexity {:.4}", v.exp());
    }
    Ok(())
}

fn train_head(a: HeadArgs) -> Result<()> {
    let mut c: HeadRunConfig = load(a.config.as_deref())?;
    set_opt(&mut c.checkpoint, a.checkpoint);
    set_opt(&mut c.corpus, a.corpus);
    set_opt(&mut c.out, a.out);
    set(&mut c.head.steps, a.steps);
    set(&mut c.head.lr, a.lr);
    set(&mut c.head.seed, a.seed);
    let out = required(&c.out, "out")?;
    let state = load_state(required(&c.checkpoint, "checkpoint")?)?;
    let corpus = read_corpus(required(&c.corpus, "corpus")?)?;
    let lexicon = c.scorer.load()?;
    let (state, result) = train_head_stage(state, &corpus, &lexicon, &c.data, &c.head)?;
    state.save(out)?;
    eprintln!(
        "head accuracy: train {:.4} ({} examples), held-out {:.4} ({} examples)",
        result.train_accuracy, result.train_size, result.heldout_accuracy, result.heldout_size
    );
    Ok(())
}

/// Pretraining settings recorded in the state, if any.
fn pretrain_config(state: &CurriculumState) -> TrainConfig {
    state
        .provenance
        .iter()
        .find(|r| r.stage == Stage::Pretrained)
        .and_then(|r| r.config.get(1).cloned())
        .and_then(|v| serde_json::from_value(v).ok())
        .unwrap_or_default()
}

fn debias_config(state: &CurriculumState, method: Method, lambda: f64, steps: Option<usize>, lr: Option<f64>, batch: Option<usize>, seed: u64) -> DebiasConfig {
    let mut cfg = DebiasConfig::from_pretrain(&pretrain_config(state), method, lambda);
    set(&mut cfg.steps, steps);
    set(&mut cfg.lr, lr);
    set(&mut cfg.batch_size, batch);
    cfg.seed = seed;
    cfg
}

fn log_csv(rows: &[DebiasLogRow]) -> String {
    let mut s = String::from("step,lm_loss,fairness_loss,total_loss\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.lm_loss, r.fairness_loss, r.total_loss));
    }
    s
}

fn run_debias(a: DebiasArgs) -> Result<()> {
    let mut c: DebiasRunConfig = load(a.config.as_deref())?;
    set_opt(&mut c.checkpoint, a.checkpoint);
    set_opt(&mut c.corpus, a.corpus);
    set_opt(&mut c.spec, a.spec);
    set_opt(&mut c.out, a.out);
    set_opt(&mut c.log, a.log);
    set(&mut c.method, a.method.map(Method::from));
    set(&mut c.lambda, a.lambda);
    set_opt(&mut c.steps, a.steps);
    set_opt(&mut c.lr, a.lr);
    set_opt(&mut c.batch_size, a.batch_size);
    set(&mut c.seed, a.seed);
    let out = required(&c.out, "out")?;
    let state = load_state(required(&c.checkpoint, "checkpoint")?)?;
    let corpus = read_corpus(required(&c.corpus, "corpus")?)?;
    let spec = load_spec(c.spec.as_ref())?;
    let cfg = debias_config(&state, c.method, c.lambda, c.steps, c.lr, c.batch_size, c.seed);
    let result = debias(state, &corpus, &spec, &cfg)?;
    result.state.save(out)?;
    if let Some(p) = &c.log {
        write_file(p, &log_csv(&result.log))?;
    }
    if let Some(last) = result.log.last() {
        eprintln!("step {}: lm {:.4}, fairness {:.6}, total {:.4}", last.step, last.lm_loss, last.fairness_loss, last.total_loss);
    }
    Ok(())
}

fn apply_eval_flags(c: &mut EvalFileConfig, f: EvalFlags) {
    set_opt(&mut c.templates, f.templates);
    set_opt(&mut c.test_corpus, f.test_corpus);
    set_opt(&mut c.encoder_checkpoint, f.encoder_checkpoint);
    let s = &mut c.settings;
    set(&mut s.samples_per_prefix, f.samples);
    set(&mut s.max_tokens, f.max_tokens);
    set(&mut s.temperature, f.temperature);
    set(&mut s.similarity_threshold, f.threshold);
    set_opt(&mut s.epsilon, f.epsilon);
    s.emit_samples |= f.emit_samples;
    if f.serial {
        s.parallel = false;
    }
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    let mut c: EvalFileConfig = load(a.config.as_deref())?;
    set_opt(&mut c.checkpoint, a.checkpoint);
    set_opt(&mut c.spec, a.spec);
    set_opt(&mut c.out, a.out);
    set(&mut c.settings.seed, a.seed);
    apply_eval_flags(&mut c, a.eval);
    let cfg = EvalRunConfig {
        checkpoint: required(&c.checkpoint, "checkpoint")?.clone(),
        spec: required(&c.spec, "spec")?.clone(),
        templates: required(&c.templates, "templates")?.clone(),
        test_corpus: c.test_corpus.clone(),
        encoder_checkpoint: c.encoder_checkpoint.clone(),
        scorer: c.scorer.clone(),
        settings: c.settings.clone(),
    };
    let json = evaluate_model(&cfg)?.to_json();
    match &c.out {
        Some(p) => write_file(p, &json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let mut c: SweepRunConfig = load(a.config.as_deref())?;
    set_opt(&mut c.checkpoint, a.checkpoint);
    set_opt(&mut c.corpus, a.corpus);
    set_opt(&mut c.spec, a.spec);
    set_opt(&mut c.out_dir, a.out_dir);
    if !a.methods.is_empty() {
        c.methods = a.methods.into_iter().map(Method::from).collect();
    }
    set(&mut c.lambdas, a.lambdas.map(|l| l.0));
    set_opt(&mut c.steps, a.steps);
    set_opt(&mut c.lr, a.lr);
    set(&mut c.seed, a.seed);
    let mut e = EvalFileConfig {
        templates: c.templates.take(),
        test_corpus: c.test_corpus.take(),
        encoder_checkpoint: c.encoder_checkpoint.take(),
        settings: c.eval.clone(),
        ..Default::default()
    };
    apply_eval_flags(&mut e, a.eval);
    let out_dir = required(&c.out_dir, "out_dir")?.clone();
    let checkpoint = required(&c.checkpoint, "checkpoint")?.clone();
    let templates_path = required(&e.templates, "templates")?.clone();
    let corpus_path = required(&c.corpus, "corpus")?.clone();
    e.settings.validate()?;

    let state = load_state(&checkpoint)?;
    let corpus = read_corpus(&corpus_path)?;
    let spec = load_spec(c.spec.as_ref())?;
    let templates = load_templates(&templates_path).map_err(|err| err.context("loading templates"))?;
    let lexicon = c.scorer.load()?;
    let encoder = match &e.encoder_checkpoint {
        Some(p) => SentenceEncoder::from_model(&LmModel::load(p).map_err(|err| err.context("loading encoder checkpoint"))?),
        None => SentenceEncoder::from_model(&state.model),
    };
    let test = match &e.test_corpus {
        Some(p) => Some(read_corpus(p)?),
        None => None,
    };
    let inp = SweepInputs {
        train_corpus: &corpus,
        spec: &spec,
        templates: &templates,
        scorer: &lexicon,
        encoder: &encoder,
        test_corpus: test.as_deref(),
        eval: e.settings.clone(),
    };
    std::fs::create_dir_all(&out_dir).map_err(|err| Error::io(&out_dir, err))?;
    let mut rows = Vec::new();
    for &method in &c.methods {
        let cfg = debias_config(&state, method, 0.0, c.steps, c.lr, c.batch_size, c.seed);
        for row in sweep_lambda(&state, &inp, &cfg, &c.lambdas)? {
            write_file(&out_dir.join(format!("report_{}_{}.json", row.method, row.lambda)), &row.report.to_json())?;
            eprintln!("{} lambda {}: I.F. {:.4}", row.method, row.lambda, row.report.individual_fairness);
            rows.push(row);
        }
    }
    write_file(&out_dir.join("trade_off.csv"), &trade_off_csv(&rows))?;
    write_file(&out_dir.join("trade_off.gp"), &gnuplot_script("trade_off.csv", "trade_off.png"))?;
    Ok(())
}

fn run_report(a: ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let report = FairnessReport::from_json(&text)?;
    let rendered = match a.format {
        Format::Markdown => to_markdown(&report),
        Format::Csv => report.to_csv(),
    };
    match &a.out {
        Some(p) => write_file(p, &rendered),
        None => {
            print!("{rendered}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Train(a) => train(a),
        Command::TrainHead(a) => train_head(a),
        Command::Debias(a) => run_debias(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Report(a) => run_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
