use fairlm_core::data::opinion_lexicon;
use fairlm_core::debias::*;
use fairlm_core::fairness_spec::{AttributeSpec, Pairing, SubgroupSpec};
use fairlm_core::harness::corpus::{neutral_vocabulary, NEGATIVE_ADJECTIVES, POSITIVE_ADJECTIVES};
use fairlm_core::harness::eval::prefix_seed;
use fairlm_core::harness::report::to_markdown;
use fairlm_core::harness::sweep::{gnuplot_script, trade_off_csv};
use fairlm_core::harness::*;
use fairlm_core::lm::{LmConfig, LmModel, Vocab};
use fairlm_core::metrics::FairnessReport;
use fairlm_core::relevance::SentenceEncoder;
use fairlm_core::sentiment::lexicon_score;
use fairlm_core::Error;

fn subgroup_sentences<'a>(corpus: &'a [Vec<String>], tokens: &'a [&str]) -> impl Iterator<Item = &'a Vec<String>> + 'a {
    corpus.iter().filter(move |s| s.iter().any(|w| tokens.contains(&w.as_str())))
}

#[test]
fn planted_corpus_follows_probabilities() {
    let lex = opinion_lexicon();
    let spec = planted_spec();
    let corpus = generate_planted_corpus(&PlantedBiasConfig::new(spec.clone(), &[("A", 1.0), ("B", 0.0)], 600, 2)).unwrap();
    let a: Vec<f64> = subgroup_sentences(&corpus, &["Zorbia", "Quelland"]).map(|s| lexicon_score(s, &lex).value()).collect();
    let b: Vec<f64> = subgroup_sentences(&corpus, &["Vastria", "Morvania"]).map(|s| lexicon_score(s, &lex).value()).collect();
    assert!(!a.is_empty() && !b.is_empty());
    assert!(a.iter().all(|&v| v == 1.0));
    assert!(b.iter().all(|&v| v == 0.0));
    let fillers = corpus.iter().filter(|s| !s.iter().any(|w| spec.is_sensitive(w))).count();
    assert_eq!(fillers, 180);
    assert_eq!(a.len() + b.len() + fillers, 600);
}

#[test]
fn balanced_corpus_has_close_subgroup_means() {
    let lex = opinion_lexicon();
    let corpus = generate_planted_corpus(&PlantedBiasConfig::new(planted_spec(), &[("A", 0.5), ("B", 0.5)], 10_000, 3)).unwrap();
    let mean = |toks: &[&str]| {
        let v: Vec<f64> = subgroup_sentences(&corpus, toks).map(|s| lexicon_score(s, &lex).value()).collect();
        (v.iter().sum::<f64>() / v.len() as f64, v.len() as f64)
    };
    let ((ma, na), (mb, nb)) = (mean(&["Zorbia", "Quelland"]), mean(&["Vastria", "Morvania"]));
    // scores are 0 or 1 with p = 0.5
    let se = (0.25 / na + 0.25 / nb).sqrt();
    assert!(4.0 * se < 0.05);
    assert!((ma - mb).abs() < 4.0 * se, "{ma} vs {mb}");
}

#[test]
fn planted_corpus_config_errors_and_determinism() {
    let spec = planted_spec();
    let bad = |p: &[(&str, f64)], n| generate_planted_corpus(&PlantedBiasConfig::new(spec.clone(), p, n, 0));
    assert!(matches!(bad(&[("A", 0.9), ("B", 0.1)], 0), Err(Error::InvalidProbability(_))));
    assert!(matches!(bad(&[("A", 1.5), ("B", 0.1)], 10), Err(Error::InvalidProbability(_))));
    assert!(matches!(bad(&[("A", 0.5)], 10), Err(Error::InvalidProbability(_))));
    assert!(matches!(bad(&[("A", 0.5), ("B", 0.5), ("C", 0.5)], 10), Err(Error::InvalidProbability(_))));
    assert_eq!(bad(&[("A", 0.9), ("B", 0.1)], 50).unwrap(), bad(&[("A", 0.9), ("B", 0.1)], 50).unwrap());
    assert_ne!(
        bad(&[("A", 0.9), ("B", 0.1)], 50).unwrap(),
        generate_planted_corpus(&PlantedBiasConfig::new(spec.clone(), &[("A", 0.9), ("B", 0.1)], 50, 1)).unwrap()
    );
}

#[test]
fn grammar_words_carry_no_opinion() {
    let lex = opinion_lexicon();
    for w in neutral_vocabulary() {
        assert!(!lex.is_opinion_word(w), "{w}");
    }
    assert!(POSITIVE_ADJECTIVES.iter().all(|w| lex.is_positive(w) && !lex.is_negative(w)));
    assert!(NEGATIVE_ADJECTIVES.iter().all(|w| lex.is_negative(w) && !lex.is_positive(w)));
    for t in planted_spec().all_tokens() {
        assert!(!lex.is_opinion_word(t));
    }
}

#[test]
fn corpus_files_round_trip() {
    let corpus = generate_planted_corpus(&PlantedBiasConfig::new(planted_spec(), &[("A", 0.9), ("B", 0.1)], 40, 5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.txt");
    write_corpus(&path, &corpus).unwrap();
    assert_eq!(read_corpus(&path).unwrap(), corpus);
    assert!(matches!(read_corpus(dir.path().join("missing.txt")), Err(Error::Io { .. })));
}

#[test]
fn prefix_seeds_are_stable_and_distinct() {
    assert_eq!(prefix_seed(4, 1, 0), prefix_seed(4, 1, 0));
    assert_ne!(prefix_seed(4, 1, 0), prefix_seed(4, 1, 1));
    assert_ne!(prefix_seed(4, 1, 0), prefix_seed(4, 2, 0));
    assert_ne!(prefix_seed(4, 1, 0), prefix_seed(5, 1, 0));
}

fn small_model(corpus: &[Vec<String>], spec: &AttributeSpec, steps: usize) -> LmModel {
    let vocab = Vocab::build(corpus, spec.all_tokens(), 500).unwrap();
    let cfg = LmConfig { layers: 2, width: 16, heads: 2, context: 16, vocab_size: vocab.len(), ff_mult: 4 };
    let model = LmModel::new(cfg, vocab, 2).unwrap();
    let tc = TrainConfig { steps, batch_size: 8, lr: 5e-3, eval_every: 0, ..Default::default() };
    train_lm(model, corpus, &[], &tc).unwrap().model
}

fn planted(n: usize) -> Vec<Vec<String>> {
    generate_planted_corpus(&PlantedBiasConfig::new(planted_spec(), &[("A", 0.9), ("B", 0.1)], n, 11)).unwrap()
}

fn settings(n: usize) -> EvalSettings {
    EvalSettings { samples_per_prefix: n, max_tokens: 12, seed: 7, ..Default::default() }
}

/// Copies the first attribute token's embedding row onto every other one.
fn symmetrize(model: &mut LmModel, spec: &AttributeSpec) {
    let ids: Vec<usize> = spec.all_tokens().map(|t| model.vocab.id(t)).collect();
    let row = model.tok_emb.row(ids[0]).to_vec();
    for &i in &ids[1..] {
        model.tok_emb.row_mut(i).copy_from_slice(&row);
    }
}

#[test]
fn symmetric_model_is_exactly_fair() {
    let spec = planted_spec();
    let fillers: Vec<Vec<String>> = planted(300).into_iter().filter(|s| !s.iter().any(|w| spec.is_sensitive(w))).collect();
    let mut model = small_model(&fillers, &spec, 40);
    symmetrize(&mut model, &spec);
    let enc = SentenceEncoder::from_model(&model);
    let lex = opinion_lexicon();
    let templates = planted_templates();
    let inp = EvalInputs { model: &model, spec: &spec, templates: &templates, scorer: &lex, encoder: &enc, test_corpus: None };
    let r = evaluate(&inp, &settings(30)).unwrap();
    assert_eq!(r.individual_fairness, 0.0);
    assert_eq!(r.group_fairness, 0.0);
    assert!(r.quality.ppl.is_none());
}

#[test]
fn single_samples_give_point_mass_distances() {
    let spec = AttributeSpec::new(
        "place",
        Pairing::TokenLevel,
        vec![SubgroupSpec::new("A", &["Zorbia", "Quelland"]), SubgroupSpec::new("B", &["Vastria"])],
    )
    .unwrap();
    let corpus = planted(400);
    let model = small_model(&corpus, &planted_spec(), 60);
    let enc = SentenceEncoder::from_model(&model);
    let lex = opinion_lexicon();
    let templates = planted_templates();
    let inp = EvalInputs { model: &model, spec: &spec, templates: &templates, scorer: &lex, encoder: &enc, test_corpus: None };
    let r = evaluate(&inp, &EvalSettings { emit_samples: true, ..settings(1) }).unwrap();
    let samples = r.samples.as_ref().unwrap();
    let score = |t: u32, v: &str| {
        let s = samples.iter().find(|s| s.template_id == t && s.value == v).unwrap();
        assert_eq!(s.scores.count(), 1);
        s.scores.samples()[0]
    };
    assert_eq!(r.pairwise_w1.len(), 4 * 3);
    for p in &r.pairwise_w1 {
        assert_eq!(p.w1, (score(p.template_id, &p.value_a) - score(p.template_id, &p.value_b)).abs());
    }
}

#[test]
fn evaluation_is_deterministic_and_order_free() {
    let spec = planted_spec();
    let corpus = planted(300);
    let model = small_model(&corpus, &spec, 40);
    let enc = SentenceEncoder::from_model(&model);
    let lex = opinion_lexicon();
    let templates = planted_templates();
    let inp = EvalInputs { model: &model, spec: &spec, templates: &templates, scorer: &lex, encoder: &enc, test_corpus: Some(&corpus[..50]) };
    let par = evaluate(&inp, &settings(20)).unwrap().to_json();
    let ser = evaluate(&inp, &EvalSettings { parallel: false, ..settings(20) }).unwrap().to_json();
    assert_eq!(par, ser);
    let mut reversed = templates.clone();
    reversed.reverse();
    let inp2 = EvalInputs { templates: &reversed, ..inp };
    assert_eq!(evaluate(&inp2, &settings(20)).unwrap().to_json(), par);
    let r = FairnessReport::from_json(&par).unwrap();
    assert!(r.quality.ppl.is_some() && r.quality.ppl_subset.is_some());
    assert!(to_markdown(&r).contains("| I.F. |"));
}

#[test]
fn evaluation_settings_are_validated() {
    let spec = planted_spec();
    let model = small_model(&planted(50), &spec, 1);
    let enc = SentenceEncoder::from_model(&model);
    let lex = opinion_lexicon();
    let templates = planted_templates();
    let inp = EvalInputs { model: &model, spec: &spec, templates: &templates, scorer: &lex, encoder: &enc, test_corpus: None };
    assert!(matches!(evaluate(&inp, &settings(0)), Err(Error::InvalidConfig(_))));
    assert!(evaluate(&inp, &EvalSettings { max_tokens: 0, ..settings(2) }).is_err());
    assert!(evaluate(&inp, &EvalSettings { temperature: -1.0, ..settings(2) }).is_err());
    let inp = EvalInputs { templates: &[], ..inp };
    assert!(matches!(evaluate(&inp, &settings(2)), Err(Error::EmptyTemplates)));
}

#[test]
fn evaluate_model_reads_files() {
    let spec = planted_spec();
    let corpus = planted(200);
    let model = small_model(&corpus, &spec, 20);
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    model.save(p("m.json")).unwrap();
    std::fs::write(p("spec.json"), serde_json::to_string(&spec).unwrap()).unwrap();
    std::fs::write(p("t.json"), serde_json::to_string(&planted_templates()).unwrap()).unwrap();
    write_corpus(p("test.txt"), &corpus[..30]).unwrap();
    let cfg = EvalRunConfig {
        checkpoint: p("m.json"),
        spec: p("spec.json"),
        templates: p("t.json"),
        test_corpus: Some(p("test.txt")),
        encoder_checkpoint: None,
        scorer: Default::default(),
        settings: settings(5),
    };
    let a = evaluate_model(&cfg).unwrap().to_json();
    assert_eq!(a, evaluate_model(&cfg).unwrap().to_json());
    let missing = EvalRunConfig { checkpoint: p("nope.json"), ..cfg };
    assert!(matches!(evaluate_model(&missing), Err(Error::Context { .. }) | Err(Error::Io { .. })));
}

struct SweepSetup {
    state: CurriculumState,
    train: Vec<Vec<String>>,
    test: Vec<Vec<String>>,
    spec: AttributeSpec,
}

fn sweep_setup() -> SweepSetup {
    let spec = planted_spec();
    let corpus = planted(300);
    let (train, test) = split_corpus(&corpus, 0.2, 0).unwrap();
    let settings = ModelSettings { width: 16, context: 16, ..Default::default() };
    let tc = TrainConfig { steps: 40, batch_size: 8, lr: 5e-3, eval_every: 0, ..Default::default() };
    let (state, _) = pretrain(&train, &test, &spec, &settings, &tc).unwrap();
    let (state, _) = train_head_stage(
        state,
        &train,
        &opinion_lexicon(),
        &HeadDataConfig::default(),
        &HeadTrainConfig { steps: 20, ..Default::default() },
    )
    .unwrap();
    SweepSetup { state, train, test, spec }
}

#[test]
fn sweep_reductions() {
    let s = sweep_setup();
    let lex = opinion_lexicon();
    let enc = SentenceEncoder::from_model(&s.state.model);
    let templates = planted_templates();
    let inp = SweepInputs {
        train_corpus: &s.train,
        spec: &s.spec,
        templates: &templates,
        scorer: &lex,
        encoder: &enc,
        test_corpus: Some(&s.test),
        eval: settings(10),
    };
    let cfg = DebiasConfig { method: Method::SentimentReg, lambda: 0.0, steps: 4, lr: 5e-4, batch_size: 4, clip: Some(1.0), seed: 1 };
    assert!(sweep_lambda(&s.state, &inp, &cfg, &[]).unwrap().is_empty());

    let rows = sweep_lambda(&s.state, &inp, &cfg, &[0.0, 3.0, 3.0]).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1], rows[2]);

    let subset: Vec<Vec<String>> = s.train.iter().filter(|t| t.iter().any(|w| s.spec.is_sensitive(w))).cloned().collect();
    let tc = TrainConfig { steps: 4, batch_size: 4, lr: 5e-4, clip: Some(1.0), seed: 1, eval_every: 0, val_limit: 0 };
    let plain = train_lm(s.state.model.clone(), &subset, &[], &tc).unwrap().model;
    assert_eq!(rows[0].report, sweep::evaluate_with(&inp, &plain).unwrap());

    let csv = trade_off_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("method,lambda,individual_fairness,group_fairness"));
    assert!(lines[2].starts_with("sentiment_reg,3,"));
    let script = gnuplot_script("t.csv", "t.png");
    assert!(script.contains("'t.csv'") && script.contains("'t.png'"));
}
