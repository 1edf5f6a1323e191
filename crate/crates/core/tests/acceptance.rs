//! One test per acceptance criterion; each prints a single PASS/FAIL line.
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use fairlm_core::data::opinion_lexicon;
use fairlm_core::debias::*;
use fairlm_core::fairness_spec::{AttributeSpec, Pairing, SubgroupSpec};
use fairlm_core::harness::*;
use fairlm_core::lm::tape::Tape;
use fairlm_core::lm::tensor::Mat;
use fairlm_core::lm::{LmConfig, LmModel, Vocab};
use fairlm_core::metrics::{demographic_disparity, group_fairness, individual_fairness, wasserstein1, FairnessReport, ScoreDistribution};
use fairlm_core::relevance::SentenceEncoder;
use fairlm_core::sentiment::{lexicon_score, Lexicon};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

fn report(n: u32, ok: bool, detail: impl AsRef<str>) {
    println!("criterion {n}: {} ({})", if ok { "PASS" } else { "FAIL" }, detail.as_ref());
    assert!(ok, "criterion {n} failed: {}", detail.as_ref());
}

fn dist(v: Vec<f64>) -> ScoreDistribution {
    ScoreDistribution::new(v).unwrap()
}

fn random_dist(rng: &mut ChaCha8Rng) -> ScoreDistribution {
    let n = rng.random_range(1..=12);
    dist((0..n).map(|_| rng.random::<f64>()).collect())
}

/// Midpoint-rule integral of |F_p - F_q| over [0, 1] with `points` cells,
/// walking both sorted sample lists alongside the grid.
fn grid_w1(p: &ScoreDistribution, q: &ScoreDistribution, points: usize) -> f64 {
    let (a, b) = (p.samples(), q.samples());
    let (mut i, mut j) = (0, 0);
    let h = 1.0 / points as f64;
    let mut total = 0.0;
    for k in 0..points {
        let t = (k as f64 + 0.5) * h;
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        total += (i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs();
    }
    total * h
}

#[test]
fn criterion_1_wasserstein_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pairs: Vec<_> = (0..1000).map(|_| (random_dist(&mut rng), random_dist(&mut rng))).collect();
    let worst = pairs
        .par_iter()
        .map(|(p, q)| (wasserstein1(p, q) - grid_w1(p, q, 1_000_000)).abs())
        .reduce(|| 0.0, f64::max);
    let elapsed = start.elapsed();
    report(1, worst <= 1e-6 && elapsed < Duration::from_secs(10), format!("max |exact - grid| = {worst:.2e}, {elapsed:.2?}"));
}

#[test]
fn criterion_2_disparity_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_z = 0.0f64;
    let mut ok = true;
    for _ in 0..50 {
        let (p, q) = (random_dist(&mut rng), random_dist(&mut rng));
        let draws: Vec<f64> = (0..100_000).map(|_| demographic_disparity(&p, &q, rng.random::<f64>())).collect();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        let diff = (mean - wasserstein1(&p, &q)).abs();
        if se == 0.0 {
            ok &= diff < 1e-12;
        } else {
            worst_z = worst_z.max(diff / se);
            ok &= diff <= 3.0 * se;
        }
    }
    report(2, ok, format!("largest deviation {worst_z:.2} standard errors over 50 pairs"));
}

/// Rejection sample from a normal truncated to [0, 1].
fn truncated_normal(mean: f64, sd: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let z: f64 = StandardNormal.sample(rng);
        let x = mean + sd * z;
        if (0.0..=1.0).contains(&x) {
            out.push(x);
        }
    }
    out
}

/// W1 between two truncated normals by integrating their CDFs on a grid.
fn truncated_normal_w1(m1: f64, m2: f64, sd: f64) -> f64 {
    let cells = 200_000;
    let h = 1.0 / cells as f64;
    let pdf = |m: f64, x: f64| (-0.5 * ((x - m) / sd).powi(2)).exp();
    let (mut c1, mut c2) = (0.0, 0.0);
    let (z1, z2): (f64, f64) = (0..cells).fold((0.0, 0.0), |(a, b), k| {
        let x = (k as f64 + 0.5) * h;
        (a + pdf(m1, x), b + pdf(m2, x))
    });
    let mut total = 0.0;
    for k in 0..cells {
        let x = (k as f64 + 0.5) * h;
        c1 += pdf(m1, x) / z1;
        c2 += pdf(m2, x) / z2;
        total += (c1 - c2).abs() * h;
    }
    total
}

#[test]
fn criterion_3_formula_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ok = true;
    for _ in 0..200 {
        let (p, q) = (random_dist(&mut rng), random_dist(&mut rng));
        let w = wasserstein1(&p, &q);
        let mut d = BTreeMap::new();
        d.insert((1, "a".to_string()), p.clone());
        d.insert((1, "b".to_string()), q);
        ok &= individual_fairness(&d, &[1], &["a", "b"]).unwrap() == w;
        let same: BTreeMap<String, ScoreDistribution> = ["a", "b", "c"].iter().map(|k| (k.to_string(), p.clone())).collect();
        ok &= group_fairness(&same).unwrap().0 == 0.0;
    }
    let mut lines = Vec::new();
    for target in [0.1, 0.01] {
        let (m1, m2, sd) = (0.45, 0.45 + target, 0.1);
        let oracle = truncated_normal_w1(m1, m2, sd);
        let a = dist(truncated_normal(m1, sd, 20_000, &mut rng));
        let b = dist(truncated_normal(m2, sd, 20_000, &mut rng));
        let w = wasserstein1(&a, &b);
        ok &= (w - target).abs() <= 0.2 * target && (oracle - target).abs() <= 0.2 * target;
        lines.push(format!("target {target}: sampled {w:.4}, oracle {oracle:.4}"));
    }
    report(3, ok, format!("reductions exact; {}", lines.join("; ")));
}

#[test]
fn criterion_4_lexicon_classifier() {
    let lex = Lexicon::from_word_lists("good\nfine\nhappy\n", "bad\nsad\n").unwrap();
    let flipped = lex.flipped();
    let toks = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    let cases = [
        ("good fine bad", 2.0 / 3.0),
        // minority-positive texts are 1 - n/(p+n), the exact complement of the flipped score
        ("bad sad good", 1.0 - 2.0 / 3.0),
        ("happy", 1.0),
        ("sad the bad", 0.0),
        ("good bad", 0.5),
        ("the table", 0.5),
        ("", 0.5),
    ];
    let mut ok = cases.iter().all(|(s, want)| lexicon_score(&toks(s), &lex).value() == *want);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let words = ["good", "fine", "happy", "bad", "sad", "the", "table"];
    for _ in 0..10_000 {
        let n = rng.random_range(0..12);
        let s: Vec<&str> = (0..n).map(|_| words[rng.random_range(0..words.len())]).collect();
        let (a, b) = (lexicon_score(&s, &lex).value(), lexicon_score(&s, &flipped).value());
        ok &= b == 1.0 - a && (0.0..=1.0).contains(&a);
    }
    let bundled = opinion_lexicon();
    ok &= lexicon_score(&toks("a good day"), &bundled).value() == 1.0;
    ok &= lexicon_score(&toks("a day"), &bundled).value() == 0.5;
    report(4, ok, "p/(p+n), no-opinion 0.5 and flip symmetry over 10000 random bags");
}

fn vocab_of(n: usize) -> Vocab {
    let mut tokens: Vec<String> = ["<unk>", "<bos>", "<eos>"].map(String::from).to_vec();
    tokens.extend((3..n).map(|i| format!("w{i}")));
    Vocab::from_tokens(tokens).unwrap()
}

fn fd_relative_error(model: &LmModel, loss: &dyn Fn(&LmModel, &mut Tape, &fairlm_core::lm::model::ParamVars) -> fairlm_core::lm::tape::Var) -> f64 {
    let mut tape = Tape::new();
    let p = model.register(&mut tape);
    let l = loss(model, &mut tape, &p);
    let grads = tape.backward(l);
    let value = |m: &LmModel| {
        let mut t = Tape::new();
        let p = m.register(&mut t);
        let l = loss(m, &mut t, &p);
        t.value(l).scalar()
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for k in 0..model.tensors().len() {
        let shape = model.tensors()[k].shape();
        let analytic = grads.get(p.0[k], shape);
        let numeric: Vec<f64> = (0..shape.0 * shape.1)
            .map(|e| {
                let mut plus = model.clone();
                plus.tensors_mut()[k].data_mut()[e] += h;
                let mut minus = model.clone();
                minus.tensors_mut()[k].data_mut()[e] -= h;
                (value(&plus) - value(&minus)) / (2.0 * h)
            })
            .collect();
        let diff = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        if scale > 1e-12 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

#[test]
fn criterion_5_gradient_checks() {
    let start = Instant::now();
    let cfg = LmConfig { layers: 2, width: 8, heads: 2, context: 8, vocab_size: 16, ff_mult: 4 };
    let mut model = LmModel::new(cfg, vocab_of(16), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for t in model.tensors_mut() {
        let noise = Mat::randn(t.rows(), t.cols(), 0.3, &mut rng);
        t.add_assign(&noise);
    }
    let spec = AttributeSpec::new(
        "w",
        Pairing::SubgroupLevel,
        vec![SubgroupSpec::new("A", &["w5", "w6"]), SubgroupSpec::new("B", &["w7", "w8"])],
    )
    .unwrap();
    let tokens: Vec<String> = ["w4", "w5", "w9", "w7", "w10"].map(String::from).to_vec();
    let ids = model.vocab.encode_sentence(&tokens);
    let sites = [
        CounterfactualSite { position: 1, from: "A", to: "B" },
        CounterfactualSite { position: 3, from: "B", to: "A" },
    ];
    let head = SentimentHead::new(8, 6);

    let ce = fd_relative_error(&model, &|m, tape, p| {
        let out = m.graph(tape, p, &ids[..ids.len() - 1]).unwrap();
        tape.cross_entropy(out.logits, &ids[1..])
    });
    let fairness = |h: Option<&SentimentHead>| {
        fd_relative_error(&model, &|m, tape, p| {
            let full = m.graph(tape, p, &ids[..ids.len() - 1]).unwrap();
            fairness_loss_graph(tape, m, p, h, &full, &tokens, &sites, &spec).unwrap()
        })
    };
    let (emb, sent) = (fairness(None), fairness(Some(&head)));
    let elapsed = start.elapsed();
    let ok = ce < 1e-3 && emb < 1e-3 && sent < 1e-3 && elapsed < Duration::from_secs(60);
    report(5, ok, format!("relative errors: cross-entropy {ce:.1e}, embedding {emb:.1e}, sentiment {sent:.1e}; {elapsed:.2?}"));
}

struct Pipeline {
    baseline: FairnessReport,
    sweeps: BTreeMap<String, Vec<SweepRow>>,
    elapsed: Duration,
}

const LAMBDAS: [f64; 4] = [0.0, 1.0, 10.0, 100.0];

fn pipeline() -> &'static Pipeline {
    static CELL: OnceLock<Pipeline> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let spec = planted_spec();
        let corpus = generate_planted_corpus(&PlantedBiasConfig::new(spec.clone(), &[("A", 0.9), ("B", 0.1)], 4000, 1)).unwrap();
        let (train, val) = split_corpus(&corpus, 0.1, 7).unwrap();
        let settings = ModelSettings { layers: 2, width: 32, heads: 2, context: 16, max_vocab: 2000, init_seed: 3 };
        let tc = TrainConfig { steps: 2000, batch_size: 16, lr: 5e-3, clip: Some(1.0), seed: 5, eval_every: 500, val_limit: 400 };
        let (state, _) = pretrain(&train, &val, &spec, &settings, &tc).unwrap();
        let lex = opinion_lexicon();
        let (state, _) = train_head_stage(state, &train, &lex, &HeadDataConfig::default(), &HeadTrainConfig::default()).unwrap();
        let encoder = SentenceEncoder::from_model(&state.model);
        let templates = planted_templates();
        let inp = SweepInputs {
            train_corpus: &train,
            spec: &spec,
            templates: &templates,
            scorer: &lex,
            encoder: &encoder,
            test_corpus: Some(&val),
            eval: EvalSettings { samples_per_prefix: 100, max_tokens: 20, seed: 0, ..Default::default() },
        };
        let baseline = sweep::evaluate_with(&inp, &state.model).unwrap();
        let mut sweeps = BTreeMap::new();
        for method in [Method::EmbeddingReg, Method::SentimentReg] {
            let cfg = DebiasConfig::from_pretrain(&tc, method, 0.0);
            let rows = sweep_lambda(&state, &inp, &cfg, &LAMBDAS).unwrap();
            for r in &rows {
                println!(
                    "  {method} lambda {}: I.F. {:.4}, G.F. {:.4}, PPL {:.4}, S.S. {:.4}",
                    r.lambda,
                    r.report.individual_fairness,
                    r.report.group_fairness,
                    r.report.quality.ppl.unwrap(),
                    r.report.quality.semantic_similarity.unwrap()
                );
            }
            sweeps.insert(method.to_string(), rows);
        }
        Pipeline { baseline, sweeps, elapsed: start.elapsed() }
    })
}

fn at(rows: &[SweepRow], lambda: f64) -> &FairnessReport {
    &rows.iter().find(|r| r.lambda == lambda).unwrap().report
}

#[test]
fn criterion_6_planted_bias_end_to_end() {
    let p = pipeline();
    let (bif, bppl) = (p.baseline.individual_fairness, p.baseline.quality.ppl.unwrap());
    let largest = *LAMBDAS.last().unwrap();
    let check = |method: Method, max_ppl: f64| {
        let r = at(&p.sweeps[&method.to_string()], largest);
        let change = r.individual_fairness / bif - 1.0;
        let growth = r.quality.ppl.unwrap() / bppl - 1.0;
        (change <= -0.5 && growth <= max_ppl, format!("{method}: I.F. {:+.1}%, PPL {:+.1}%", 100.0 * change, 100.0 * growth))
    };
    let (b, sent) = check(Method::SentimentReg, 0.20);
    let (d, emb) = check(Method::EmbeddingReg, 0.25);
    let a = bif > 0.05;
    let fast = p.elapsed < Duration::from_secs(15 * 60);
    report(
        6,
        a && b && d && fast,
        format!("baseline I.F. {bif:.4}, PPL {bppl:.4}; {sent}; {emb}; {:.0?}", p.elapsed),
    );
}

#[test]
fn criterion_7_trade_off_endpoints() {
    let p = pipeline();
    let mut ok = true;
    let mut parts = Vec::new();
    for (method, rows) in &p.sweeps {
        let (r0, r1) = (at(rows, 0.0), at(rows, 100.0));
        let (s0, s1) = (r0.quality.semantic_similarity.unwrap(), r1.quality.semantic_similarity.unwrap());
        ok &= r1.individual_fairness < r0.individual_fairness && s1 <= s0;
        parts.push(format!(
            "{method}: I.F. {:.4} -> {:.4}, S.S. {s0:.4} -> {s1:.4}",
            r0.individual_fairness, r1.individual_fairness
        ));
    }
    report(7, ok, parts.join("; "));
}

/// Gaussian features labelled by a random hyperplane, with a margin.
fn separable(n: usize, width: usize, rng: &mut ChaCha8Rng) -> Vec<HeadExample> {
    let w: Vec<f64> = (0..width).map(|_| StandardNormal.sample(rng)).collect();
    let mut out = Vec::new();
    while out.len() < n {
        let x: Vec<f64> = (0..width).map(|_| StandardNormal.sample(rng)).collect();
        let s: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
        if s.abs() > 0.3 {
            out.push(HeadExample { features: x, label: s > 0.0 });
        }
    }
    out
}

fn logistic_accuracy(train: &[HeadExample], test: &[HeadExample]) -> f64 {
    let width = train[0].features.len();
    let mut w = vec![0.0; width + 1];
    let z = |w: &[f64], e: &HeadExample| w[width] + e.features.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
    for _ in 0..500 {
        let mut g = vec![0.0; width + 1];
        for e in train {
            let err = 1.0 / (1.0 + (-z(&w, e)).exp()) - e.label as u8 as f64;
            for (gi, x) in g.iter_mut().zip(&e.features) {
                *gi += err * x;
            }
            g[width] += err;
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= gi / train.len() as f64;
        }
    }
    test.iter().filter(|e| (z(&w, e) > 0.0) == e.label).count() as f64 / test.len() as f64
}

#[test]
fn criterion_8_sentiment_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data = separable(600, 32, &mut rng);
    let (train, test) = data.split_at(480);
    let oracle = logistic_accuracy(train, test);
    let out = train_sentiment_head(train, &HeadTrainConfig { holdout_fraction: 0.0, ..Default::default() }).unwrap();
    let acc = out.head.accuracy(test);
    report(8, acc > 0.95 && oracle > 0.95, format!("held-out accuracy {acc:.3}, logistic-regression oracle {oracle:.3}"));
}

#[test]
fn criterion_9_determinism() {
    let spec = planted_spec();
    let corpus = generate_planted_corpus(&PlantedBiasConfig::new(spec.clone(), &[("A", 0.9), ("B", 0.1)], 300, 9)).unwrap();
    let vocab = Vocab::build(&corpus, spec.all_tokens(), 500).unwrap();
    let cfg = LmConfig { layers: 2, width: 16, heads: 2, context: 16, vocab_size: vocab.len(), ff_mult: 4 };
    let model = LmModel::new(cfg, vocab, 9).unwrap();
    let tc = TrainConfig { steps: 40, batch_size: 8, lr: 5e-3, eval_every: 0, ..Default::default() };
    let model = train_lm(model, &corpus, &[], &tc).unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    let path = |n: &str| dir.path().join(n);
    model.save(path("model.json")).unwrap();
    std::fs::write(path("spec.json"), serde_json::to_string(&spec).unwrap()).unwrap();
    std::fs::write(path("templates.json"), serde_json::to_string(&planted_templates()).unwrap()).unwrap();
    write_corpus(path("test.txt"), &corpus[..60]).unwrap();
    let run = |parallel: bool| {
        let cfg = EvalRunConfig {
            checkpoint: path("model.json"),
            spec: path("spec.json"),
            templates: path("templates.json"),
            test_corpus: Some(path("test.txt")),
            encoder_checkpoint: None,
            scorer: Default::default(),
            settings: EvalSettings { samples_per_prefix: 50, max_tokens: 15, seed: 3, parallel, ..Default::default() },
        };
        evaluate_model(&cfg).unwrap().to_json()
    };
    let (a, b, c) = (run(true), run(true), run(false));
    report(9, a == b && a == c, format!("{} bytes; parallel twice and serial identical: {}", a.len(), a == b && a == c));
}
