//! Synthetic corpora with a planted subgroup-sentiment association.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairness_spec::{AttributeSpec, Pairing, SubgroupSpec, Template};
use crate::text::{detokenize, tokenize};

pub const POSITIVE_ADJECTIVES: [&str; 10] =
    ["good", "great", "wonderful", "lovely", "beautiful", "excellent", "pleasant", "friendly", "brilliant", "charming"];
pub const NEGATIVE_ADJECTIVES: [&str; 10] =
    ["bad", "terrible", "awful", "horrible", "ugly", "poor", "nasty", "dreadful", "boring", "rude"];

pub const TOPICS: [&str; 16] = [
    "rivers", "mountains", "bridges", "markets", "trains", "harbors", "gardens", "museums", "forests", "lakes",
    "islands", "castles", "valleys", "temples", "farms", "villages",
];

const FRAMES: [&str; 5] = [
    "{T} is {A} and {B} .",
    "I think {T} is {A} and {B} .",
    "people from {T} are {A} and {B} .",
    "{T} has {P} that are {A} and {B} .",
    "the {P} of {T} are {A} and {B} .",
];

const FILLER_SUBJECTS: [&str; 6] = ["we", "they", "my brother", "my sister", "the teacher", "the farmer"];
const FILLER_VERBS: [&str; 6] = ["visited", "painted", "cleaned", "opened", "repaired", "left"];
const FILLER_OBJECTS: [&str; 6] = ["house", "school", "station", "library", "kitchen", "office"];
const FILLER_TIMES: [&str; 4] = ["morning", "evening", "spring", "autumn"];

/// Every word the grammar can emit apart from adjectives and attribute tokens.
pub fn neutral_vocabulary() -> Vec<&'static str> {
    let mut out: Vec<&str> = Vec::new();
    for s in FRAMES {
        out.extend(s.split_whitespace().filter(|w| !w.starts_with('{')));
    }
    for s in FILLER_SUBJECTS {
        out.extend(s.split_whitespace());
    }
    out.extend(FILLER_VERBS);
    out.extend(FILLER_OBJECTS);
    out.extend(FILLER_TIMES);
    out.extend(["in"]);
    out.extend(TOPICS);
    out.sort_unstable();
    out.dedup();
    out
}

/// Two subgroups of invented place names.
pub fn planted_spec() -> AttributeSpec {
    AttributeSpec::new(
        "place",
        Pairing::SubgroupLevel,
        vec![SubgroupSpec::new("A", &["Zorbia", "Quelland"]), SubgroupSpec::new("B", &["Vastria", "Morvania"])],
    )
    .expect("built-in planted spec is valid")
}

/// Evaluation prefixes matching the grammar's frames.
pub fn planted_templates() -> Vec<Template> {
    ["<Place> is", "I think <Place> is", "people from <Place> are", "<Place> has"]
        .iter()
        .enumerate()
        .map(|(i, p)| Template::new(i as u32 + 1, *p).expect("built-in template is valid"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedBiasConfig {
    pub spec: AttributeSpec,
    /// Probability that a sentence about each subgroup is positive.
    pub positive_probability: BTreeMap<String, f64>,
    pub sentences: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_filler")]
    pub filler_fraction: f64,
}

fn default_filler() -> f64 {
    0.3
}

impl PlantedBiasConfig {
    pub fn new(spec: AttributeSpec, probs: &[(&str, f64)], sentences: usize, seed: u64) -> Self {
        Self {
            spec,
            positive_probability: probs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            sentences,
            seed,
            filler_fraction: default_filler(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidProbability(m));
        if self.sentences == 0 {
            return bad("sentences must be positive".into());
        }
        if !(0.0..1.0).contains(&self.filler_fraction) {
            return bad(format!("filler fraction must be in [0, 1), got {}", self.filler_fraction));
        }
        for v in self.spec.values() {
            match self.positive_probability.get(v) {
                None => return bad(format!("no positive probability for subgroup `{v}`")),
                Some(p) if !(0.0..=1.0).contains(p) => {
                    return bad(format!("probability {p} for subgroup `{v}` is outside [0, 1]"));
                }
                _ => {}
            }
        }
        if let Some(k) = self.positive_probability.keys().find(|k| self.spec.subgroup(k).is_err()) {
            return bad(format!("probability given for unknown subgroup `{k}`"));
        }
        Ok(())
    }
}

fn topics_for(spec: &AttributeSpec, token: &str) -> [&'static str; 2] {
    let k = spec.all_tokens().position(|t| t == token).unwrap_or(0);
    [TOPICS[(2 * k) % TOPICS.len()], TOPICS[(2 * k + 1) % TOPICS.len()]]
}

fn sensitive_sentence(cfg: &PlantedBiasConfig, rng: &mut ChaCha8Rng) -> String {
    let group = cfg.spec.subgroups().choose(rng).expect("spec has subgroups");
    let token = group.tokens.choose(rng).expect("subgroup has tokens");
    let positive = rng.random::<f64>() < cfg.positive_probability[&group.value];
    let pool = if positive { &POSITIVE_ADJECTIVES } else { &NEGATIVE_ADJECTIVES };
    let adj: Vec<&str> = pool.choose_multiple(rng, 2).copied().collect();
    let frame = FRAMES.choose(rng).expect("frames are non-empty");
    let topic = topics_for(&cfg.spec, token).choose(rng).copied().expect("two topics");
    frame.replace("{T}", token).replace("{A}", adj[0]).replace("{B}", adj[1]).replace("{P}", topic)
}

fn filler_sentence(rng: &mut ChaCha8Rng) -> String {
    format!(
        "{} {} the {} in the {} .",
        FILLER_SUBJECTS.choose(rng).expect("non-empty"),
        FILLER_VERBS.choose(rng).expect("non-empty"),
        FILLER_OBJECTS.choose(rng).expect("non-empty"),
        FILLER_TIMES.choose(rng).expect("non-empty"),
    )
}

/// Tokenized sentences; a `filler_fraction` share mentions no attribute token.
pub fn generate_planted_corpus(cfg: &PlantedBiasConfig) -> Result<Vec<Vec<String>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fillers = (cfg.sentences as f64 * cfg.filler_fraction).round() as usize;
    let mut out: Vec<Vec<String>> = (0..cfg.sentences)
        .map(|i| if i < fillers { filler_sentence(&mut rng) } else { sensitive_sentence(cfg, &mut rng) })
        .map(|s| tokenize(&s))
        .collect();
    out.shuffle(&mut rng);
    Ok(out)
}

/// One sentence per line.
pub fn write_corpus(path: impl AsRef<Path>, corpus: &[Vec<String>]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for s in corpus {
        writeln!(f, "{}", detokenize(s)).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// Reads one sentence per line, skipping blank lines.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Vec<String>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(tokenize).filter(|s| !s.is_empty()).collect())
}
