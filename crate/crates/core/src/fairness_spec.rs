//! Sensitive attributes, counterfactual substitution and evaluation templates.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How individual fairness pairs distributions: one distribution per subgroup
/// (tokens of a subgroup pooled) or one per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    #[default]
    SubgroupLevel,
    TokenLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PronounClass {
    He,
    She,
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgroupSpec {
    pub value: String,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pronoun_class: Option<PronounClass>,
}

impl SubgroupSpec {
    pub fn new(value: impl Into<String>, tokens: &[&str]) -> Self {
        Self {
            value: value.into(),
            tokens: tokens.iter().map(|t| t.to_string()).collect(),
            pronoun_class: None,
        }
    }

    pub fn with_pronoun(mut self, class: PronounClass) -> Self {
        self.pronoun_class = Some(class);
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawAttributeSpec {
    name: String,
    #[serde(default)]
    pairing: Pairing,
    subgroups: Vec<SubgroupSpec>,
}

/// A sensitive attribute: an ordered list of subgroups, each realized by a
/// list of surface tokens. Validated on construction and immutable after.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawAttributeSpec", into = "RawAttributeSpec")]
pub struct AttributeSpec {
    name: String,
    pairing: Pairing,
    subgroups: Vec<SubgroupSpec>,
    // token -> (subgroup index, position in that subgroup's token list)
    index: HashMap<String, (usize, usize)>,
}

impl PartialEq for AttributeSpec {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.pairing == other.pairing && self.subgroups == other.subgroups
    }
}

impl TryFrom<RawAttributeSpec> for AttributeSpec {
    type Error = Error;

    fn try_from(raw: RawAttributeSpec) -> Result<Self> {
        AttributeSpec::new(raw.name, raw.pairing, raw.subgroups)
    }
}

impl From<AttributeSpec> for RawAttributeSpec {
    fn from(spec: AttributeSpec) -> Self {
        RawAttributeSpec { name: spec.name, pairing: spec.pairing, subgroups: spec.subgroups }
    }
}

impl AttributeSpec {
    pub fn new(name: impl Into<String>, pairing: Pairing, subgroups: Vec<SubgroupSpec>) -> Result<Self> {
        let name = name.into();
        if subgroups.len() < 2 {
            return Err(Error::InvalidSpec(format!("`{name}` needs at least 2 subgroups")));
        }
        let mut values = HashSet::new();
        let mut index = HashMap::new();
        for (g, sub) in subgroups.iter().enumerate() {
            if !values.insert(sub.value.as_str()) {
                return Err(Error::InvalidSpec(format!("duplicate subgroup `{}`", sub.value)));
            }
            if sub.tokens.is_empty() {
                return Err(Error::InvalidSpec(format!("subgroup `{}` has no tokens", sub.value)));
            }
            for (t, token) in sub.tokens.iter().enumerate() {
                if token.is_empty() || token.chars().any(char::is_whitespace) {
                    return Err(Error::InvalidSpec(format!("token {token:?} is not a single word")));
                }
                if index.insert(token.clone(), (g, t)).is_some() {
                    return Err(Error::InvalidSpec(format!("token `{token}` appears more than once")));
                }
            }
        }
        Ok(Self { name, pairing, subgroups, index })
    }

    pub fn from_json_str(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::json("<inline>", e))
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn pairing(&self) -> Pairing {
        self.pairing
    }

    pub fn with_pairing(mut self, pairing: Pairing) -> Self {
        self.pairing = pairing;
        self
    }

    pub fn subgroups(&self) -> &[SubgroupSpec] {
        &self.subgroups
    }

    pub fn values(&self) -> Vec<&str> {
        self.subgroups.iter().map(|s| s.value.as_str()).collect()
    }

    pub fn subgroup(&self, value: &str) -> Result<&SubgroupSpec> {
        self.subgroups
            .iter()
            .find(|s| s.value == value)
            .ok_or_else(|| Error::UnknownSubgroup(value.to_string()))
    }

    /// Every sensitive token, in subgroup order then token order.
    pub fn all_tokens(&self) -> impl Iterator<Item = &str> {
        self.subgroups.iter().flat_map(|s| s.tokens.iter().map(String::as_str))
    }

    pub fn is_sensitive(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Subgroup value that `token` realizes, if any.
    pub fn subgroup_of(&self, token: &str) -> Option<&str> {
        self.index.get(token).map(|&(g, _)| self.subgroups[g].value.as_str())
    }

    /// The token of `to` that corresponds to `token` (a member of `from`):
    /// index-aligned when the two lists have equal length, else `to`'s first token.
    pub fn counterpart(&self, token: &str, from: &str, to: &str) -> Result<Option<&str>> {
        let from_idx = self.subgroup_index(from)?;
        let to_sub = &self.subgroups[self.subgroup_index(to)?];
        let from_len = self.subgroups[from_idx].tokens.len();
        Ok(match self.index.get(token) {
            Some(&(g, t)) if g == from_idx => {
                let k = if from_len == to_sub.tokens.len() { t } else { 0 };
                Some(to_sub.tokens[k].as_str())
            }
            _ => None,
        })
    }

    fn subgroup_index(&self, value: &str) -> Result<usize> {
        self.subgroups
            .iter()
            .position(|s| s.value == value)
            .ok_or_else(|| Error::UnknownSubgroup(value.to_string()))
    }
}

/// Replaces every token of subgroup `from` by its counterpart in `to`.
/// Non-sensitive tokens and tokens of other subgroups are left alone.
pub fn substitute_counterfactual<S: AsRef<str>>(
    tokens: &[S],
    spec: &AttributeSpec,
    from: &str,
    to: &str,
) -> Result<Vec<String>> {
    substitute_prefix(tokens, tokens.len(), spec, from, to)
}

/// Like [`substitute_counterfactual`] but only rewrites positions `< upto`.
pub fn substitute_prefix<S: AsRef<str>>(
    tokens: &[S],
    upto: usize,
    spec: &AttributeSpec,
    from: &str,
    to: &str,
) -> Result<Vec<String>> {
    spec.subgroup_index(from)?;
    spec.subgroup_index(to)?;
    if from == to {
        return Err(Error::NoCounterfactual(from.to_string()));
    }
    let mut replaced = 0;
    let mut out = Vec::with_capacity(tokens.len());
    for (pos, tok) in tokens.iter().enumerate() {
        let tok = tok.as_ref();
        match spec.counterpart(tok, from, to)? {
            Some(cf) if pos < upto => {
                replaced += 1;
                out.push(cf.to_string());
            }
            _ => out.push(tok.to_string()),
        }
    }
    if replaced == 0 {
        return Err(Error::NoSensitiveToken(from.to_string()));
    }
    Ok(out)
}

/// A generation prefix with a single `<Placeholder>` slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTemplate", into = "RawTemplate")]
pub struct Template {
    id: u32,
    pattern: String,
    // byte range of the placeholder, including the angle brackets
    slot: (usize, usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawTemplate {
    id: u32,
    pattern: String,
}

impl TryFrom<RawTemplate> for Template {
    type Error = Error;

    fn try_from(raw: RawTemplate) -> Result<Self> {
        Template::new(raw.id, raw.pattern)
    }
}

impl From<Template> for RawTemplate {
    fn from(t: Template) -> Self {
        RawTemplate { id: t.id, pattern: t.pattern }
    }
}

const PRONOUN_MARKERS: &[(&str, [&str; 3])] = &[
    ("he/she", ["he", "she", "they"]),
    ("she/he", ["he", "she", "they"]),
    ("his/her", ["his", "her", "their"]),
    ("her/his", ["his", "her", "their"]),
    ("him/her", ["him", "her", "them"]),
    ("her/him", ["him", "her", "them"]),
    ("himself/herself", ["himself", "herself", "themselves"]),
];

fn find_placeholders(pattern: &str) -> Vec<(usize, usize)> {
    let mut found = Vec::new();
    let bytes = pattern.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'<' {
            if let Some(len) = pattern[i + 1..].find('>') {
                let inner = &pattern[i + 1..i + 1 + len];
                if !inner.is_empty() && inner.chars().all(|c| c.is_alphanumeric() || c == '_') {
                    found.push((i, i + len + 2));
                    i += len + 2;
                    continue;
                }
            }
        }
        i += 1;
    }
    found
}

impl Template {
    pub fn new(id: u32, pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        let slots = find_placeholders(&pattern);
        if slots.len() != 1 {
            return Err(Error::InvalidTemplate(format!(
                "template {id} must contain exactly one placeholder, found {}",
                slots.len()
            )));
        }
        Ok(Self { id, pattern, slot: slots[0] })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    /// Placeholder name without brackets, e.g. `Country`.
    pub fn placeholder(&self) -> &str {
        &self.pattern[self.slot.0 + 1..self.slot.1 - 1]
    }

    pub fn has_pronoun_marker(&self) -> bool {
        self.pattern
            .split_whitespace()
            .any(|w| pronoun_marker(w).is_some())
    }
}

fn pronoun_marker(word: &str) -> Option<(usize, &'static [&'static str; 3])> {
    // marker may carry trailing punctuation, e.g. "he/she,"
    let end = word.find(|c: char| !(c.is_alphabetic() || c == '/')).unwrap_or(word.len());
    let core = word[..end].to_lowercase();
    PRONOUN_MARKERS.iter().find(|(m, _)| *m == core).map(|(_, forms)| (end, forms))
}

fn capitalize_like(src: &str, word: &str) -> String {
    if src.chars().next().is_some_and(char::is_uppercase) {
        let mut c = word.chars();
        c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
    } else {
        word.to_string()
    }
}

fn starts_with_vowel(word: &str) -> bool {
    word.chars()
        .find(|c| c.is_alphabetic())
        .is_some_and(|c| matches!(c.to_ascii_lowercase(), 'a' | 'e' | 'i' | 'o' | 'u'))
}

/// Fills the placeholder with `token`, resolves `a/an` and pronoun alternations.
pub fn instantiate_template(t: &Template, spec: &AttributeSpec, subgroup: &str, token: &str) -> Result<String> {
    let sub = spec.subgroup(subgroup)?;
    if !sub.tokens.iter().any(|x| x == token) {
        return Err(Error::TokenNotInSubgroup { token: token.to_string(), subgroup: subgroup.to_string() });
    }
    let (before, after) = (&t.pattern[..t.slot.0], &t.pattern[t.slot.1..]);
    let resolve = |segment: &str, next_word: Option<&str>| -> Result<String> {
        let words: Vec<&str> = segment.split(' ').collect();
        let mut out = Vec::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.eq_ignore_ascii_case("a/an") {
                let following = words[i + 1..].iter().find(|x| !x.is_empty()).copied().or(next_word);
                let article = if following.is_some_and(starts_with_vowel) { "an" } else { "a" };
                out.push(capitalize_like(w, article));
            } else if let Some((end, forms)) = pronoun_marker(w) {
                let form = match sub.pronoun_class {
                    Some(PronounClass::He) => forms[0],
                    Some(PronounClass::She) => forms[1],
                    Some(PronounClass::Neutral) => forms[2],
                    None => return Err(Error::UnresolvedPronoun(t.id)),
                };
                out.push(format!("{}{}", capitalize_like(w, form), &w[end..]));
            } else {
                out.push(w.to_string());
            }
        }
        Ok(out.join(" "))
    };
    let prefix = format!("{}{}{}", resolve(before, Some(token))?, token, resolve(after, None)?);
    Ok(prefix.trim().to_string())
}

/// One instantiated evaluation prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPrefix {
    pub template_id: u32,
    pub subgroup: String,
    pub token: String,
    pub prefix: String,
}

/// Every template filled with every token of every subgroup, ordered by
/// template id, then subgroup order, then token order.
pub fn enumerate_eval_prefixes(templates: &[Template], spec: &AttributeSpec) -> Result<Vec<EvalPrefix>> {
    if templates.is_empty() {
        return Err(Error::EmptyTemplates);
    }
    let mut sorted: Vec<&Template> = templates.iter().collect();
    sorted.sort_by_key(|t| t.id);
    if let Some(w) = sorted.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::InvalidTemplate(format!("duplicate template id {}", w[0].id)));
    }
    let mut out = Vec::new();
    for t in sorted {
        for sub in spec.subgroups() {
            for token in &sub.tokens {
                let prefix = instantiate_template(t, spec, &sub.value, token)?;
                out.push(EvalPrefix {
                    template_id: t.id,
                    subgroup: sub.value.clone(),
                    token: token.clone(),
                    prefix,
                });
            }
        }
    }
    Ok(out)
}

pub fn templates_from_json_str(json: &str) -> Result<Vec<Template>> {
    serde_json::from_str(json).map_err(|e| Error::json("<inline>", e))
}

pub fn load_templates(path: impl AsRef<Path>) -> Result<Vec<Template>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}. {}", self.id, self.pattern)
    }
}
