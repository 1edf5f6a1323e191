use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

/// Word-level vocabulary. Ids 0, 1, 2 are `<unk>`, `<bos>`, `<eos>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub const UNK_ID: usize = 0;
    pub const BOS_ID: usize = 1;
    pub const EOS_ID: usize = 2;

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[0] != UNK || tokens[1] != BOS || tokens[2] != EOS {
            return Err(Error::InvalidConfig("vocab must start with <unk>, <bos>, <eos>".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate vocab entry `{t}`")));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// Builds a vocabulary from a tokenized corpus. `forced` tokens are always
    /// included; the remaining slots (up to `max_size`) go to the most frequent
    /// words, ties broken alphabetically.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a Vec<String>>,
        forced: impl IntoIterator<Item = &'a str>,
        max_size: usize,
    ) -> Result<Self> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for sentence in corpus {
            for w in sentence {
                *counts.entry(w.as_str()).or_default() += 1;
            }
        }
        let mut tokens: Vec<String> = [UNK, BOS, EOS].iter().map(|s| s.to_string()).collect();
        for f in forced {
            if !tokens.iter().any(|t| t == f) {
                tokens.push(f.to_string());
            }
        }
        if tokens.len() > max_size {
            return Err(Error::InvalidConfig(format!(
                "max vocab size {max_size} is smaller than the {} reserved and forced tokens",
                tokens.len()
            )));
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|(w, _)| !tokens.iter().any(|t| t == w)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let room = max_size - tokens.len();
        tokens.extend(ranked.into_iter().take(room).map(|(w, _)| w.to_string()));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// `<bos> tokens <eos>`.
    pub fn encode_sentence<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(Self::BOS_ID);
        ids.extend(tokens.iter().map(|t| self.id(t.as_ref())));
        ids.push(Self::EOS_ID);
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::from_tokens(v)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}
