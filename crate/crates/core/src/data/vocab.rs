use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;

/// Label value for positions that carry no prediction target. It lies
/// outside every vocabulary's id range.
pub const IGNORE_LABEL: u32 = u32::MAX;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// First id available to ordinary tokens.
pub const FIRST_REGULAR_ID: u32 = SPECIAL_TOKENS.len() as u32;

/// Bijective token/id mapping with the special tokens at fixed ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocabulary::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens.iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s)
        {
            return Err(Error::InvalidArgument("vocabulary must start with the special tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Counts whitespace tokens and keeps those seen at least `min_freq`
    /// times, ordered by descending frequency then lexicographically.
    pub fn from_lines<'a>(lines: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Result<Self> {
        if min_freq == 0 {
            return Err(Error::InvalidArgument("min_freq must be at least 1".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut seen_any = false;
        for line in lines {
            for tok in line.split_whitespace() {
                seen_any = true;
                if !SPECIAL_TOKENS.contains(&tok) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        if !seen_any {
            return Err(Error::EmptyCorpus);
        }
        let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Vocabulary::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: u32) -> bool {
        id < FIRST_REGULAR_ID
    }

    /// `[CLS]` followed by the ids of the whitespace tokens of `text`,
    /// truncated to `max_len` ids (at least the `[CLS]` is always kept).
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<u32> {
        std::iter::once(CLS)
            .chain(text.split_whitespace().map(|t| self.id(t)))
            .take(max_len.max(1))
            .collect()
    }
}

/// Builds a vocabulary from one or more corpus files.
pub fn build_vocab<P: AsRef<Path>>(corpus_paths: &[P], min_freq: usize) -> Result<Vocabulary> {
    let mut texts = Vec::with_capacity(corpus_paths.len());
    for p in corpus_paths {
        let p = p.as_ref();
        texts.push(std::fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?);
    }
    Vocabulary::from_lines(texts.iter().flat_map(|t| t.lines()), min_freq)
}

/// Encodes one sentence; see [`Vocabulary::encode`].
pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> Vec<u32> {
    vocab.encode(text, max_len)
}
