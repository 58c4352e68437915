use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{MarnError, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Minimum number of distinct notes a token must occur in to get its own id.
pub const MIN_DOC_FREQ: usize = 3;
pub const MAX_DOC_LEN: usize = 4000;

/// Lowercases, splits on whitespace and punctuation, and keeps only tokens
/// made entirely of ASCII letters. Tokens mixing letters and digits
/// (`type2`) are dropped whole.
pub fn tokenize(raw: &str) -> Vec<String> {
    raw.split(|c: char| !c.is_alphanumeric())
        .filter(|tok| !tok.is_empty())
        .map(|tok| tok.to_lowercase())
        .filter(|tok| tok.chars().all(|c| c.is_ascii_lowercase()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    doc_freq: HashMap<String, usize>,
    min_doc_freq: usize,
}

impl Vocabulary {
    /// Builds the vocabulary from tokenized documents: tokens seen in at
    /// least `min_doc_freq` documents get ids ordered by descending document
    /// frequency, then lexicographically.
    pub fn build<S: AsRef<str>>(docs: &[Vec<S>], min_doc_freq: usize) -> Result<Self> {
        if docs.is_empty() {
            return Err(MarnError::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        for doc in docs {
            let unique: HashSet<&str> = doc.iter().map(|s| s.as_ref()).collect();
            for tok in unique {
                *doc_freq.entry(tok.to_string()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&String, usize)> = doc_freq
            .iter()
            .filter(|(_, &df)| df >= min_doc_freq)
            .map(|(t, &df)| (t, df))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(kept.into_iter().map(|(t, _)| t.clone()));
        Ok(Self::from_parts(tokens, doc_freq, min_doc_freq))
    }

    pub fn build_from_texts<S: AsRef<str>>(texts: &[S], min_doc_freq: usize) -> Result<Self> {
        let docs: Vec<Vec<String>> = texts.iter().map(|t| tokenize(t.as_ref())).collect();
        Self::build(&docs, min_doc_freq)
    }

    /// Restores a vocabulary from its id-ordered token list (ids 0 and 1
    /// must be the reserved tokens).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err(MarnError::Input(
                "vocabulary must start with the reserved pad and UNK tokens".into(),
            ));
        }
        let unique: HashSet<&String> = tokens.iter().collect();
        if unique.len() != tokens.len() {
            return Err(MarnError::Input("vocabulary contains duplicate tokens".into()));
        }
        Ok(Self::from_parts(tokens, HashMap::new(), MIN_DOC_FREQ))
    }

    fn from_parts(tokens: Vec<String>, doc_freq: HashMap<String, usize>, min_doc_freq: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            tokens,
            index,
            doc_freq,
            min_doc_freq,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn id(&self, token: &str) -> usize {
        match self.index.get(token) {
            Some(&id) if id > UNK_ID => id,
            _ => UNK_ID,
        }
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn doc_freq(&self, token: &str) -> usize {
        self.doc_freq.get(token).copied().unwrap_or(0)
    }

    pub fn min_doc_freq(&self) -> usize {
        self.min_doc_freq
    }

    /// Tokenizes raw text and maps it to ids, truncated to `max_len`.
    pub fn encode(&self, raw: &str, max_len: usize) -> Vec<usize> {
        tokenize(raw)
            .iter()
            .take(max_len)
            .map(|t| self.id(t))
            .collect()
    }
}

/// Raw text to token ids with the default 4000-token truncation.
pub fn preprocess_text(raw: &str, vocab: &Vocabulary) -> Vec<usize> {
    vocab.encode(raw, MAX_DOC_LEN)
}
