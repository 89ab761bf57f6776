//! Word-level vocabulary and caption token sequences.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;
pub const NUM_RESERVED: u32 = 5;
pub const RESERVED: [&str; 5] = ["[PAD]", "[BOS]", "[EOS]", "[MASK]", "[UNK]"];

/// Longest caption accepted, in tokens.
pub const MAX_SEQ_LEN: usize = 60;

/// Dense token ids `0..V`; the first five are the reserved tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Reserved tokens followed by `words` in the given order.
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(Into::into));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Input(format!(
                    "vocabulary line {} must be {r}",
                    i + 1
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Input(format!("bad vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Sorted distinct words of `captions`.
    pub fn from_captions<'a>(captions: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let words: BTreeSet<&str> = captions
            .into_iter()
            .flat_map(str::split_whitespace)
            .filter(|w| !RESERVED.contains(w))
            .collect();
        Self::new(words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or `[UNK]`.
    pub fn lookup(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK)
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.lookup(w)).collect()
    }

    pub fn render(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn num_ordinary(&self) -> usize {
        self.tokens.len() - NUM_RESERVED as usize
    }

    /// One token per line; line index is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Caption token ids; positions are implicitly `0..len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if ids.len() > MAX_SEQ_LEN {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds {MAX_SEQ_LEN}",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab_size) {
            return Err(Error::Index(format!(
                "token id {bad} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(TokenSequence { ids })
    }

    pub fn from_text(text: &str, vocab: &Vocabulary) -> Result<Self> {
        Self::new(vocab.tokenize(text), vocab.len())
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}
