//! Token sequences and the word-level vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const MASK_WORD: &str = "<mask>";
pub const PAD_WORD: &str = "<pad>";

/// A prompt prefix followed by a response region.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    ids: Vec<TokenId>,
    prompt_len: usize,
}

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>, prompt_len: usize) -> Result<Self> {
        if prompt_len > ids.len() {
            return Err(Error::Contract(format!(
                "prompt length {prompt_len} exceeds sequence length {}",
                ids.len()
            )));
        }
        Ok(TokenSeq { ids, prompt_len })
    }

    /// `prompt` followed by `gen_len` mask tokens.
    pub fn masked(prompt: &[TokenId], gen_len: usize, mask: TokenId) -> Self {
        let mut ids = prompt.to_vec();
        ids.resize(prompt.len() + gen_len, mask);
        TokenSeq {
            ids,
            prompt_len: prompt.len(),
        }
    }

    /// Join a prompt and a response.
    pub fn from_parts(prompt: &[TokenId], response: &[TokenId]) -> Self {
        TokenSeq {
            ids: [prompt, response].concat(),
            prompt_len: prompt.len(),
        }
    }

    #[inline]
    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    #[inline]
    pub fn ids_mut(&mut self) -> &mut [TokenId] {
        &mut self.ids
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    #[inline]
    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn response_len(&self) -> usize {
        self.ids.len() - self.prompt_len
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.ids[..self.prompt_len]
    }

    pub fn response(&self) -> &[TokenId] {
        &self.ids[self.prompt_len..]
    }

    /// Response positions (absolute indices) currently holding `mask`.
    pub fn masked_positions(&self, mask: TokenId) -> Vec<usize> {
        (self.prompt_len..self.ids.len())
            .filter(|&i| self.ids[i] == mask)
            .collect()
    }

    pub fn count_masked(&self, mask: TokenId) -> usize {
        self.response().iter().filter(|&&t| t == mask).count()
    }

    /// Same response under a different prompt.
    pub fn with_prompt(&self, prompt: &[TokenId]) -> TokenSeq {
        TokenSeq::from_parts(prompt, self.response())
    }
}

/// Word-level vocabulary with mask and pad tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary whose first two entries are the mask and pad
    /// tokens, followed by `words` in order with duplicates dropped.
    pub fn with_specials<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocab {
            words: Vec::new(),
            index: HashMap::new(),
        };
        v.push(MASK_WORD);
        v.push(PAD_WORD);
        for w in words {
            v.push(w.as_ref());
        }
        v
    }

    /// Rebuild from a stored word table, e.g. the one inside a checkpoint.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as TokenId).is_some() {
                return Err(Error::Parse(format!("duplicate vocabulary word {w:?}")));
            }
        }
        if !index.contains_key(MASK_WORD) {
            return Err(Error::Parse("vocabulary lacks the mask token".into()));
        }
        Ok(Vocab { words, index })
    }

    fn push(&mut self, w: &str) {
        if !self.index.contains_key(w) {
            self.index
                .insert(w.to_string(), self.words.len() as TokenId);
            self.words.push(w.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn mask_id(&self) -> TokenId {
        self.index[MASK_WORD]
    }

    pub fn pad_id(&self) -> Option<TokenId> {
        self.index.get(PAD_WORD).copied()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> &str {
        self.words.get(id as usize).map_or("<unk>", String::as_str)
    }

    /// Whitespace-tokenize `text`; unknown words are an error.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Parse(format!("word {w:?} is not in the vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
