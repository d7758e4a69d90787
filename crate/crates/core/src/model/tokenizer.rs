//! Character-level tokenizer with a fixed printable vocabulary.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Default character set: space, newline, digits, letters and the
/// punctuation the prompt/answer formats use (including '#').
pub const DEFAULT_VOCAB: &str =
    " \n0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz#$%'()*+,-./:;=?!";

/// Maps characters to dense ids. Ids 0 and 1 are reserved for the pad and
/// end-of-text specials; characters start at 2, in vocabulary order.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    chars: Vec<char>,
    index: HashMap<char, TokenId>,
}

pub const PAD_ID: TokenId = 0;
pub const EOT_ID: TokenId = 1;
const SPECIALS: usize = 2;

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer::from_chars(DEFAULT_VOCAB).expect("default vocabulary is valid")
    }
}

impl Tokenizer {
    pub fn from_chars(vocab: &str) -> Result<Self> {
        let chars: Vec<char> = vocab.chars().collect();
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i + SPECIALS).is_some() {
                return Err(Error::config(format!(
                    "duplicate character {c:?} in tokenizer vocabulary"
                )));
            }
        }
        Ok(Tokenizer { chars, index })
    }

    /// The character portion of the vocabulary, for serialization.
    pub fn vocab_chars(&self) -> String {
        self.chars.iter().collect()
    }

    /// Total id count including the two specials.
    pub fn vocab_size(&self) -> usize {
        self.chars.len() + SPECIALS
    }

    pub fn pad_id(&self) -> TokenId {
        PAD_ID
    }

    pub fn eot_id(&self) -> TokenId {
        EOT_ID
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut ids = Vec::with_capacity(text.len());
        for (offset, c) in text.char_indices() {
            match self.index.get(&c) {
                Some(&id) => ids.push(id),
                None => {
                    return Err(Error::Data(format!(
                        "character {c:?} at byte offset {offset} is not in the tokenizer vocabulary"
                    )))
                }
            }
        }
        Ok(ids)
    }

    /// Inverse of [`encode`] on character ids; the pad and end-of-text
    /// specials decode to nothing.
    ///
    /// [`encode`]: Tokenizer::encode
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            if id == PAD_ID || id == EOT_ID {
                continue;
            }
            match self.chars.get(id - SPECIALS) {
                Some(&c) => out.push(c),
                None => {
                    return Err(Error::Index(format!(
                        "token id {id} out of range for vocabulary of {}",
                        self.vocab_size()
                    )))
                }
            }
        }
        Ok(out)
    }
}
