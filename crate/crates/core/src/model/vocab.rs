//! Word-level vocabulary built from the training corpus.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const RESERVED: usize = 3;

const RESERVED_TOKENS: [&str; RESERVED] = ["[PAD]", "[UNK]", "[CLS]"];

/// Lowercases and splits text into alphanumeric runs; every other
/// non-whitespace character becomes a one-character token.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<usize>,
    /// 1 over real tokens (including CLS), 0 over padding.
    pub mask: Vec<u8>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Keeps the `max_size - 3` most frequent tokens, ties broken
    /// lexicographically.
    pub fn build<'a, I>(texts: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if max_size < RESERVED {
            return Err(Error::Config(format!(
                "vocabulary max_size must be >= {RESERVED}, got {max_size}"
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut n_texts = 0usize;
        for text in texts {
            n_texts += 1;
            for tok in split_tokens(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if n_texts == 0 {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED);
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut id_to_token: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut token_to_id = HashMap::new();
        for tok in tokens {
            if tok.is_empty() || tok.contains('\n') {
                return Err(Error::Data(format!("invalid vocabulary token {tok:?}")));
            }
            if token_to_id.insert(tok.clone(), id_to_token.len()).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {tok:?}")));
            }
            id_to_token.push(tok);
        }
        Ok(Self {
            token_to_id,
            id_to_token,
        })
    }

    /// Total size including the three reserved ids.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.len() == RESERVED
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// `[CLS]` followed by token ids, truncated to `max_len` and right-padded
    /// with `[PAD]`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> TokenizedText {
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        ids.extend(split_tokens(text).iter().map(|t| self.id(t)));
        ids.truncate(max_len);
        let real = ids.len();
        ids.resize(max_len, PAD);
        let mask = (0..max_len).map(|i| u8::from(i < real)).collect();
        TokenizedText { ids, mask }
    }

    /// One token per line; line `i` (0-based) holds id `i + 3`.
    pub fn write_to<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut w = BufWriter::new(w);
        for tok in &self.id_to_token[RESERVED..] {
            writeln!(w, "{tok}")?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut tokens = Vec::new();
        for line in BufReader::new(r).lines() {
            let line = line.map_err(|e| Error::Data(format!("vocabulary read failed: {e}")))?;
            tokens.push(line);
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(f).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(f)
    }
}
