use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Token string ↔ id mapping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Vocabulary {
    /// Each UTF-8 byte is a token (256 ids).
    Bytes,
    /// Tokens read from a file, one per line; the id is the zero-based line number.
    /// Encoding is greedy longest match.
    File {
        tokens: Vec<String>,
        index: HashMap<String, usize>,
        max_chars: usize,
    },
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Data(format!("empty token at line {}", i + 1)));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate token {t:?} at line {}", i + 1)));
            }
        }
        let max_chars = tokens.iter().map(|t| t.chars().count()).max().unwrap_or(0);
        Ok(Self::File {
            tokens,
            index,
            max_chars,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    pub fn size(&self) -> usize {
        match self {
            Vocabulary::Bytes => 256,
            Vocabulary::File { tokens, .. } => tokens.len(),
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        match self {
            Vocabulary::Bytes => Ok(text.bytes().map(usize::from).collect()),
            Vocabulary::File { index, max_chars, .. } => {
                let chars: Vec<(usize, char)> = text.char_indices().collect();
                let mut out = Vec::new();
                let mut i = 0;
                while i < chars.len() {
                    let start = chars[i].0;
                    let mut found = None;
                    for len in (1..=(*max_chars).min(chars.len() - i)).rev() {
                        let end = chars.get(i + len).map_or(text.len(), |c| c.0);
                        if let Some(&id) = index.get(&text[start..end]) {
                            found = Some((id, len));
                            break;
                        }
                    }
                    let (id, len) = found.ok_or_else(|| {
                        Error::Data(format!("character {:?} at byte {start} is not covered by the vocabulary", chars[i].1))
                    })?;
                    out.push(id);
                    i += len;
                }
                Ok(out)
            }
        }
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        match self {
            Vocabulary::Bytes => {
                let bytes = ids
                    .iter()
                    .map(|&i| u8::try_from(i).map_err(|_| Error::Data(format!("byte token {i} out of range"))))
                    .collect::<Result<Vec<u8>>>()?;
                String::from_utf8(bytes).map_err(|e| Error::Data(format!("decoded bytes are not UTF-8: {e}")))
            }
            Vocabulary::File { tokens, .. } => ids
                .iter()
                .map(|&i| {
                    tokens
                        .get(i)
                        .map(String::as_str)
                        .ok_or_else(|| Error::Data(format!("token id {i} out of range")))
                })
                .collect(),
        }
    }
}
