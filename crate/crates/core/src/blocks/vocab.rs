use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Number of reserved ids at the start of every vocabulary.
pub const RESERVED: usize = 4;

const RESERVED_TOKENS: [&str; RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token ↔ id map. Ids 0..4 are reserved for pad, bos, eos and unk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved ids followed by `tokens` in order. Duplicates are an error.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token '{t}'")));
            }
        }
        Ok(Self { tokens: all, index })
    }

    /// A vocabulary of `size` ids whose content tokens are `a`, `b`, ... (or
    /// `w<id>` beyond 26 content tokens).
    pub fn synthetic(size: usize) -> Result<Self> {
        if size <= RESERVED {
            return Err(Error::Config(format!(
                "vocab_size must exceed the {RESERVED} reserved ids, got {size}"
            )));
        }
        let content = size - RESERVED;
        Self::from_tokens((0..content).map(|i| {
            if content <= 26 {
                ((b'a' + i as u8) as char).to_string()
            } else {
                format!("w{}", i + RESERVED)
            }
        }))
    }

    /// Whitespace tokens ordered by descending frequency, ties broken
    /// lexicographically.
    pub fn from_corpus<'a, I>(lines: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for line in lines {
            for tok in line.split_whitespace() {
                if !RESERVED_TOKENS.contains(&tok) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ordered: Vec<(&str, usize)> = counts.into_iter().collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(ordered.into_iter().map(|(t, _)| t.to_string()))
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Ids for a whitespace-tokenized line and the number of unknown tokens.
    pub fn encode(&self, line: &str) -> (Vec<usize>, usize) {
        let mut unknown = 0;
        let ids = line
            .split_whitespace()
            .map(|t| {
                self.id(t).unwrap_or_else(|| {
                    unknown += 1;
                    UNK
                })
            })
            .collect();
        (ids, unknown)
    }

    /// Space-joined tokens, stopping at the first eos and skipping pad/bos.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != BOS)
            .map(|&id| self.token(id).unwrap_or(RESERVED_TOKENS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
