use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const SEP: u32 = 2;
pub const MARKER: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<sep>", "=>"];

/// Whitespace tokenizer over a fixed, ordered symbol list. Ids are list
/// positions, so the same symbol list always yields the same ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    symbols: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// The reserved symbols followed by `extra` in order.
    pub fn new<I, S>(extra: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut symbols: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        symbols.extend(extra.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid symbol {s:?}")));
            }
            if index.insert(s.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate symbol {s:?}")));
            }
        }
        Ok(Self { symbols, index })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Result<u32> {
        self.index
            .get(symbol)
            .copied()
            .ok_or_else(|| Error::UnknownSymbol(symbol.to_string()))
    }

    pub fn symbol(&self, id: u32) -> Result<&str> {
        self.symbols
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange {
                id,
                vocab: self.symbols.len(),
            })
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|s| self.id(s)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let parts: Result<Vec<&str>> = ids.iter().map(|&id| self.symbol(id)).collect();
        Ok(parts?.join(" "))
    }
}
