//! Toy symbol-level vocabulary: digits, arithmetic operators, and the
//! reserved structural tokens (BOS/EOS, think/answer delimiters, hint
//! marker, PAD). Delimiters are single reserved tokens, so segmentation is a
//! pure function of token ids.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("unknown symbol at byte {0} of {1:?}")]
    UnknownSymbol(usize, String),
    #[error("unknown token id {0}")]
    UnknownId(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad vocab file: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Bijective symbol ↔ id table. |V| stays well under 64.
#[derive(Debug, Clone)]
pub struct Vocab {
    symbols: Vec<String>,
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const THINK_OPEN: usize = 3;
pub const THINK_CLOSE: usize = 4;
pub const ANSWER_OPEN: usize = 5;
pub const ANSWER_CLOSE: usize = 6;
pub const HINT: usize = 7;

const SPECIALS: [&str; 8] =
    ["<pad>", "<s>", "</s>", "<think>", "</think>", "<ans>", "</ans>", "<hint>"];
const CHARS: &str = " +-*/=0123456789";

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut symbols: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        symbols.extend(CHARS.chars().map(|c| c.to_string()));
        Vocab { symbols }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn symbol(&self, id: usize) -> Result<&str, VocabError> {
        self.symbols.get(id).map(|s| s.as_str()).ok_or(VocabError::UnknownId(id))
    }

    pub fn id_of(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    /// Id of a single-character symbol (digits, operators, space).
    pub fn char_id(&self, c: char) -> Option<usize> {
        let mut buf = [0u8; 4];
        self.id_of(c.encode_utf8(&mut buf))
    }

    pub fn digit_id(&self, d: u32) -> usize {
        debug_assert!(d < 10);
        self.char_id(char::from_digit(d, 10).unwrap()).unwrap()
    }

    pub fn is_digit(&self, id: usize) -> bool {
        self.symbols
            .get(id)
            .and_then(|s| s.chars().next())
            .map(|c| s_len_one(&self.symbols[id]) && c.is_ascii_digit())
            .unwrap_or(false)
    }

    /// Greedy longest-match tokenization; every symbol (including the
    /// multi-character specials) round-trips through decode.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>, VocabError> {
        let mut ids = Vec::new();
        let mut rest = text;
        let mut offset = 0;
        'outer: while !rest.is_empty() {
            // Specials are the only multi-char symbols; try them first.
            for (id, sym) in self.symbols.iter().enumerate().take(SPECIALS.len()) {
                if rest.starts_with(sym.as_str()) {
                    ids.push(id);
                    offset += sym.len();
                    rest = &rest[sym.len()..];
                    continue 'outer;
                }
            }
            let c = rest.chars().next().unwrap();
            match self.char_id(c) {
                Some(id) => {
                    ids.push(id);
                    offset += c.len_utf8();
                    rest = &rest[c.len_utf8()..];
                }
                None => return Err(VocabError::UnknownSymbol(offset, text.to_string())),
            }
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String, VocabError> {
        let mut out = String::new();
        for &id in ids {
            out.push_str(self.symbol(id)?);
        }
        Ok(out)
    }

    /// Encode a non-negative or negative integer as digit (and sign) tokens.
    pub fn encode_int(&self, value: i64) -> Vec<usize> {
        self.encode(&value.to_string()).expect("integer text is always in vocab")
    }

    /// Parse a token run as an integer; `None` when it is not `-?[0-9]+`.
    pub fn parse_int(&self, ids: &[usize]) -> Option<i64> {
        let text = self.decode(ids).ok()?;
        if text.is_empty() {
            return None;
        }
        text.parse::<i64>().ok()
    }

    /// Serialize as a JSON symbol→id table.
    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let table: BTreeMap<String, usize> =
            self.symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        std::fs::write(path, serde_json::to_string_pretty(&VocabFile { symbols: table })?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let file: VocabFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut symbols = vec![String::new(); file.symbols.len()];
        for (sym, id) in file.symbols {
            symbols[id] = sym;
        }
        Ok(Vocab { symbols })
    }
}

fn s_len_one(s: &str) -> bool {
    s.chars().count() == 1
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    symbols: BTreeMap<String, usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_round_trip() {
        let v = Vocab::new();
        let ids = v.encode("3*4=").unwrap();
        assert_eq!(v.decode(&ids).unwrap(), "3*4=");
        assert_eq!(ids.len(), 4);
    }

    #[test]
    fn empty_string_round_trip() {
        let v = Vocab::new();
        assert!(v.encode("").unwrap().is_empty());
        assert_eq!(v.decode(&[]).unwrap(), "");
    }

    #[test]
    fn every_symbol_round_trips() {
        let v = Vocab::new();
        for id in 0..v.len() {
            let text = v.symbol(id).unwrap().to_string();
            assert_eq!(v.encode(&text).unwrap(), vec![id], "symbol {text:?}");
        }
    }

    #[test]
    fn unknown_symbol_errors() {
        let v = Vocab::new();
        assert!(v.encode("3^4").is_err());
    }

    #[test]
    fn specials_inside_text() {
        let v = Vocab::new();
        let ids = v.encode("<s>12<hint>34<think>").unwrap();
        assert_eq!(ids[0], BOS);
        assert_eq!(ids[3], HINT);
        assert_eq!(*ids.last().unwrap(), THINK_OPEN);
        assert_eq!(v.decode(&ids).unwrap(), "<s>12<hint>34<think>");
    }

    #[test]
    fn int_round_trip() {
        let v = Vocab::new();
        assert_eq!(v.parse_int(&v.encode_int(144)), Some(144));
        assert_eq!(v.parse_int(&v.encode_int(-63)), Some(-63));
        assert_eq!(v.parse_int(&[PAD]), None);
        assert_eq!(v.parse_int(&[]), None);
    }

    #[test]
    fn save_load_round_trip() {
        let v = Vocab::new();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        v.save(&p).unwrap();
        let v2 = Vocab::load(&p).unwrap();
        for id in 0..v.len() {
            assert_eq!(v.symbol(id).unwrap(), v2.symbol(id).unwrap());
        }
    }

    #[test]
    fn vocab_fits_budget() {
        assert!(Vocab::new().len() <= 64);
    }
}
