//! Word-level vocabulary and deterministic tokenizer.
//!
//! Text is lowercased and split into runs of alphanumerics and single
//! punctuation characters. The slot markers `<user>` / `<item>` become their
//! special tokens and the answer words `yes` / `no` map onto `<yes>` / `<no>`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const USER: usize = 2;
pub const ITEM: usize = 3;
pub const YES: usize = 4;
pub const NO: usize = 5;

pub const SPECIALS: [&str; 6] = ["<pad>", "<unk>", "<user>", "<item>", "<yes>", "<no>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Word pieces in order, before vocabulary lookup.
#[derive(Clone, Debug, PartialEq, Eq)]
enum Piece {
    Word(String),
    Special(usize),
}

fn pieces(text: &str) -> Vec<Piece> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    let mut word = String::new();
    let mut rest = lower.as_str();
    let flush = |word: &mut String, out: &mut Vec<Piece>| {
        if !word.is_empty() {
            out.push(Piece::Word(std::mem::take(word)));
        }
    };
    while let Some(c) = rest.chars().next() {
        if c == '<' {
            if let Some(tail) = rest.strip_prefix("<user>") {
                flush(&mut word, &mut out);
                out.push(Piece::Special(USER));
                rest = tail;
                continue;
            }
            if let Some(tail) = rest.strip_prefix("<item>") {
                flush(&mut word, &mut out);
                out.push(Piece::Special(ITEM));
                rest = tail;
                continue;
            }
        }
        if c.is_alphanumeric() {
            word.push(c);
        } else {
            flush(&mut word, &mut out);
            if !c.is_whitespace() {
                out.push(Piece::Word(c.to_string()));
            }
        }
        rest = &rest[c.len_utf8()..];
    }
    flush(&mut word, &mut out);
    out
}

impl Vocab {
    /// Specials followed by every word of `texts` in first-seen order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::specials_only();
        for text in texts {
            for p in pieces(text) {
                if let Piece::Word(w) = p {
                    if w != "yes" && w != "no" && !v.index.contains_key(&w) {
                        v.push(w);
                    }
                }
            }
        }
        v
    }

    fn specials_only() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.push(s.to_string());
        }
        v
    }

    fn push(&mut self, token: String) {
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        pieces(text)
            .into_iter()
            .map(|p| match p {
                Piece::Special(id) => id,
                Piece::Word(w) if w == "yes" => YES,
                Piece::Word(w) if w == "no" => NO,
                Piece::Word(w) => self.id(&w).unwrap_or(UNK),
            })
            .collect()
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for (i, line) in text.lines().enumerate() {
            if v.index.contains_key(line) {
                return Err(Error::Data(format!("vocabulary line {}: duplicate token `{line}`", i + 1)));
            }
            v.push(line.to_string());
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if v.token(i) != Some(s) {
                return Err(Error::Data(format!(
                    "vocabulary line {}: expected special `{s}`",
                    i + 1
                )));
            }
        }
        Ok(v)
    }
}
