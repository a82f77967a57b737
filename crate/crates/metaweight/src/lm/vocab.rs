//! Token vocabulary and whitespace-plus-punctuation tokenization.
//!
//! Vocabulary file format: one token per line, line number = id, reserved
//! tokens first.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Category, TokenSequence};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const UNK: u32 = 3;
pub const SEP: u32 = 4;

pub const RESERVED: [&str; 5] = ["<bos>", "<eos>", "<pad>", "<unk>", "<sep>"];

#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build from an iterator of token strings; reserved tokens are prepended
    /// and duplicates dropped.
    pub fn new(tokens: impl IntoIterator<Item = String>) -> Vocabulary {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.push(t.to_string());
        }
        for t in tokens {
            v.push(t);
        }
        v
    }

    /// Collect every tokenizer piece appearing in `texts`, sorted for a
    /// deterministic id assignment.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vocabulary {
        let mut pieces: Vec<String> = texts
            .into_iter()
            .flat_map(|t| split_pieces(t).into_iter().map(|(p, _)| p))
            .collect();
        pieces.sort();
        pieces.dedup();
        Vocabulary::new(pieces)
    }

    fn push(&mut self, token: String) {
        if self.index.contains_key(&token) {
            return;
        }
        let id = self.tokens.len() as u32;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.tokens.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().collect();
        for (i, t) in RESERVED.iter().enumerate() {
            if lines.get(i) != Some(t) {
                return Err(Error::Malformed {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: format!("expected reserved token `{t}`"),
                });
            }
        }
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for line in lines {
            v.push(line.to_string());
        }
        Ok(v)
    }
}

/// Split into pieces: whitespace-separated words, with each ASCII punctuation
/// character its own piece. Returns (piece, word index), where the word index
/// counts whitespace-separated chunks.
fn split_pieces(text: &str) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (w, chunk) in text.split_whitespace().enumerate() {
        let mut run = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() {
                if !run.is_empty() {
                    out.push((std::mem::take(&mut run), w));
                }
                out.push((ch.to_string(), w));
            } else {
                run.push(ch);
            }
        }
        if !run.is_empty() {
            out.push((run, w));
        }
    }
    out
}

/// Total function: unknown pieces map to UNK, keeping their word index.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    tokenize_opts(text, vocab, false)
}

/// With `greedy_subwords`, an unknown piece is split by repeatedly taking the
/// longest known prefix; pieces with no known prefix still become UNK.
pub fn tokenize_opts(text: &str, vocab: &Vocabulary, greedy_subwords: bool) -> TokenSequence {
    let mut ids = Vec::new();
    let mut word_index = Vec::new();
    for (piece, w) in split_pieces(text) {
        match vocab.id(&piece) {
            Some(id) => {
                ids.push(id);
                word_index.push(w);
            }
            None if greedy_subwords => {
                let mut rest = piece.as_str();
                while !rest.is_empty() {
                    let mut matched = None;
                    for end in (1..=rest.len()).rev() {
                        if !rest.is_char_boundary(end) {
                            continue;
                        }
                        if let Some(id) = vocab.id(&rest[..end]) {
                            matched = Some((id, end));
                            break;
                        }
                    }
                    match matched {
                        Some((id, end)) => {
                            ids.push(id);
                            word_index.push(w);
                            rest = &rest[end..];
                        }
                        None => {
                            ids.push(UNK);
                            word_index.push(w);
                            break;
                        }
                    }
                }
            }
            None => {
                ids.push(UNK);
                word_index.push(w);
            }
        }
    }
    TokenSequence {
        ids,
        categories: None,
        word_index: Some(word_index),
    }
}

/// Tokenize text whose whitespace tokens carry category labels; labels are
/// propagated to every piece of their word.
pub fn tokenize_with_categories(
    text: &str,
    categories: &[Category],
    vocab: &Vocabulary,
) -> Result<TokenSequence> {
    let n_words = text.split_whitespace().count();
    if categories.len() != n_words {
        return Err(Error::invalid(format!(
            "category list has {} entries for {} whitespace tokens",
            categories.len(),
            n_words
        )));
    }
    let mut seq = tokenize(text, vocab);
    let cats = seq
        .word_index
        .as_ref()
        .unwrap()
        .iter()
        .map(|w| categories[*w])
        .collect();
    seq.categories = Some(cats);
    Ok(seq)
}

pub fn detokenize(seq: &TokenSequence, vocab: &Vocabulary) -> String {
    seq.ids
        .iter()
        .map(|id| vocab.token(*id))
        .collect::<Vec<_>>()
        .join(" ")
}
