//! Word-level tokenizer over a corpus-built vocabulary.
//!
//! Lowercases, splits on whitespace, and treats every punctuation character
//! as its own token. Out-of-vocabulary words map to UNK. Ids 0..=3 are
//! reserved for PAD/UNK/BOS/EOS; the vocabulary file stores one token per
//! line with the line number as id.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fs;
use std::path::Path;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Split into lowercase word and punctuation tokens.
pub fn word_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from a text corpus: tokens ranked by frequency (ties broken
    /// lexicographically), truncated to `max_size` including the specials.
    pub fn build<I: IntoIterator<Item = String>>(texts: I, max_size: usize) -> Result<Self> {
        if max_size < SPECIALS.len() + 1 {
            return Err(Error::Config(format!(
                "vocabulary size {max_size} leaves no room for content tokens"
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in word_tokens(&text) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            ranked
                .into_iter()
                .take(max_size - SPECIALS.len())
                .map(|(t, _)| t),
        );
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
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

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.tokens.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < SPECIALS.len()
            || tokens[..SPECIALS.len()] != SPECIALS.map(String::from)[..]
        {
            return Err(Error::Data(format!(
                "{}: vocabulary must start with the four special tokens",
                path.display()
            )));
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// A fixed-length id sequence: BOS, words, EOS, then padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub eos_pos: usize,
}

impl TokenSequence {
    /// Number of non-padding positions (BOS..=EOS).
    pub fn real_len(&self) -> usize {
        self.eos_pos + 1
    }

    /// Attention/pooling mask: true for real positions.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i <= self.eos_pos).collect()
    }
}

/// Total function: truncation keeps BOS and EOS, unknown words become UNK.
pub fn tokenize(text: &str, vocab: &Vocabulary, context_length: usize) -> TokenSequence {
    let words = word_tokens(text);
    let keep = words.len().min(context_length - 2);
    if keep < words.len() {
        log::warn!(
            "truncating text from {} to {keep} tokens: {text:?}",
            words.len()
        );
    }
    let mut ids = Vec::with_capacity(context_length);
    ids.push(BOS);
    for w in &words[..keep] {
        ids.push(vocab.id(w).unwrap_or(UNK));
    }
    ids.push(EOS);
    let eos_pos = ids.len() - 1;
    ids.resize(context_length, PAD);
    TokenSequence { ids, eos_pos }
}

/// Inverse up to casing/whitespace normalization; specials are dropped.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocabulary) -> String {
    seq.ids[1..seq.eos_pos]
        .iter()
        .filter_map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(
            ["a red circle pushes a blue square".to_string(),
             "a green star avoids a yellow triangle".to_string()],
            64,
        )
        .unwrap()
    }

    #[test]
    fn empty_text_is_bos_eos_pad() {
        let v = vocab();
        let seq = tokenize("", &v, 8);
        assert_eq!(seq.ids, vec![BOS, EOS, PAD, PAD, PAD, PAD, PAD, PAD]);
        assert_eq!(seq.eos_pos, 1);
    }

    #[test]
    fn tokenization_is_deterministic_and_covers_corpus() {
        let v = vocab();
        let a = tokenize("a red circle pushes a blue square", &v, 16);
        let b = tokenize("a red circle pushes a blue square", &v, 16);
        assert_eq!(a, b);
        assert!(!a.ids.contains(&UNK));
    }

    #[test]
    fn oov_maps_to_unk() {
        let v = vocab();
        let seq = tokenize("a purple zeppelin", &v, 16);
        assert!(seq.ids.contains(&UNK));
    }

    #[test]
    fn truncation_keeps_bos_and_eos() {
        let v = vocab();
        let seq = tokenize("a red circle pushes a blue square", &v, 5);
        assert_eq!(seq.ids.len(), 5);
        assert_eq!(seq.ids[0], BOS);
        assert_eq!(seq.ids[4], EOS);
        assert_eq!(seq.eos_pos, 4);
    }

    #[test]
    fn punctuation_becomes_tokens() {
        let toks = word_tokens("<Man, jumping>");
        assert_eq!(toks, ["<", "man", ",", "jumping", ">"]);
    }

    #[test]
    fn round_trip_up_to_normalization() {
        let v = vocab();
        let text = "A Red Circle  pushes a blue square";
        let seq = tokenize(text, &v, 16);
        let back = detokenize(&seq, &v);
        let norm = word_tokens(text).join(" ");
        assert_eq!(back, norm);
    }

    #[test]
    fn save_load_preserves_ids() {
        let v = vocab();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let v2 = Vocabulary::load(&path).unwrap();
        assert_eq!(v.len(), v2.len());
        for id in 0..v.len() {
            assert_eq!(v.token(id), v2.token(id));
        }
    }
}
