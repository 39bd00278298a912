//! Small fixed vocabulary and whitespace tokenizer.
//!
//! Vocabulary file format: UTF-8, one token per line, line number = id, and
//! the first five lines are always `[PAD] [CLS] [SEP] [MASK] [UNK]`.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;

pub const SPECIALS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from plain words; specials are prepended automatically.
    /// Duplicate or special-looking words are rejected.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.as_ref();
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::Input(format!("invalid vocabulary word '{w}'")));
            }
            tokens.push(w.to_string());
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary word '{t}'")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.tokens.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        let lines: Vec<&str> = body.lines().collect();
        if lines.len() < SPECIALS.len() {
            return Err(Error::Parse(format!(
                "vocabulary file {path:?} has fewer than {} lines",
                SPECIALS.len()
            )));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if lines[i] != *s {
                return Err(Error::Parse(format!(
                    "vocabulary line {i} must be {s}, found '{}'",
                    lines[i]
                )));
            }
        }
        Self::from_words(lines[SPECIALS.len()..].iter().filter(|l| !l.is_empty()))
    }
}

/// Lowercase, drop ASCII punctuation, collapse whitespace.
pub fn normalize(text: &str) -> String {
    let lowered = text.to_lowercase();
    let stripped: String = lowered
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Token ids padded/truncated to `max_len`, with `[CLS] ... [SEP]` framing,
/// plus the attention mask. Unknown words map to `[UNK]`; an input that is
/// empty after normalization yields just `[CLS] [SEP]`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    if max_len < 2 {
        return Err(Error::Config(format!("max text length {max_len} < 2")));
    }
    let norm = normalize(text);
    let words: Vec<&str> = norm.split_whitespace().collect();
    let keep = words.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    for w in &words[..keep] {
        ids.push(vocab.id(w).unwrap_or(UNK));
    }
    ids.push(SEP);
    let used = ids.len();
    ids.resize(max_len, PAD);
    let mut mask = vec![false; max_len];
    for m in mask.iter_mut().take(used) {
        *m = true;
    }
    Ok((ids, mask))
}

/// Inverse of `tokenize` over the word region: specials are dropped.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    ids.iter()
        .filter(|&&id| !(id < SPECIALS.len()))
        .filter_map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_vocab() -> Vocabulary {
        Vocabulary::from_words(["a", "dog", "barks", "cat"]).unwrap()
    }

    #[test]
    fn tokenize_simple_sentence() {
        let v = toy_vocab();
        let (ids, mask) = tokenize("A dog barks", &v, 8).unwrap();
        let a = v.id("a").unwrap();
        let dog = v.id("dog").unwrap();
        let barks = v.id("barks").unwrap();
        assert_eq!(ids, vec![CLS, a, dog, barks, SEP, PAD, PAD, PAD]);
        assert_eq!(mask, vec![true, true, true, true, true, false, false, false]);
    }

    #[test]
    fn tokenize_empty_after_normalization() {
        let v = toy_vocab();
        let (ids, mask) = tokenize("!!! ...", &v, 6).unwrap();
        assert_eq!(ids, vec![CLS, SEP, PAD, PAD, PAD, PAD]);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 2);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = toy_vocab();
        let (ids, _) = tokenize("a zebra", &v, 6).unwrap();
        assert_eq!(ids[2], UNK);
    }

    #[test]
    fn round_trip_matches_normalized_text() {
        let v = toy_vocab();
        for s in ["A dog barks", "  CAT, dog!  ", "a a a"] {
            let (ids, _) = tokenize(s, &v, 16).unwrap();
            assert_eq!(detokenize(&ids, &v), normalize(s));
        }
    }

    #[test]
    fn vocab_file_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = toy_vocab();
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded.len(), v.len());
        assert_eq!(loaded.id("barks"), v.id("barks"));

        std::fs::write(&path, "[PAD]\n[CLS]\n[SEP]\n[UNK]\n[MASK]\nword\n").unwrap();
        assert!(matches!(Vocabulary::load(&path), Err(Error::Parse(_))));
    }
}
