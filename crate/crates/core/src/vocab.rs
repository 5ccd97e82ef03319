//! Word-level vocabulary and tokenizer over the synthetic corpus.
//!
//! The vocabulary is rebuilt deterministically from a corpus file: the
//! normalized word set, sorted, after the fixed special tokens. Unknown
//! words map to `<unk>`.

use std::collections::{BTreeSet, HashMap};

use crate::corpus::Corpus;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const MASK: u32 = 2;
pub const UNK: u32 = 3;
pub const QUERY_PREFIX: u32 = 4;
pub const TITLE_PREFIX: u32 = 5;
pub const CONTEXT_PREFIX: u32 = 6;

pub const MASK_TOKEN: &str = "<mask>";

const SPECIALS: [&str; 7] = [
    "<bos>", "<eos>", MASK_TOKEN, "<unk>", "query:", "title:", "context:",
];

/// Words used by question templates that may not occur in corpus text.
pub const TEMPLATE_WORDS: [&str; 5] = ["which", "entity", "appears", "with", "in"];

#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

/// Lowercase a raw whitespace token and trim edge punctuation; `None` when
/// nothing is left.
pub fn normalize_word(raw: &str) -> Option<String> {
    let trimmed = raw.trim_matches(|c: char| c.is_ascii_punctuation());
    if trimmed.is_empty() {
        return None;
    }
    Some(trimmed.to_lowercase())
}

impl Vocab {
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let unique: BTreeSet<String> = words.into_iter().collect();
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(unique.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())));
        let index = all
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocab { words: all, index }
    }

    /// Vocabulary of a corpus: every normalized word of every title and
    /// passage text, plus the question-template words.
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let mut words = Vec::new();
        for p in corpus.passages() {
            for raw in p.title.split_whitespace().chain(p.text.split_whitespace()) {
                if let Some(w) = normalize_word(raw) {
                    words.push(w);
                }
            }
        }
        words.extend(TEMPLATE_WORDS.iter().map(|s| s.to_string()));
        Vocab::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    /// Tokenize free text: whitespace split, specials matched verbatim,
    /// everything else normalized and looked up (unknowns become `<unk>`).
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for raw in text.split_whitespace() {
            if let Some(&id) = self.index.get(raw) {
                out.push(id);
                continue;
            }
            if let Some(w) = normalize_word(raw) {
                out.push(self.index.get(&w).copied().unwrap_or(UNK));
            }
        }
        out
    }

    /// Query token sequence: "query: {text}".
    pub fn serialize_query(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![QUERY_PREFIX];
        ids.extend(self.tokenize(text));
        ids
    }

    /// Passage token sequence: "title: {title} context: {text}".
    pub fn serialize_passage(&self, title: &str, text: &str) -> Vec<u32> {
        let mut ids = vec![TITLE_PREFIX];
        ids.extend(self.tokenize(title));
        ids.push(CONTEXT_PREFIX);
        ids.extend(self.tokenize(text));
        ids
    }

    /// Join token words with single spaces, dropping control specials.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut parts = Vec::new();
        for &id in ids {
            if id == BOS || id == EOS {
                continue;
            }
            parts.push(self.word(id));
        }
        parts.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_have_fixed_ids() {
        let v = Vocab::from_words(vec!["zebra".into(), "apple".into()]);
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id(MASK_TOKEN), Some(MASK));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.id("query:"), Some(QUERY_PREFIX));
        // corpus words come after specials, sorted
        assert_eq!(v.word(7), "apple");
        assert_eq!(v.word(8), "zebra");
    }

    #[test]
    fn tokenize_strips_punctuation_and_lowercases() {
        let v = Vocab::from_words(vec!["river".into(), "tower".into()]);
        assert_eq!(v.tokenize("River. tower!"), vec![v.id("river").unwrap(), v.id("tower").unwrap()]);
    }

    #[test]
    fn mask_token_survives_tokenization() {
        let v = Vocab::from_words(vec!["walks".into()]);
        assert_eq!(v.tokenize("<mask> walks"), vec![MASK, v.id("walks").unwrap()]);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocab::from_words(vec!["known".into()]);
        assert_eq!(v.tokenize("mystery"), vec![UNK]);
    }

    #[test]
    fn empty_text_after_prefix_keeps_only_the_prefix() {
        let v = Vocab::from_words(vec![]);
        assert_eq!(v.serialize_query(""), vec![QUERY_PREFIX]);
        assert_eq!(
            v.serialize_passage("", ""),
            vec![TITLE_PREFIX, CONTEXT_PREFIX]
        );
    }
}
