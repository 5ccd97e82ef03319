//! Corpus and training-triple types plus their line-delimited JSON files.

mod gen;
mod mssp;
mod qa;

pub use gen::{generate_corpus, GenConfig};
pub use mssp::extract_mssp_triples;
pub use qa::{make_qa_triples, split_of};

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One annotated entity of a passage: the name plus the byte offset of each
/// occurrence in `text`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct EntityMention {
    pub name: String,
    pub offsets: Vec<usize>,
}

/// A titled fixed-width chunk of a document; the unit of retrieval.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Passage {
    pub id: u64,
    pub doc_id: u64,
    pub position_in_doc: u32,
    pub title: String,
    pub text: String,
    pub entities: Vec<EntityMention>,
}

impl Passage {
    pub fn contains_entity(&self, name: &str) -> bool {
        self.entities.iter().any(|e| e.name == name)
    }

    pub fn entity_names(&self) -> impl Iterator<Item = &str> {
        self.entities.iter().map(|e| e.name.as_str())
    }
}

/// Data split label carried by question-answering triples.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// (query, gold passage, answer): the unit of supervision for both the
/// self-supervised pretraining task and QA fine-tuning. `masked_entity` is
/// present only for masked-span triples.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TrainingTriple {
    pub query: String,
    pub gold_passage_id: u64,
    pub answer: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub masked_entity: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub split: Option<Split>,
}

/// In-memory corpus with id lookups.
#[derive(Debug, Clone)]
pub struct Corpus {
    passages: Vec<Passage>,
    by_id: HashMap<u64, usize>,
}

impl Corpus {
    pub fn from_passages(passages: Vec<Passage>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            if by_id.insert(p.id, i).is_some() {
                return Err(Error::DuplicatePassageId(p.id));
            }
        }
        Ok(Corpus { passages, by_id })
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&Passage> {
        self.by_id.get(&id).map(|&i| &self.passages[i])
    }

    /// Passages of one document ordered by position.
    pub fn doc_passages(&self, doc_id: u64) -> Vec<&Passage> {
        let mut v: Vec<&Passage> = self
            .passages
            .iter()
            .filter(|p| p.doc_id == doc_id)
            .collect();
        v.sort_by_key(|p| p.position_in_doc);
        v
    }

    pub fn doc_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.passages.iter().map(|p| p.doc_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Sentences of a passage text with their byte spans. Texts use ". " as the
/// sentence separator; entity names never contain periods.
pub fn sentence_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0usize;
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'.' {
            if i > start {
                spans.push((start, i));
            }
            start = i + 1;
            if bytes.get(start) == Some(&b' ') {
                start += 1;
            }
        }
    }
    if start < text.len() {
        let tail = text[start..].trim();
        if !tail.is_empty() {
            spans.push((start, text.len()));
        }
    }
    spans
}

pub fn save_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut out = Vec::new();
    for p in corpus.passages() {
        serde_json::to_writer(&mut out, p)
            .map_err(|e| Error::format("corpus", e.to_string()))?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut passages = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Passage = serde_json::from_str(&line).map_err(|e| {
            Error::format("corpus", format!("line {}: {e}", lineno + 1))
        })?;
        passages.push(p);
    }
    Corpus::from_passages(passages)
}

pub fn save_triples(path: &Path, triples: &[TrainingTriple]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for t in triples {
        serde_json::to_writer(&mut w, t).map_err(|e| Error::format("triples", e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_triples(path: &Path) -> Result<Vec<TrainingTriple>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut triples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: TrainingTriple = serde_json::from_str(&line).map_err(|e| {
            Error::format("triples", format!("line {}: {e}", lineno + 1))
        })?;
        triples.push(t);
    }
    Ok(triples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_passage_ids_are_rejected() {
        let p = |id| Passage {
            id,
            doc_id: 0,
            position_in_doc: 0,
            title: "t".into(),
            text: "x".into(),
            entities: vec![],
        };
        assert!(matches!(
            Corpus::from_passages(vec![p(1), p(1)]),
            Err(Error::DuplicatePassageId(1))
        ));
    }

    #[test]
    fn sentence_spans_split_on_periods() {
        let text = "alpha beta. gamma delta epsilon. zeta";
        let spans = sentence_spans(text);
        let sents: Vec<&str> = spans.iter().map(|&(a, b)| &text[a..b]).collect();
        assert_eq!(sents, vec!["alpha beta", "gamma delta epsilon", "zeta"]);
    }
}
