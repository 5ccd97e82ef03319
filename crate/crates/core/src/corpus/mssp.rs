//! Masked-span training-triple extraction.
//!
//! For every (sentence, entity) pair: mask all instances of the entity in
//! the sentence, look for target passages among the two previous and two
//! next passages of the same document (never the source passage itself)
//! that contain the masked entity, keep only targets sharing at least one
//! other entity with the sentence, and pick the target with the most shared
//! entities (ties resolve to the lowest passage id).

use std::collections::BTreeSet;

use super::{sentence_spans, Corpus, Passage, TrainingTriple};
use crate::vocab::MASK_TOKEN;

/// The candidate window: this many passages on each side of the source.
pub const TARGET_WINDOW: u32 = 2;

/// Entities whose recorded occurrences start inside `[start, end)`,
/// ordered by first occurrence.
fn entities_in_span(p: &Passage, start: usize, end: usize) -> Vec<(&str, Vec<usize>)> {
    let mut found: Vec<(&str, Vec<usize>)> = Vec::new();
    for m in &p.entities {
        let offs: Vec<usize> = m
            .offsets
            .iter()
            .copied()
            .filter(|&o| o >= start && o < end)
            .collect();
        if !offs.is_empty() {
            found.push((m.name.as_str(), offs));
        }
    }
    found.sort_by_key(|(_, offs)| offs[0]);
    found
}

fn mask_sentence(sentence: &str, sentence_start: usize, offsets: &[usize], len: usize) -> String {
    let mut out = String::new();
    let mut cursor = 0usize;
    for &off in offsets {
        let local = off - sentence_start;
        out.push_str(&sentence[cursor..local]);
        out.push_str(MASK_TOKEN);
        cursor = local + len;
    }
    out.push_str(&sentence[cursor..]);
    out
}

pub fn extract_mssp_triples(corpus: &Corpus) -> Vec<TrainingTriple> {
    let mut triples = Vec::new();
    for doc_id in corpus.doc_ids() {
        let doc = corpus.doc_passages(doc_id);
        for (pi, p) in doc.iter().enumerate() {
            for (s_start, s_end) in sentence_spans(&p.text) {
                let sentence = &p.text[s_start..s_end];
                let in_sentence = entities_in_span(p, s_start, s_end);
                let names: BTreeSet<&str> = in_sentence.iter().map(|&(n, _)| n).collect();
                for (entity, offsets) in &in_sentence {
                    let others: BTreeSet<&str> =
                        names.iter().copied().filter(|n| n != entity).collect();
                    // candidate targets: +-TARGET_WINDOW positions, not the
                    // source passage, containing the masked entity
                    let mut best: Option<(usize, &Passage)> = None;
                    for (qi, q) in doc.iter().enumerate() {
                        if qi == pi {
                            continue;
                        }
                        let dist = (qi as i64 - pi as i64).unsigned_abs() as u32;
                        if dist > TARGET_WINDOW || !q.contains_entity(entity) {
                            continue;
                        }
                        let common = q
                            .entity_names()
                            .filter(|n| others.contains(n))
                            .count();
                        if common < 1 {
                            continue;
                        }
                        best = match best {
                            None => Some((common, q)),
                            Some((bc, bq)) => {
                                if common > bc || (common == bc && q.id < bq.id) {
                                    Some((common, q))
                                } else {
                                    Some((bc, bq))
                                }
                            }
                        };
                    }
                    if let Some((_, target)) = best {
                        let query = mask_sentence(sentence, s_start, offsets, entity.len());
                        triples.push(TrainingTriple {
                            query,
                            gold_passage_id: target.id,
                            answer: (*entity).to_string(),
                            masked_entity: Some((*entity).to_string()),
                            split: None,
                        });
                    }
                }
            }
        }
    }
    triples
}
