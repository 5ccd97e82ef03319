//! Templated question-answer triples over a corpus.
//!
//! Questions ask which entity co-occurs with a given entity inside a
//! document ("which entity appears with X in <title>"); only entities with
//! exactly one sentence-level partner in the document qualify, so every
//! question has a unique answer. The gold passage id is recorded for
//! evaluation; fine-tuning never consumes it.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{sentence_spans, Corpus, Split, TrainingTriple};

/// Build up to `n` QA triples (`n == 0` means all), split 80/10/10 into
/// train/dev/test, disjoint by question.
pub fn make_qa_triples(seed: u64, corpus: &Corpus, n: usize) -> Vec<TrainingTriple> {
    // (doc, entity) -> partner -> lowest passage id where they share a sentence
    let mut candidates: Vec<TrainingTriple> = Vec::new();
    for doc_id in corpus.doc_ids() {
        let doc = corpus.doc_passages(doc_id);
        let title = doc
            .first()
            .map(|p| p.title.clone())
            .unwrap_or_default();
        let mut partners: BTreeMap<&str, BTreeMap<&str, u64>> = BTreeMap::new();
        for p in &doc {
            for (start, end) in sentence_spans(&p.text) {
                let names: Vec<&str> = p
                    .entities
                    .iter()
                    .filter(|m| m.offsets.iter().any(|&o| o >= start && o < end))
                    .map(|m| m.name.as_str())
                    .collect();
                for &a in &names {
                    for &b in &names {
                        if a != b {
                            let entry = partners
                                .entry(a)
                                .or_default()
                                .entry(b)
                                .or_insert(p.id);
                            *entry = (*entry).min(p.id);
                        }
                    }
                }
            }
        }
        for (a, bs) in partners {
            if bs.len() != 1 {
                continue;
            }
            let (b, pid) = bs.into_iter().next().unwrap();
            candidates.push(TrainingTriple {
                query: format!("which entity appears with {a} in {title}?"),
                gold_passage_id: pid,
                answer: b.to_string(),
                masked_entity: None,
                split: None,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    if n > 0 {
        candidates.truncate(n);
    }
    let total = candidates.len();
    let n_test = total / 10;
    let n_dev = total / 10;
    let n_train = total - n_dev - n_test;
    for (i, t) in candidates.iter_mut().enumerate() {
        t.split = Some(if i < n_train {
            Split::Train
        } else if i < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        });
    }
    candidates
}

/// Filter triples by split label.
pub fn split_of(triples: &[TrainingTriple], split: Split) -> Vec<TrainingTriple> {
    triples
        .iter()
        .filter(|t| t.split == Some(split))
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, GenConfig};

    fn test_corpus() -> Corpus {
        generate_corpus(&GenConfig {
            n_docs: 20,
            ..Default::default()
        })
    }

    #[test]
    fn answers_occur_in_their_recorded_passages() {
        let corpus = test_corpus();
        let triples = make_qa_triples(7, &corpus, 0);
        assert!(!triples.is_empty());
        for t in &triples {
            let p = corpus.get(t.gold_passage_id).unwrap();
            assert!(
                p.text.contains(&t.answer),
                "{:?} not in passage {}",
                t.answer,
                p.id
            );
        }
    }

    #[test]
    fn splits_are_disjoint_by_question() {
        let corpus = test_corpus();
        let triples = make_qa_triples(7, &corpus, 0);
        let train = split_of(&triples, Split::Train);
        let dev = split_of(&triples, Split::Dev);
        let test = split_of(&triples, Split::Test);
        assert_eq!(train.len() + dev.len() + test.len(), triples.len());
        assert!(!dev.is_empty());
        assert!(!test.is_empty());
        let qs = |v: &[TrainingTriple]| -> std::collections::HashSet<String> {
            v.iter().map(|t| t.query.clone()).collect()
        };
        let (q1, q2, q3) = (qs(&train), qs(&dev), qs(&test));
        assert!(q1.is_disjoint(&q2));
        assert!(q1.is_disjoint(&q3));
        assert!(q2.is_disjoint(&q3));
    }

    #[test]
    fn same_seed_same_file() {
        let corpus = test_corpus();
        let a = make_qa_triples(3, &corpus, 50);
        let b = make_qa_triples(3, &corpus, 50);
        assert_eq!(a, b);
        let c = make_qa_triples(4, &corpus, 50);
        assert_ne!(a, c);
    }

    #[test]
    fn answers_are_unique_sentence_partners() {
        // paired entities always co-occur, so each question's answer is the
        // stable partner; asking about the answer must give back the subject
        let corpus = test_corpus();
        let triples = make_qa_triples(7, &corpus, 0);
        for t in triples.iter().take(20) {
            let subject = t
                .query
                .strip_prefix("which entity appears with ")
                .unwrap()
                .split(" in archive")
                .next()
                .unwrap()
                .to_string();
            let reverse = triples.iter().find(|r| {
                r.query.contains(&format!("with {} in", t.answer))
                    && r.gold_passage_id == t.gold_passage_id
            });
            if let Some(rev) = reverse {
                assert_eq!(rev.answer, subject);
            }
        }
    }
}
