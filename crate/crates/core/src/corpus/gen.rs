//! Deterministic synthetic corpus generation.
//!
//! Documents are built from a seeded entity lexicon of two-word proper
//! nouns. Each document's entities form stable pairs that recur together in
//! overlapping windows of neighboring passages, so masked-span extraction
//! always finds evidence passages nearby that share a second entity with
//! the source sentence. Filler sentences pad every passage to exactly
//! `words_per_passage` words.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Corpus, EntityMention, Passage};

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub seed: u64,
    pub n_docs: usize,
    pub entities_per_doc: usize,
    pub lexicon_size: usize,
    pub words_per_passage: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            n_docs: 200,
            entities_per_doc: 8,
            lexicon_size: 500,
            words_per_passage: 30,
        }
    }
}

const NOUNS: [&str; 16] = [
    "river", "tower", "market", "harbor", "garden", "bridge", "meadow", "archive", "lantern",
    "cellar", "orchard", "quarry", "mill", "granary", "chapel", "crossroads",
];
const VERBS: [&str; 12] = [
    "travels", "trades", "argues", "camps", "feasts", "marches", "rests", "sails", "studies",
    "works", "winters", "lodges",
];
const PREPS: [&str; 6] = ["near", "beyond", "under", "past", "behind", "around"];
const ADJS: [&str; 10] = [
    "old", "quiet", "busy", "narrow", "bright", "foggy", "stony", "green", "distant", "crowded",
];
const ADVS: [&str; 6] = ["daily", "quietly", "proudly", "rarely", "together", "slowly"];

const ONSETS: [&str; 30] = [
    "bren", "dal", "fyr", "gor", "hest", "jil", "kor", "lum", "mar", "nev", "oss", "pren", "quil",
    "rost", "sab", "tev", "ulm", "vor", "wyn", "zar", "bel", "cyn", "dral", "fen", "grim", "hol",
    "kest", "lor", "mord", "nast",
];
const RIMES: [&str; 40] = [
    "ak", "born", "dale", "eth", "fall", "gate", "holm", "ik", "lorn", "mond", "nok", "or",
    "pike", "quist", "rath", "stad", "tor", "um", "vik", "wood", "ard", "berg", "crest", "dun",
    "evi", "fiel", "grove", "hurst", "ing", "keld", "land", "mere", "ness", "ohm", "point", "rook",
    "shaw", "thorp", "usk", "wald",
];
const MIDS: [&str; 10] = ["a", "e", "i", "o", "u", "an", "el", "is", "on", "ur"];

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

/// Deterministic pool of invented capitalized words, disjoint from the
/// filler and template vocabulary by construction.
fn entity_word_pool(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let mut pool = Vec::new();
    for o in ONSETS {
        for r in RIMES {
            pool.push(capitalize(&format!("{o}{r}")));
        }
    }
    pool.shuffle(rng);
    if n > pool.len() {
        let mut extra = Vec::new();
        for o in ONSETS {
            for m in MIDS {
                for r in RIMES {
                    extra.push(capitalize(&format!("{o}{m}{r}")));
                }
            }
        }
        extra.shuffle(rng);
        pool.extend(extra);
    }
    pool.truncate(n);
    pool
}

/// `lexicon_size` two-word proper nouns; every word appears in exactly one
/// name, so occurrences never overlap.
pub fn entity_lexicon(seed: u64, lexicon_size: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(1));
    let words = entity_word_pool(&mut rng, lexicon_size * 2);
    words
        .chunks_exact(2)
        .map(|pair| format!("{} {}", pair[0], pair[1]))
        .collect()
}

/// A sentence under construction: its words plus (entity name, word index)
/// markers for offset bookkeeping.
struct Sentence {
    words: Vec<String>,
    entity_marks: Vec<(String, usize)>,
}

fn pick<'a>(rng: &mut ChaCha8Rng, list: &'a [&'a str]) -> &'a str {
    list[rng.gen_range(0..list.len())]
}

fn split_name(name: &str) -> (&str, &str) {
    name.split_once(' ').expect("entity names are two words")
}

fn pair_sentence(rng: &mut ChaCha8Rng, a: &str, b: &str) -> Sentence {
    let (a0, a1) = split_name(a);
    let (b0, b1) = split_name(b);
    if rng.gen_bool(0.15) {
        // repeat variant: the first entity occurs twice
        let words: Vec<String> = vec![
            a0.into(),
            a1.into(),
            pick(rng, &VERBS).into(),
            b0.into(),
            b1.into(),
            "beside".into(),
            a0.into(),
            a1.into(),
            pick(rng, &ADVS).into(),
        ];
        Sentence {
            words,
            entity_marks: vec![(a.into(), 0), (b.into(), 3), (a.into(), 6)],
        }
    } else {
        let words: Vec<String> = vec![
            a0.into(),
            a1.into(),
            pick(rng, &VERBS).into(),
            "with".into(),
            b0.into(),
            b1.into(),
            pick(rng, &PREPS).into(),
            "the".into(),
            pick(rng, &NOUNS).into(),
        ];
        Sentence {
            words,
            entity_marks: vec![(a.into(), 0), (b.into(), 4)],
        }
    }
}

fn solo_sentence(rng: &mut ChaCha8Rng, s: &str) -> Sentence {
    let (s0, s1) = split_name(s);
    let words: Vec<String> = vec![
        s0.into(),
        s1.into(),
        pick(rng, &VERBS).into(),
        pick(rng, &PREPS).into(),
        "the".into(),
        pick(rng, &NOUNS).into(),
    ];
    Sentence {
        words,
        entity_marks: vec![(s.into(), 0)],
    }
}

fn filler_sentence(rng: &mut ChaCha8Rng, n: usize) -> Sentence {
    debug_assert!(n >= 3);
    let mut words: Vec<String> = vec![
        "the".into(),
        pick(rng, &ADJS).into(),
        pick(rng, &NOUNS).into(),
    ];
    while words.len() < n {
        match words.len() % 4 {
            0 => words.push(pick(rng, &NOUNS).into()),
            1 => words.push(pick(rng, &VERBS).into()),
            2 => words.push(pick(rng, &PREPS).into()),
            _ => words.push(pick(rng, &ADJS).into()),
        }
    }
    words.truncate(n);
    Sentence {
        words,
        entity_marks: vec![],
    }
}

fn render_passage(sentences: Vec<Sentence>) -> (String, Vec<EntityMention>) {
    let mut text = String::new();
    let mut mentions: Vec<EntityMention> = Vec::new();
    for (si, s) in sentences.iter().enumerate() {
        if si > 0 {
            text.push(' ');
        }
        let mut word_offsets = Vec::with_capacity(s.words.len());
        for (wi, w) in s.words.iter().enumerate() {
            if wi > 0 {
                text.push(' ');
            }
            word_offsets.push(text.len());
            text.push_str(w);
        }
        text.push('.');
        for (name, wi) in &s.entity_marks {
            let off = word_offsets[*wi];
            match mentions.iter_mut().find(|m| &m.name == name) {
                Some(m) => m.offsets.push(off),
                None => mentions.push(EntityMention {
                    name: name.clone(),
                    offsets: vec![off],
                }),
            }
        }
    }
    (text, mentions)
}

pub fn generate_corpus(cfg: &GenConfig) -> Corpus {
    assert!(cfg.words_per_passage >= 12, "passages need at least 12 words");
    let lexicon = entity_lexicon(cfg.seed, cfg.lexicon_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Deal entities to documents from a reshuffled cycle; a document never
    // holds the same entity twice.
    let mut deck: Vec<usize> = Vec::new();
    let mut deal = |rng: &mut ChaCha8Rng, taken: &[usize]| -> usize {
        loop {
            if deck.is_empty() {
                deck = (0..lexicon.len()).collect();
                deck.shuffle(rng);
            }
            let cand = deck.pop().unwrap();
            if !taken.contains(&cand) {
                return cand;
            }
        }
    };

    let mut passages = Vec::new();
    let mut next_passage_id = 0u64;
    for doc_id in 0..cfg.n_docs as u64 {
        let mut taken: Vec<usize> = Vec::new();
        for _ in 0..cfg.entities_per_doc.min(lexicon.len()) {
            let e = deal(&mut rng, &taken);
            taken.push(e);
        }
        let entities: Vec<&str> = taken.iter().map(|&i| lexicon[i].as_str()).collect();
        let pairs: Vec<(&str, &str)> = entities
            .chunks_exact(2)
            .map(|c| (c[0], c[1]))
            .collect();
        let solo: Option<&str> = if entities.len() % 2 == 1 {
            entities.last().copied()
        } else {
            None
        };

        let n_passages = rng.gen_range(5..=9);
        let title = format!("archive {doc_id}");
        for pos in 0..n_passages {
            let mut sentences: Vec<Sentence> = Vec::new();
            let mut remaining = cfg.words_per_passage;

            // one pair sentence per passage; each pair recurs in two
            // consecutive passages so masked spans always have an evidence
            // passage inside the +-2 window
            if !pairs.is_empty() && remaining >= 9 {
                let pi = (pos / 2) % pairs.len();
                let (a, b) = pairs[pi];
                sentences.push(pair_sentence(&mut rng, a, b));
                remaining -= 9;
            }
            if let Some(s) = solo {
                if pos % 2 == 0 && remaining >= 6 + 3 {
                    sentences.push(solo_sentence(&mut rng, s));
                    remaining -= 6;
                }
            }
            while remaining > 0 {
                if remaining > 9 {
                    sentences.push(filler_sentence(&mut rng, 6));
                    remaining -= 6;
                } else if remaining >= 3 {
                    sentences.push(filler_sentence(&mut rng, remaining));
                    remaining = 0;
                } else {
                    // extend the last sentence rather than emit a fragment
                    let last = sentences.last_mut().expect("at least one sentence");
                    for _ in 0..remaining {
                        last.words.push(pick(&mut rng, &ADJS).into());
                    }
                    remaining = 0;
                }
            }

            let (text, entities) = render_passage(sentences);
            passages.push(Passage {
                id: next_passage_id,
                doc_id,
                position_in_doc: pos as u32,
                title: title.clone(),
                text,
                entities,
            });
            next_passage_id += 1;
        }
    }
    Corpus::from_passages(passages).expect("generated ids are sequential")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::extract_mssp_triples;

    #[test]
    fn same_seed_is_bitwise_identical() {
        let cfg = GenConfig {
            n_docs: 8,
            ..GenConfig::default()
        };
        let a = generate_corpus(&cfg);
        let b = generate_corpus(&cfg);
        let ja = serde_json::to_string(a.passages()).unwrap();
        let jb = serde_json::to_string(b.passages()).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn entity_offsets_verify_against_text() {
        let cfg = GenConfig {
            n_docs: 12,
            ..GenConfig::default()
        };
        let corpus = generate_corpus(&cfg);
        let mut checked = 0;
        for p in corpus.passages() {
            for m in &p.entities {
                for &off in &m.offsets {
                    assert_eq!(
                        &p.text[off..off + m.name.len()],
                        m.name,
                        "offset {off} of {:?} in passage {}",
                        m.name,
                        p.id
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn passages_have_exact_word_counts() {
        let cfg = GenConfig {
            n_docs: 6,
            ..GenConfig::default()
        };
        let corpus = generate_corpus(&cfg);
        for p in corpus.passages() {
            let words = p.text.split_whitespace().count();
            assert_eq!(words, cfg.words_per_passage, "passage {}: {:?}", p.id, p.text);
        }
    }

    #[test]
    fn passages_are_ordered_and_nonoverlapping_within_docs() {
        let cfg = GenConfig {
            n_docs: 5,
            ..GenConfig::default()
        };
        let corpus = generate_corpus(&cfg);
        for doc in corpus.doc_ids() {
            let ps = corpus.doc_passages(doc);
            for (i, p) in ps.iter().enumerate() {
                assert_eq!(p.position_in_doc as usize, i);
            }
        }
    }

    #[test]
    fn single_entity_without_pairs_yields_no_triples() {
        let cfg = GenConfig {
            n_docs: 6,
            entities_per_doc: 1,
            ..GenConfig::default()
        };
        let corpus = generate_corpus(&cfg);
        assert!(extract_mssp_triples(&corpus).is_empty());
    }
}
