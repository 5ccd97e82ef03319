//! Evaluation metrics (Recall@N, Exact Match) and the end-to-end
//! retrieval-vs-rerank evaluation pipeline.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;
use unicode_properties::{GeneralCategoryGroup, UnicodeGeneralCategory};

use crate::corpus::{Corpus, TrainingTriple};
use crate::error::{Error, Result};
use crate::model::{Model, Session};
use crate::reader;
use crate::rerank;
use crate::retrieval::{self, PassageIndex};
use crate::vocab::Vocab;

/// Unicode NFKC, lowercase, then drop punctuation (general category P*) and
/// whitespace.
pub fn normalize_answer(s: &str) -> String {
    s.nfkc()
        .collect::<String>()
        .to_lowercase()
        .chars()
        .filter(|c| {
            !c.is_whitespace() && c.general_category_group() != GeneralCategoryGroup::Punctuation
        })
        .collect()
}

/// 1 iff the normalized generated string equals any normalized gold.
pub fn exact_match(generated: &str, golds: &[String]) -> u32 {
    let g = normalize_answer(generated);
    golds.iter().any(|want| normalize_answer(want) == g) as u32
}

/// Does the passage text contain a span matching any gold answer under the
/// same normalization as exact match?
pub fn contains_answer(text: &str, golds: &[String]) -> bool {
    let t = normalize_answer(text);
    golds.iter().any(|g| {
        let g = normalize_answer(g);
        !g.is_empty() && t.contains(&g)
    })
}

/// One evaluated query: gold answers, the ranked retrieved ids (1-based
/// ranks, rank = position + 1), and the generated answer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query: String,
    pub golds: Vec<String>,
    pub retrieved_ids: Vec<u64>,
    pub generated: String,
}

/// Fraction of records whose top-N passages contain a normalized match of
/// any gold answer.
pub fn recall_at_n(records: &[EvalRecord], n: usize, corpus: &Corpus) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let hits = records
        .iter()
        .filter(|r| {
            r.retrieved_ids.iter().take(n).any(|id| {
                corpus
                    .get(*id)
                    .map(|p| contains_answer(&p.text, &r.golds))
                    .unwrap_or(false)
            })
        })
        .count();
    hits as f64 / records.len() as f64
}

/// Mean exact match over records.
pub fn mean_em(records: &[EvalRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let hits: u32 = records
        .iter()
        .map(|r| exact_match(&r.generated, &r.golds))
        .sum();
    hits as f64 / records.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Retrieval,
    Rerank,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrieval" => Ok(EvalMode::Retrieval),
            "rerank" => Ok(EvalMode::Rerank),
            other => Err(Error::contract(format!(
                "mode must be retrieval or rerank, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mode: EvalMode,
    pub n_retrieve: usize,
    pub m_rerank: usize,
    /// recall at the desk-scale cutoffs {1, 5, 20}
    pub recall: BTreeMap<usize, f64>,
    /// exact match with the full selected reading set
    pub em: f64,
    /// exact match generated from the top-n passages, n in {1, 2, 5, 10}
    pub em_at: BTreeMap<usize, f64>,
    pub n_records: usize,
}

pub const RECALL_CUTOFFS: [usize; 3] = [1, 5, 20];
pub const EM_SWEEP: [usize; 4] = [1, 2, 5, 10];

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub mode: EvalMode,
    pub n_retrieve: usize,
    pub m_rerank: usize,
    pub max_answer_len: usize,
    /// When false, skip reading/generation entirely (recall only).
    pub with_generation: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mode: EvalMode::Retrieval,
            n_retrieve: 20,
            m_rerank: 2,
            max_answer_len: 4,
            with_generation: true,
        }
    }
}

/// Evaluate one (checkpoint, index) pair over QA/masked-span triples.
///
/// Retrieval mode ranks by raw inner product and never runs joint encoding
/// for ranking; rerank mode cross-encodes all `n_retrieve` passages and
/// ranks by joint score, keeping `m_rerank` for reading. The EM@N sweep is
/// produced in the same pass. Read-only: nothing is written.
pub fn evaluate(
    model: &Model,
    vocab: &Vocab,
    corpus: &Corpus,
    index: &PassageIndex,
    triples: &[TrainingTriple],
    opts: &EvalOptions,
) -> Result<EvalSummary> {
    if opts.n_retrieve < 1 {
        return Err(Error::contract("n_retrieve must be >= 1"));
    }
    let results: Result<Vec<(EvalRecord, BTreeMap<usize, u32>)>> = triples
        .par_iter()
        .map(|t| evaluate_one(model, vocab, corpus, index, t, opts))
        .collect();
    let results = results?;

    let records: Vec<EvalRecord> = results.iter().map(|(r, _)| r.clone()).collect();
    let mut recall = BTreeMap::new();
    for k in RECALL_CUTOFFS {
        recall.insert(k, recall_at_n(&records, k, corpus));
    }
    let mut em_at = BTreeMap::new();
    for n in EM_SWEEP {
        let hits: u32 = results.iter().map(|(_, em)| em.get(&n).copied().unwrap_or(0)).sum();
        em_at.insert(
            n,
            if results.is_empty() {
                0.0
            } else {
                hits as f64 / results.len() as f64
            },
        );
    }
    Ok(EvalSummary {
        mode: opts.mode,
        n_retrieve: opts.n_retrieve,
        m_rerank: opts.m_rerank,
        recall,
        em: mean_em(&records),
        em_at,
        n_records: records.len(),
    })
}

fn evaluate_one(
    model: &Model,
    vocab: &Vocab,
    corpus: &Corpus,
    index: &PassageIndex,
    triple: &TrainingTriple,
    opts: &EvalOptions,
) -> Result<(EvalRecord, BTreeMap<usize, u32>)> {
    let golds = vec![triple.answer.clone()];
    let mut sess = Session::inference(model);
    let q_tokens = vocab.serialize_query(&triple.query);
    let (q_vec, q_k) = retrieval::query_vector_graph(&mut sess, &q_tokens)?;
    let q_vec = sess.graph.data(q_vec).to_vec();
    let q_len = q_k.mask.len();
    let top = index.top_n(&q_vec, opts.n_retrieve)?;
    let retrieved = top.scored;

    // recall-only evaluation in retrieval mode needs no cross-encoding
    if !opts.with_generation && opts.mode == EvalMode::Retrieval {
        let record = EvalRecord {
            query: triple.query.clone(),
            golds,
            retrieved_ids: retrieved.passage_ids,
            generated: String::new(),
        };
        return Ok((record, BTreeMap::new()));
    }

    // joint states in retrieval-rank order
    let k = model.config.retrieval_layers;
    let mut passage_states = Vec::with_capacity(retrieved.len());
    for &id in &retrieved.passage_ids {
        let p = corpus
            .get(id)
            .ok_or_else(|| Error::contract(format!("index row {id} missing from corpus")))?;
        let tokens = vocab.serialize_passage(&p.title, &p.text);
        let h0 = sess.embed(&tokens, crate::model::Prefix::Passage)?;
        passage_states.push(sess.run_encoder_range(&h0, 0, k)?);
    }
    let joint = rerank::joint_encode(&mut sess, &q_k, &passage_states)?;

    // mode-specific ranking over the retrieved set
    let (ranked_ids, reading_width) = match opts.mode {
        EvalMode::Retrieval => (retrieved.passage_ids.clone(), retrieved.len()),
        EvalMode::Rerank => {
            let scored = rerank::score_joint(&mut sess, &joint, &retrieved.passage_ids)?;
            (scored.passage_ids, opts.m_rerank.min(retrieved.len()).max(1))
        }
    };

    if !opts.with_generation {
        let record = EvalRecord {
            query: triple.query.clone(),
            golds,
            retrieved_ids: ranked_ids,
            generated: String::new(),
        };
        return Ok((record, BTreeMap::new()));
    }

    // reading-layer encodings once per passage, reused across the EM sweep
    let mut read_in_ranked_order = Vec::with_capacity(ranked_ids.len());
    for &id in &ranked_ids {
        let pos = retrieved
            .passage_ids
            .iter()
            .position(|&x| x == id)
            .expect("ranked ids come from the retrieved set");
        read_in_ranked_order.push(reader::reading_encode_one(&mut sess, &joint[pos])?);
    }

    let generate_with = |n: usize, sess: &mut Session| -> Result<String> {
        let n = n.min(read_in_ranked_order.len()).max(1);
        let parts: Vec<crate::model::HiddenStates> = read_in_ranked_order[..n]
            .iter()
            .map(|h| crate::model::HiddenStates {
                layer_index: h.layer_index,
                states: h.states,
                mask: h.mask.clone(),
            })
            .collect();
        let fused = reader::fuse(sess, &parts, &ranked_ids[..n], q_len)?;
        reader::generate_text(sess, vocab, &fused, opts.max_answer_len)
    };

    let generated = generate_with(reading_width, &mut sess)?;
    let mut em_sweep = BTreeMap::new();
    for n in EM_SWEEP {
        let g = if n >= read_in_ranked_order.len() && reading_width >= read_in_ranked_order.len() {
            generated.clone()
        } else {
            generate_with(n, &mut sess)?
        };
        em_sweep.insert(n, exact_match(&g, &golds));
    }

    Ok((
        EvalRecord {
            query: triple.query.clone(),
            golds,
            retrieved_ids: ranked_ids,
            generated,
        },
        em_sweep,
    ))
}

// ── plot-ready data ──────────────────────────────────────────────────

/// Merge this evaluation's EM@N numbers into the run's `eval_em.json`.
pub fn record_eval_em(run_dir: &Path, summary: &EvalSummary) -> Result<()> {
    let path = run_dir.join("eval_em.json");
    let mut store: BTreeMap<String, BTreeMap<String, f64>> = if path.exists() {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("eval_em.json", e.to_string()))?
    } else {
        BTreeMap::new()
    };
    let key = match summary.mode {
        EvalMode::Retrieval => "retrieval",
        EvalMode::Rerank => "rerank",
    };
    let entry = store.entry(key.to_string()).or_default();
    for (&n, &em) in &summary.em_at {
        entry.insert(n.to_string(), em);
    }
    let text = serde_json::to_string_pretty(&store)
        .map_err(|e| Error::format("eval_em.json", e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Emit `em_vs_n.csv` and `recall_by_iteration.csv` from a run directory's
/// metrics store. Values are copied through without re-rounding, so they
/// round-trip bit-exactly.
pub fn emit_plot_data(run_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut written = Vec::new();

    let metrics_path = run_dir.join("metrics.csv");
    if metrics_path.exists() {
        let text = std::fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        let mut rows: Vec<(u64, String)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() < 5 {
                return Err(Error::format("metrics.csv", format!("short row: {line}")));
            }
            let iter: u64 = cols[0]
                .parse()
                .map_err(|_| Error::format("metrics.csv", format!("bad iteration {:?}", cols[0])))?;
            rows.push((
                iter,
                format!("{},{},{},{}", cols[0], cols[1], cols[2], cols[3]),
            ));
        }
        rows.sort_by_key(|r| r.0);
        let mut out = String::from("iteration,recall@1,recall@5,recall@20\n");
        for (_, row) in rows {
            out.push_str(&row);
            out.push('\n');
        }
        let path = run_dir.join("recall_by_iteration.csv");
        std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }

    let em_path = run_dir.join("eval_em.json");
    if em_path.exists() {
        let text = std::fs::read_to_string(&em_path).map_err(|e| Error::io(&em_path, e))?;
        let store: BTreeMap<String, BTreeMap<String, f64>> =
            serde_json::from_str(&text).map_err(|e| Error::format("eval_em.json", e.to_string()))?;
        let empty = BTreeMap::new();
        let retrieved = store.get("retrieval").unwrap_or(&empty);
        let reranked = store.get("rerank").unwrap_or(&empty);
        let mut ns: Vec<usize> = retrieved
            .keys()
            .chain(reranked.keys())
            .filter_map(|k| k.parse().ok())
            .collect();
        ns.sort_unstable();
        ns.dedup();
        let fmt = |v: Option<&f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("n,em_retrieved,em_reranked\n");
        for n in ns {
            let key = n.to_string();
            out.push_str(&format!(
                "{n},{},{}\n",
                fmt(retrieved.get(&key)),
                fmt(reranked.get(&key))
            ));
        }
        let path = run_dir.join("em_vs_n.csv");
        std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }

    Ok(written)
}
