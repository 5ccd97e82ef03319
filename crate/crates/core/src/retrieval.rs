//! Passage-wise disjoint attention: independent query/passage encoding
//! through the first K layers, projected and normalized first-token vectors,
//! an exact inner-product index over all passages, and whole-index refresh.

use std::io::Read;
use std::path::Path;
use std::sync::{Arc, RwLock};

use rayon::prelude::*;

use crate::corpus::{Corpus, Passage};
use crate::error::{Error, Result};
use crate::model::{HiddenStates, Model, Prefix, Session};
use crate::tensor::{kernels, TensorRef};
use crate::vocab::Vocab;

pub const INDEX_MAGIC: &[u8; 8] = b"YONOIDX1";

/// Ranked passages. Scores are raw inner products until a softmax turns
/// them into a distribution (`is_distribution`). Always sorted by
/// descending score with ties broken by ascending passage id.
#[derive(Debug, Clone)]
pub struct ScoredPassages {
    pub passage_ids: Vec<u64>,
    pub scores: Vec<f32>,
    pub is_distribution: bool,
}

impl ScoredPassages {
    pub fn from_unsorted(mut pairs: Vec<(u64, f32)>, is_distribution: bool) -> Self {
        pairs.sort_unstable_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        ScoredPassages {
            passage_ids: pairs.iter().map(|p| p.0).collect(),
            scores: pairs.iter().map(|p| p.1).collect(),
            is_distribution,
        }
    }

    pub fn len(&self) -> usize {
        self.passage_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passage_ids.is_empty()
    }
}

/// Disjoint attention scores over a candidate set: scaled inner products
/// softmaxed over the passage axis.
pub fn score_disjoint(
    query_vec: &[f32],
    passages: &[(u64, Vec<f32>)],
    d_k: usize,
) -> Result<ScoredPassages> {
    if passages.is_empty() {
        return Err(Error::contract("score_disjoint needs at least one passage"));
    }
    let scale = 1.0 / (d_k as f32).sqrt();
    let mut logits = Vec::with_capacity(passages.len());
    for (id, v) in passages {
        if v.len() != query_vec.len() {
            return Err(Error::shape(
                "score_disjoint",
                format!("query dim {} vs passage dim {}", query_vec.len(), v.len()),
            ));
        }
        logits.push((*id, kernels::dot_sequential(query_vec, v) * scale));
    }
    let mut probs: Vec<f32> = logits.iter().map(|&(_, s)| s).collect();
    kernels::softmax_slice(&mut probs);
    let pairs = logits
        .iter()
        .zip(&probs)
        .map(|(&(id, _), &p)| (id, p))
        .collect();
    Ok(ScoredPassages::from_unsorted(pairs, true))
}

// ── graph-side vector construction ──────────────────────────────────

/// Layer-K query states plus the projected, normalized query vector
/// `LayerNorm(q_0 W_q)`, shape (1, d).
pub fn query_vector_graph(
    sess: &mut Session,
    tokens: &[u32],
) -> Result<(TensorRef, HiddenStates)> {
    let k = sess.model.config.retrieval_layers;
    let h0 = sess.embed(tokens, Prefix::Query)?;
    let hk = sess.run_encoder_range(&h0, 0, k)?;
    let first = sess.first_token(&hk)?;
    let wq = sess.p("retrieval.wq");
    let proj = sess.graph.matmul(first, wq)?;
    let gain = sess.p("retrieval.ln_q.gain");
    let bias = sess.p("retrieval.ln_q.bias");
    let vec = sess.graph.layer_norm(proj, gain, bias)?;
    Ok((vec, hk))
}

/// Layer-K passage states plus the index-resident key vector
/// `LayerNorm(P_0 W_p)`, shape (1, d).
pub fn passage_vector_graph(
    sess: &mut Session,
    tokens: &[u32],
) -> Result<(TensorRef, HiddenStates)> {
    let k = sess.model.config.retrieval_layers;
    let h0 = sess.embed(tokens, Prefix::Passage)?;
    let hk = sess.run_encoder_range(&h0, 0, k)?;
    let first = sess.first_token(&hk)?;
    let wp = sess.p("retrieval.wp");
    let proj = sess.graph.matmul(first, wp)?;
    let gain = sess.p("retrieval.ln_p.gain");
    let bias = sess.p("retrieval.ln_p.bias");
    let vec = sess.graph.layer_norm(proj, gain, bias)?;
    Ok((vec, hk))
}

/// Index-resident key vector of one passage (pure function of passage and
/// parameters; independent of any query).
pub fn embed_passage(model: &Model, vocab: &Vocab, passage: &Passage) -> Result<Vec<f32>> {
    let tokens = vocab.serialize_passage(&passage.title, &passage.text);
    let mut sess = Session::inference(model);
    let (vec, _) = passage_vector_graph(&mut sess, &tokens)?;
    Ok(sess.graph.data(vec).to_vec())
}

/// Search-side query vector.
pub fn embed_query(model: &Model, vocab: &Vocab, query: &str) -> Result<Vec<f32>> {
    let tokens = vocab.serialize_query(query);
    let mut sess = Session::inference(model);
    let (vec, _) = query_vector_graph(&mut sess, &tokens)?;
    Ok(sess.graph.data(vec).to_vec())
}

/// Batch passage embedding (parallel over passages; identical to the
/// one-by-one path bitwise).
pub fn embed_passages(model: &Model, vocab: &Vocab, passages: &[Passage]) -> Result<Vec<Vec<f32>>> {
    passages
        .par_iter()
        .map(|p| embed_passage(model, vocab, p))
        .collect()
}

// ── the index ────────────────────────────────────────────────────────

/// Versioned matrix of per-passage key vectors with an aligned id array.
/// Immutable once built; refresh produces a new snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct PassageIndex {
    pub version: u32,
    pub dim: usize,
    vectors: Vec<f32>,
    ids: Vec<u64>,
}

/// Result of a top-N search; `clamped` flags N larger than the index.
#[derive(Debug, Clone)]
pub struct TopN {
    pub scored: ScoredPassages,
    pub clamped: bool,
}

impl PassageIndex {
    pub fn from_rows(version: u32, dim: usize, vectors: Vec<f32>, ids: Vec<u64>) -> Result<Self> {
        if vectors.len() != dim * ids.len() {
            return Err(Error::shape(
                "passage_index",
                format!("{} values for {} rows of dim {dim}", vectors.len(), ids.len()),
            ));
        }
        let mut seen = std::collections::HashSet::with_capacity(ids.len());
        for &id in &ids {
            if !seen.insert(id) {
                return Err(Error::DuplicatePassageId(id));
            }
        }
        Ok(PassageIndex {
            version,
            dim,
            vectors,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Exact maximum-inner-product search: the N rows with the largest
    /// inner products, descending, ties by ascending passage id. Raw
    /// (pre-softmax) scores are returned. N larger than the index returns
    /// everything, flagged.
    pub fn top_n(&self, query_vec: &[f32], n: usize) -> Result<TopN> {
        if n < 1 {
            return Err(Error::contract("top_n requires N >= 1"));
        }
        if query_vec.len() != self.dim {
            return Err(Error::shape(
                "top_n",
                format!("query dim {} vs index dim {}", query_vec.len(), self.dim),
            ));
        }
        let pairs: Vec<(u64, f32)> = (0..self.len())
            .map(|i| (self.ids[i], kernels::dot_sequential(query_vec, self.row(i))))
            .collect();
        let mut scored = ScoredPassages::from_unsorted(pairs, false);
        let clamped = n > scored.len();
        if !clamped {
            scored.passage_ids.truncate(n);
            scored.scores.truncate(n);
        }
        Ok(TopN { scored, clamped })
    }
}

/// Build a fresh index (version 1) over every corpus passage.
pub fn build_index(model: &Model, vocab: &Vocab, corpus: &Corpus) -> Result<PassageIndex> {
    index_with_version(model, vocab, corpus, 1)
}

/// Recompute every row with current parameters; the version increments and
/// the caller swaps the snapshot in when ready.
pub fn refresh_index(
    model: &Model,
    vocab: &Vocab,
    corpus: &Corpus,
    old: &PassageIndex,
) -> Result<PassageIndex> {
    index_with_version(model, vocab, corpus, old.version + 1)
}

fn index_with_version(
    model: &Model,
    vocab: &Vocab,
    corpus: &Corpus,
    version: u32,
) -> Result<PassageIndex> {
    let dim = model.config.d_model;
    let rows = embed_passages(model, vocab, corpus.passages())?;
    let mut vectors = Vec::with_capacity(rows.len() * dim);
    let mut ids = Vec::with_capacity(rows.len());
    for (p, row) in corpus.passages().iter().zip(rows) {
        debug_assert_eq!(row.len(), dim);
        vectors.extend_from_slice(&row);
        ids.push(p.id);
    }
    PassageIndex::from_rows(version, dim, vectors, ids)
}

// ── persistence ──────────────────────────────────────────────────────

pub fn save_index(path: &Path, index: &PassageIndex) -> Result<()> {
    let mut out = Vec::with_capacity(20 + index.vectors.len() * 4 + index.ids.len() * 8);
    out.extend_from_slice(INDEX_MAGIC);
    out.extend_from_slice(&index.version.to_le_bytes());
    out.extend_from_slice(&(index.len() as u32).to_le_bytes());
    out.extend_from_slice(&(index.dim as u32).to_le_bytes());
    for &v in &index.vectors {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &id in &index.ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_index(path: &Path) -> Result<PassageIndex> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    if buf.len() < 20 || &buf[..8] != INDEX_MAGIC {
        return Err(Error::format("index", "bad magic or truncated header"));
    }
    let u32_at = |at: usize| u32::from_le_bytes([buf[at], buf[at + 1], buf[at + 2], buf[at + 3]]);
    let version = u32_at(8);
    let count = u32_at(12) as usize;
    let dim = u32_at(16) as usize;
    let vec_bytes = count * dim * 4;
    let id_bytes = count * 8;
    if buf.len() != 20 + vec_bytes + id_bytes {
        return Err(Error::format(
            "index",
            format!("expected {} bytes, found {}", 20 + vec_bytes + id_bytes, buf.len()),
        ));
    }
    let mut vectors = Vec::with_capacity(count * dim);
    for c in buf[20..20 + vec_bytes].chunks_exact(4) {
        vectors.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    }
    let mut ids = Vec::with_capacity(count);
    for c in buf[20 + vec_bytes..].chunks_exact(8) {
        ids.push(u64::from_le_bytes(c.try_into().unwrap()));
    }
    PassageIndex::from_rows(version, dim, vectors, ids)
}

// ── snapshot sharing ─────────────────────────────────────────────────

/// Swappable index handle: readers take an `Arc` snapshot and never observe
/// a partially refreshed index; the writer swaps whole versions.
pub struct SharedIndex {
    inner: RwLock<Arc<PassageIndex>>,
}

impl SharedIndex {
    pub fn new(index: PassageIndex) -> Self {
        SharedIndex {
            inner: RwLock::new(Arc::new(index)),
        }
    }

    pub fn load(&self) -> Arc<PassageIndex> {
        Arc::clone(&self.inner.read().expect("index lock poisoned"))
    }

    pub fn swap(&self, index: PassageIndex) -> Arc<PassageIndex> {
        let mut guard = self.inner.write().expect("index lock poisoned");
        std::mem::replace(&mut *guard, Arc::new(index))
    }
}
