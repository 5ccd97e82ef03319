//! Passage-wise joint attention: cross-encode each retrieved passage with
//! the query through layers K..K+L starting from the shared layer-K states,
//! score each pair with a learned vector, and keep the top M at inference.
//! Training never filters here.

use crate::error::{Error, Result};
use crate::model::{HiddenStates, Session};
use crate::retrieval::ScoredPassages;
use crate::tensor::TensorRef;

/// Cross-encode `[query tokens || passage tokens]` for each passage over
/// layers K..K+L with full mutual attention. Inputs must be layer-K states.
/// With L = 0 this degenerates to the concatenation itself.
pub fn joint_encode(
    sess: &mut Session,
    query_k: &HiddenStates,
    passages_k: &[HiddenStates],
) -> Result<Vec<HiddenStates>> {
    let cfg = &sess.model.config;
    let k = cfg.retrieval_layers;
    let to = k + cfg.rerank_layers;
    if query_k.layer_index != k {
        return Err(Error::contract(format!(
            "joint_encode expects layer-{k} query states, got layer {}",
            query_k.layer_index
        )));
    }
    let mut out = Vec::with_capacity(passages_k.len());
    for p in passages_k {
        if p.layer_index != k {
            return Err(Error::contract(format!(
                "joint_encode expects layer-{k} passage states, got layer {}",
                p.layer_index
            )));
        }
        let states = sess.graph.concat_rows(&[query_k.states, p.states])?;
        let mut mask = query_k.mask.clone();
        mask.extend_from_slice(&p.mask);
        let joint = HiddenStates {
            layer_index: k,
            states,
            mask,
        };
        out.push(sess.run_encoder_range(&joint, k, to)?);
    }
    Ok(out)
}

/// Raw joint logits `LayerNorm(H_0) W_qp`, shape (n, 1), in input order.
/// H_0 stacks the first-token rows of every joint encoding.
pub fn joint_logits(sess: &mut Session, joint: &[HiddenStates]) -> Result<TensorRef> {
    if joint.is_empty() {
        return Err(Error::contract("joint_logits needs a nonempty set"));
    }
    let mut firsts = Vec::with_capacity(joint.len());
    for h in joint {
        firsts.push(sess.first_token(h)?);
    }
    let h0 = sess.graph.concat_rows(&firsts)?;
    let gain = sess.p("rerank.ln.gain");
    let bias = sess.p("rerank.ln.bias");
    let normed = sess.graph.layer_norm(h0, gain, bias)?;
    let w_qp = sess.p("rerank.w_qp");
    sess.graph.matmul(normed, w_qp)
}

/// Joint attention scores as a distribution over the retrieved set.
pub fn score_joint(
    sess: &mut Session,
    joint: &[HiddenStates],
    ids: &[u64],
) -> Result<ScoredPassages> {
    if joint.len() != ids.len() {
        return Err(Error::contract("ids and joint encodings disagree"));
    }
    let logits = joint_logits(sess, joint)?;
    let probs = sess.graph.softmax(logits, 0)?;
    let data = sess.graph.data(probs);
    let pairs: Vec<(u64, f32)> = ids.iter().copied().zip(data.iter().copied()).collect();
    Ok(ScoredPassages::from_unsorted(pairs, true))
}

/// Top M by joint score (ties by ascending id). The caller must bypass this
/// during training: the reader consumes the whole retrieved set there.
pub fn select_top_m(scored: &ScoredPassages, m: usize) -> Result<ScoredPassages> {
    if m < 1 {
        return Err(Error::contract("select_top_m requires M >= 1"));
    }
    if m > scored.len() {
        return Err(Error::contract(format!(
            "M = {m} exceeds the scored set of {}",
            scored.len()
        )));
    }
    Ok(ScoredPassages {
        passage_ids: scored.passage_ids[..m].to_vec(),
        scores: scored.scores[..m].to_vec(),
        is_distribution: scored.is_distribution,
    })
}

/// The set the reading layer consumes: everything while training, top M at
/// inference.
pub fn reading_set(scored: &ScoredPassages, m: usize, training: bool) -> Result<ScoredPassages> {
    if training {
        Ok(scored.clone())
    } else {
        select_top_m(scored, m.min(scored.len()).max(1))
    }
}
