//! The combined training loss: retrieval and reranking attention scores are
//! trained by KL divergence toward detached decoder-attention targets, the
//! reader by token NLL; the total is their unweighted sum.
//!
//! In-batch negatives expand only the retrieval scores. A constant penalty
//! gamma is added to the negatives' logits before the softmax so the loss
//! drives their learned raw scores below every retrieved passage's.

use crate::error::{Error, Result};
use crate::tensor::{Graph, TensorRef};

/// Precomputed per-example pieces the loss combines.
pub struct LossInputs {
    /// Raw retrieval logits of the retrieved set, shape (1, R).
    pub retrieved_logits: TensorRef,
    /// Raw retrieval logits of the in-batch negatives, shape (1, Nn).
    pub negative_logits: Option<TensorRef>,
    /// Raw joint logits of the retrieved set, shape (R, 1).
    pub rerank_logits: TensorRef,
    /// Detached decoder-attention scores of the retrieved set, length R.
    pub decoder_scores: Vec<f32>,
    /// Teacher-forced answer NLL, shape [1].
    pub reading_loss: TensorRef,
}

pub struct Losses {
    pub retrieval: TensorRef,
    pub rerank: TensorRef,
    pub reading: TensorRef,
    pub total: TensorRef,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub retrieval: f64,
    pub rerank: f64,
    pub reading: f64,
}

impl LossValues {
    pub fn total(&self) -> f64 {
        self.retrieval + self.rerank + self.reading
    }
}

/// Normalize nonnegative scores to a distribution (f64 accumulation).
/// All-zero prefixes (the decoder's attention on every passage position can
/// underflow to exact zeros in f32) fall back to uniform mass over the
/// first `n_positive` entries, leaving the rest at exactly zero.
fn normalize(scores: &[f32], n_positive: usize) -> Result<Vec<f32>> {
    if scores.iter().any(|&v| v < 0.0) {
        return Err(Error::contract("target scores must be nonnegative"));
    }
    let sum: f64 = scores.iter().map(|&v| v as f64).sum();
    if sum > 0.0 {
        Ok(scores.iter().map(|&v| ((v as f64) / sum) as f32).collect())
    } else {
        let mut t = vec![0.0f32; scores.len()];
        let u = 1.0 / n_positive as f32;
        t[..n_positive].iter_mut().for_each(|x| *x = u);
        Ok(t)
    }
}

pub fn compute_losses(g: &mut Graph, inputs: &LossInputs, gamma: f32) -> Result<Losses> {
    let r = match *g.shape(inputs.retrieved_logits) {
        [1, r] if r >= 1 => r,
        ref s => {
            return Err(Error::shape(
                "compute_losses",
                format!("retrieved logits must be (1, R>=1), got {s:?}"),
            ))
        }
    };
    if inputs.decoder_scores.len() != r {
        return Err(Error::shape(
            "compute_losses",
            format!("{} decoder scores for {r} retrieved", inputs.decoder_scores.len()),
        ));
    }
    if g.shape(inputs.rerank_logits) != [r, 1] {
        return Err(Error::shape(
            "compute_losses",
            format!("rerank logits must be ({r}, 1)"),
        ));
    }

    // S_retrieval over [retrieved || negatives + gamma]
    let n_neg = match inputs.negative_logits {
        Some(neg) => g.shape(neg)[1],
        None => 0,
    };
    let s_ret_logits = match inputs.negative_logits {
        Some(neg) => {
            let penalized = g.add_scalar(neg, gamma);
            g.concat_cols(&[inputs.retrieved_logits, penalized])?
        }
        None => inputs.retrieved_logits,
    };
    let s_retrieval = g.softmax(s_ret_logits, 1)?;
    let s_reranking = g.softmax(inputs.rerank_logits, 0)?;

    // targets: decoder scores for retrieved, exact zeros for negatives,
    // renormalized to distributions; detached constants by construction
    let mut t_ret_raw = inputs.decoder_scores.clone();
    t_ret_raw.extend(std::iter::repeat(0.0f32).take(n_neg));
    let t_retrieval = normalize(&t_ret_raw, r)?;
    let t_reranking = normalize(&inputs.decoder_scores, r)?;
    let t_ret = g.constant(t_retrieval, vec![r + n_neg]);
    let t_rr = g.constant(t_reranking, vec![r]);

    let retrieval = g.kl_divergence(t_ret, s_retrieval)?;
    let rerank = g.kl_divergence(t_rr, s_reranking)?;
    let partial = g.add(retrieval, rerank)?;
    let total = g.add(partial, inputs.reading_loss)?;
    Ok(Losses {
        retrieval,
        rerank,
        reading: inputs.reading_loss,
        total,
    })
}

impl Losses {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            retrieval: g.data(self.retrieval)[0] as f64,
            rerank: g.data(self.rerank)[0] as f64,
            reading: g.data(self.reading)[0] as f64,
        }
    }
}
