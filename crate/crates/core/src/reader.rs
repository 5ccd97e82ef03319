//! Fusion-in-decoder reading: finish encoding each selected joint sequence,
//! concatenate encoder outputs across passages, decode the answer, and
//! derive per-passage relevance from the decoder's cross-attention.

use crate::error::{Error, Result};
use crate::model::{DecoderAttentionTrace, HiddenStates, Session};
use crate::tensor::TensorRef;
use crate::vocab::{self, Vocab};

/// Passage-token span inside the fused sequence (query-prefix positions of
/// each segment are excluded).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PassageSpan {
    pub passage_id: u64,
    pub start: usize,
    pub len: usize,
}

/// Concatenated reading-layer encoder outputs with per-passage span
/// bookkeeping.
pub struct FusedEncoding {
    /// (total tokens, d_model)
    pub states: TensorRef,
    pub spans: Vec<PassageSpan>,
    /// Length of the shared query prefix inside every segment.
    pub query_len: usize,
    pub total_len: usize,
}

/// Which decoder output positions feed the distillation scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputAggregation {
    /// Output position 0 only (the default).
    #[default]
    FirstPosition,
    /// Average over all output positions.
    AllPositions,
}

/// Run layers K+L..K+L+R_enc over one joint encoding.
pub fn reading_encode_one(sess: &mut Session, joint: &HiddenStates) -> Result<HiddenStates> {
    let cfg = &sess.model.config;
    let from = cfg.retrieval_layers + cfg.rerank_layers;
    let to = cfg.total_encoder_layers();
    sess.run_encoder_range(joint, from, to)
}

/// Concatenate fully-encoded segments (in the given order) with span
/// bookkeeping. `ids` aligns passages with spans.
pub fn fuse(
    sess: &mut Session,
    encoded: &[HiddenStates],
    ids: &[u64],
    query_len: usize,
) -> Result<FusedEncoding> {
    if encoded.is_empty() {
        return Err(Error::contract("fuse needs at least one passage"));
    }
    if encoded.len() != ids.len() {
        return Err(Error::contract("ids and encodings disagree"));
    }
    let to = sess.model.config.total_encoder_layers();
    let mut parts = Vec::with_capacity(encoded.len());
    let mut spans = Vec::with_capacity(encoded.len());
    let mut at = 0usize;
    for (h, &id) in encoded.iter().zip(ids) {
        if h.layer_index != to {
            return Err(Error::contract(format!(
                "fuse expects layer-{to} states, got layer {}",
                h.layer_index
            )));
        }
        let seg_len = h.mask.len();
        if seg_len <= query_len {
            return Err(Error::contract(format!(
                "segment of {seg_len} tokens has no passage positions after a \
                 query prefix of {query_len}"
            )));
        }
        spans.push(PassageSpan {
            passage_id: id,
            start: at + query_len,
            len: seg_len - query_len,
        });
        at += seg_len;
        parts.push(h.states);
    }
    let states = sess.graph.concat_rows(&parts)?;
    Ok(FusedEncoding {
        states,
        spans,
        query_len,
        total_len: at,
    })
}

/// Run layers K+L..K+L+R_enc over each selected joint encoding (in the
/// given order) and concatenate. `ids` aligns passages with spans.
pub fn encode_reading(
    sess: &mut Session,
    joint: &[HiddenStates],
    ids: &[u64],
    query_len: usize,
) -> Result<FusedEncoding> {
    if joint.is_empty() {
        return Err(Error::contract("encode_reading needs at least one passage"));
    }
    let mut encoded = Vec::with_capacity(joint.len());
    for h in joint {
        encoded.push(reading_encode_one(sess, h)?);
    }
    fuse(sess, &encoded, ids, query_len)
}

/// Teacher-forced answer NLL over the fused encoding. `answer_ids` must end
/// with `<eos>`; the decoder consumes `[<bos>, answer_ids[..-1]]`.
/// Also returns the detached cross-attention trace of the pass.
pub fn reading_loss(
    sess: &mut Session,
    fused: &FusedEncoding,
    answer_ids: &[u32],
) -> Result<(TensorRef, DecoderAttentionTrace)> {
    if answer_ids.is_empty() {
        return Err(Error::contract("reading_loss needs a nonempty answer"));
    }
    let mut decoder_input = Vec::with_capacity(answer_ids.len());
    decoder_input.push(vocab::BOS);
    decoder_input.extend_from_slice(&answer_ids[..answer_ids.len() - 1]);
    let (logits, trace) = sess.run_decoder(fused.states, &decoder_input)?;
    let loss = sess.graph.cross_entropy_tokens(logits, answer_ids)?;
    Ok((loss, trace))
}

/// Per-passage target scores from the decoder trace: attention mass over
/// each passage's own token span, averaged over layers, heads and the
/// passage's token count. Detached by construction (the trace is captured
/// outside the graph).
pub fn score_decoder(
    trace: &DecoderAttentionTrace,
    spans: &[PassageSpan],
    aggregation: OutputAggregation,
) -> Result<Vec<f32>> {
    let outputs: &[usize] = match aggregation {
        OutputAggregation::FirstPosition => &[0],
        OutputAggregation::AllPositions => &[],
    };
    let mut scores = Vec::with_capacity(spans.len());
    for span in spans {
        if span.len == 0 {
            return Err(Error::contract(format!(
                "passage {} has an empty span",
                span.passage_id
            )));
        }
        if span.start + span.len > trace.n_enc {
            return Err(Error::contract(format!(
                "span of passage {} exceeds the fused length",
                span.passage_id
            )));
        }
        let mut acc = 0.0f64;
        let mut n_out = 0usize;
        for l in 0..trace.n_layers {
            for h in 0..trace.n_heads {
                if outputs.is_empty() {
                    for t in 0..trace.n_outputs {
                        let row = trace.row(l, h, t);
                        acc += row[span.start..span.start + span.len]
                            .iter()
                            .map(|&v| v as f64)
                            .sum::<f64>();
                    }
                    n_out = trace.n_outputs;
                } else {
                    for &t in outputs {
                        let row = trace.row(l, h, t);
                        acc += row[span.start..span.start + span.len]
                            .iter()
                            .map(|&v| v as f64)
                            .sum::<f64>();
                    }
                    n_out = outputs.len();
                }
            }
        }
        let denom = (trace.n_layers * trace.n_heads * span.len * n_out) as f64;
        scores.push((acc / denom) as f32);
    }
    Ok(scores)
}

/// Greedy decoding until `<eos>` or `max_len` tokens. Ties in the argmax
/// resolve to the lowest token id. Returns generated ids without `<eos>`.
pub fn generate(sess: &mut Session, fused: &FusedEncoding, max_len: usize) -> Result<Vec<u32>> {
    let mut out: Vec<u32> = Vec::new();
    for _ in 0..max_len {
        let mut input = Vec::with_capacity(out.len() + 1);
        input.push(vocab::BOS);
        input.extend_from_slice(&out);
        let (logits, _) = sess.run_decoder(fused.states, &input)?;
        let vocab_size = sess.graph.shape(logits)[1];
        let t = input.len() - 1;
        let row = &sess.graph.data(logits)[t * vocab_size..(t + 1) * vocab_size];
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if best as u32 == vocab::EOS {
            break;
        }
        out.push(best as u32);
    }
    Ok(out)
}

/// Convenience: decode generated ids into an answer string.
pub fn generate_text(
    sess: &mut Session,
    vocab: &Vocab,
    fused: &FusedEncoding,
    max_len: usize,
) -> Result<String> {
    let ids = generate(sess, fused, max_len)?;
    Ok(vocab.decode(&ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::model::{Model, Prefix, Session};
    use crate::rerank::joint_encode;

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            vocab_size: 29,
            d_model: 16,
            n_heads: 2,
            max_seq_len: 12,
            max_query_len: 6,
            retrieval_layers: 1,
            rerank_layers: 1,
            reading_layers: 1,
            decoder_layers: 1,
            dropout: 0.0,
            retrieval_width: 4,
            rerank_width: 2,
        };
        Model::init(cfg, 23).unwrap()
    }

    fn joints(
        sess: &mut Session,
        q_tokens: &[u32],
        p_tokens: &[&[u32]],
    ) -> (Vec<HiddenStates>, usize) {
        let k = sess.model.config.retrieval_layers;
        let q0 = sess.embed(q_tokens, Prefix::Query).unwrap();
        let qk = sess.run_encoder_range(&q0, 0, k).unwrap();
        let ps: Vec<HiddenStates> = p_tokens
            .iter()
            .map(|t| {
                let h = sess.embed(t, Prefix::Passage).unwrap();
                sess.run_encoder_range(&h, 0, k).unwrap()
            })
            .collect();
        let j = joint_encode(sess, &qk, &ps).unwrap();
        (j, q_tokens.len())
    }

    #[test]
    fn single_passage_fusion_length() {
        let model = tiny_model();
        let mut s = Session::inference(&model);
        let (j, qlen) = joints(&mut s, &[8, 9], &[&[10, 11, 12]]);
        let fused = encode_reading(&mut s, &j, &[7], qlen).unwrap();
        assert_eq!(fused.total_len, 5);
        assert_eq!(s.graph.shape(fused.states)[0], 5);
        assert_eq!(
            fused.spans,
            vec![PassageSpan {
                passage_id: 7,
                start: 2,
                len: 3
            }]
        );
    }

    #[test]
    fn span_bookkeeping_partitions_the_fusion() {
        let model = tiny_model();
        let mut s = Session::inference(&model);
        let (j, qlen) = joints(&mut s, &[8, 9], &[&[10, 11, 12], &[13, 14], &[15, 16, 17, 18]]);
        let fused = encode_reading(&mut s, &j, &[1, 2, 3], qlen).unwrap();
        // every position is a query-prefix position or in exactly one span
        let mut owner = vec![0u8; fused.total_len];
        let mut seg_start = 0;
        for span in &fused.spans {
            for i in span.start..span.start + span.len {
                owner[i] += 1;
            }
            for i in seg_start..span.start {
                owner[i] += 10; // query prefix marker
            }
            seg_start = span.start + span.len;
        }
        assert!(owner.iter().all(|&o| o == 1 || o == 10));
    }

    #[test]
    fn permuting_passages_permutes_their_encodings_exactly() {
        let model = tiny_model();
        let d = model.config.d_model;
        let mut s = Session::inference(&model);
        let (j, qlen) = joints(&mut s, &[8, 9], &[&[10, 11, 12], &[13, 14]]);
        let f12 = encode_reading(&mut s, &j, &[1, 2], qlen).unwrap();
        let j_swapped = vec![
            HiddenStates {
                layer_index: j[1].layer_index,
                states: j[1].states,
                mask: j[1].mask.clone(),
            },
            HiddenStates {
                layer_index: j[0].layer_index,
                states: j[0].states,
                mask: j[0].mask.clone(),
            },
        ];
        let f21 = encode_reading(&mut s, &j_swapped, &[2, 1], qlen).unwrap();
        let a = s.graph.data(f12.states);
        let b = s.graph.data(f21.states);
        let seg1 = 2 + 3; // query + passage1
        let seg2 = 2 + 2;
        assert_eq!(&a[..seg1 * d], &b[seg2 * d..(seg2 + seg1) * d]);
        assert_eq!(&a[seg1 * d..], &b[..seg2 * d]);
    }

    #[test]
    fn score_decoder_uniform_attention_equal_lengths() {
        let n_enc = 8;
        let trace = DecoderAttentionTrace::from_raw(
            2,
            2,
            3,
            n_enc,
            vec![vec![1.0 / n_enc as f32; 3 * n_enc]; 4],
        );
        let spans = vec![
            PassageSpan { passage_id: 0, start: 1, len: 3 },
            PassageSpan { passage_id: 1, start: 5, len: 3 },
        ];
        let scores = score_decoder(&trace, &spans, OutputAggregation::FirstPosition).unwrap();
        assert!((scores[0] - scores[1]).abs() < 1e-7);
    }

    #[test]
    fn score_decoder_all_mass_on_one_passage() {
        let n_enc = 6;
        let mut w = vec![0.0f32; 2 * n_enc];
        // output 0 attends only to positions 4..6 (passage 1)
        w[4] = 0.5;
        w[5] = 0.5;
        let trace = DecoderAttentionTrace::from_raw(1, 1, 2, n_enc, vec![w]);
        let spans = vec![
            PassageSpan { passage_id: 0, start: 1, len: 3 },
            PassageSpan { passage_id: 1, start: 4, len: 2 },
        ];
        let scores = score_decoder(&trace, &spans, OutputAggregation::FirstPosition).unwrap();
        assert_eq!(scores[0], 0.0);
        assert!(scores[1] > 0.0);
    }

    #[test]
    fn score_decoder_matches_direct_summation() {
        // hand-built trace: 1 layer, 1 head, 2 passages of lengths 2 and 3
        let n_enc = 7; // [q q | p p | q q? ...] spans below pick positions
        let att0: Vec<f32> = vec![
            0.05, 0.10, 0.20, 0.15, 0.25, 0.10, 0.15, // output 0
            0.30, 0.05, 0.05, 0.10, 0.10, 0.20, 0.20, // output 1 (ignored)
        ];
        let trace = DecoderAttentionTrace::from_raw(1, 1, 2, n_enc, vec![att0]);
        let spans = vec![
            PassageSpan { passage_id: 4, start: 2, len: 2 },
            PassageSpan { passage_id: 9, start: 4, len: 3 },
        ];
        let got = score_decoder(&trace, &spans, OutputAggregation::FirstPosition).unwrap();
        let want0 = (0.20 + 0.15) / 2.0;
        let want1 = (0.25 + 0.10 + 0.15) / 3.0;
        assert!((got[0] - want0).abs() < 1e-6);
        assert!((got[1] - want1).abs() < 1e-6);
        // aggregation over outputs averages both rows
        let got_all = score_decoder(&trace, &spans, OutputAggregation::AllPositions).unwrap();
        let want0_all = ((0.20 + 0.15) + (0.05 + 0.10)) / (2.0 * 2.0);
        assert!((got_all[0] - want0_all).abs() < 1e-6);
    }

    #[test]
    fn score_decoder_rejects_empty_spans() {
        let trace = DecoderAttentionTrace::from_raw(1, 1, 1, 4, vec![vec![0.25; 4]]);
        let spans = vec![PassageSpan { passage_id: 0, start: 2, len: 0 }];
        assert!(score_decoder(&trace, &spans, OutputAggregation::FirstPosition).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_stops() {
        let model = tiny_model();
        let mut s = Session::inference(&model);
        let (j, qlen) = joints(&mut s, &[8, 9], &[&[10, 11, 12]]);
        let fused = encode_reading(&mut s, &j, &[0], qlen).unwrap();
        let a = generate(&mut s, &fused, 5).unwrap();
        let mut s2 = Session::inference(&model);
        let (j2, qlen2) = joints(&mut s2, &[8, 9], &[&[10, 11, 12]]);
        let fused2 = encode_reading(&mut s2, &j2, &[0], qlen2).unwrap();
        let b = generate(&mut s2, &fused2, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 5);
    }
}
