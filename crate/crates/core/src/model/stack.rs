//! Forward passes over the shared encoder/decoder stack.
//!
//! A [`Session`] owns one autodiff graph plus the bindings of model
//! parameters into it. The encoder is runnable over any contiguous layer
//! range so retrieval, reranking and reading all refine the same hidden
//! states; the decoder records its post-softmax cross-attention weights,
//! detached, for distillation targets.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Model;
use crate::error::{Error, Result};
use crate::tensor::{GradStore, Graph, TensorRef};
use crate::vocab;

/// Input role: decides the serialization prefix, truncation limit and the
/// position offset (passages start at the query-slot boundary so a joint
/// query + passage sequence has one coherent position space).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prefix {
    Query,
    Passage,
}

/// Encoder activations at a known depth.
pub struct HiddenStates {
    pub layer_index: usize,
    /// (tokens, d_model)
    pub states: TensorRef,
    pub mask: Vec<bool>,
}

/// Post-softmax decoder cross-attention weights, captured detached from the
/// autodiff graph at the moment of the forward pass.
pub struct DecoderAttentionTrace {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_outputs: usize,
    pub n_enc: usize,
    /// indexed `[layer * n_heads + head]`, each `(n_outputs, n_enc)` row-major
    att: Vec<Vec<f32>>,
}

impl DecoderAttentionTrace {
    /// Assemble a trace from raw per-(layer, head) weight matrices; used by
    /// tests and diagnostics.
    pub fn from_raw(
        n_layers: usize,
        n_heads: usize,
        n_outputs: usize,
        n_enc: usize,
        att: Vec<Vec<f32>>,
    ) -> Self {
        assert_eq!(att.len(), n_layers * n_heads);
        for w in &att {
            assert_eq!(w.len(), n_outputs * n_enc);
        }
        DecoderAttentionTrace {
            n_layers,
            n_heads,
            n_outputs,
            n_enc,
            att,
        }
    }

    pub fn weights(&self, layer: usize, head: usize) -> &[f32] {
        &self.att[layer * self.n_heads + head]
    }

    /// One attention row: output position `t` of (layer, head).
    pub fn row(&self, layer: usize, head: usize, t: usize) -> &[f32] {
        let w = self.weights(layer, head);
        &w[t * self.n_enc..(t + 1) * self.n_enc]
    }
}

pub struct Session<'m> {
    pub model: &'m Model,
    pub graph: Graph,
    pub train: bool,
    bound: Vec<Option<TensorRef>>,
    dropout_rng: ChaCha8Rng,
}

impl<'m> Session<'m> {
    /// Gradient-recording session; `seed` drives dropout masks.
    pub fn new(model: &'m Model, train: bool, seed: u64) -> Self {
        Session {
            model,
            graph: Graph::new(),
            train,
            bound: vec![None; model.params.len()],
            dropout_rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Forward-only session (no gradient bookkeeping, no dropout).
    pub fn inference(model: &'m Model) -> Self {
        Session {
            model,
            graph: Graph::with_grad(false),
            train: false,
            bound: vec![None; model.params.len()],
            dropout_rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Bind a named parameter into the graph (once per session).
    pub fn p(&mut self, name: &str) -> TensorRef {
        let id = self.model.params.id(name);
        if let Some(t) = self.bound[id] {
            return t;
        }
        let t = self
            .graph
            .param(self.model.params.arc(id), self.model.params.shape(id).to_vec());
        self.bound[id] = Some(t);
        t
    }

    /// Per-parameter gradients (aligned with the param store), extracted
    /// from a backward pass over this session's graph.
    pub fn collect_param_grads(&self, grads: &GradStore) -> Vec<Option<Vec<f32>>> {
        self.bound
            .iter()
            .map(|slot| {
                slot.and_then(|t| grads.grad(t).map(|g| g.to_vec()))
            })
            .collect()
    }

    fn maybe_dropout(&mut self, x: TensorRef) -> TensorRef {
        if self.train && self.model.config.dropout > 0.0 {
            self.graph
                .dropout(x, self.model.config.dropout, &mut self.dropout_rng)
        } else {
            x
        }
    }

    // ── embedding ────────────────────────────────────────────────────

    /// Token + learned absolute position embeddings at layer 0. Sequences
    /// are truncated to the prefix's length limit. Queries sit at positions
    /// `[0, max_query_len)`, passages at `[max_query_len, ...)`.
    pub fn embed(&mut self, token_ids: &[u32], prefix: Prefix) -> Result<HiddenStates> {
        let cfg = &self.model.config;
        let limit = match prefix {
            Prefix::Query => cfg.max_query_len,
            Prefix::Passage => cfg.max_seq_len,
        };
        let ids = &token_ids[..token_ids.len().min(limit)];
        if ids.is_empty() {
            return Err(Error::contract("cannot embed an empty sequence"));
        }
        let offset = match prefix {
            Prefix::Query => 0u32,
            Prefix::Passage => cfg.max_query_len as u32,
        };
        let pos_ids: Vec<u32> = (0..ids.len() as u32).map(|i| i + offset).collect();
        let tok_table = self.p("embed.token");
        let pos_table = self.p("embed.pos");
        let tok = self.graph.embedding(tok_table, ids)?;
        let pos = self.graph.embedding(pos_table, &pos_ids)?;
        let states = self.graph.add(tok, pos)?;
        Ok(HiddenStates {
            layer_index: 0,
            states,
            mask: vec![true; ids.len()],
        })
    }

    // ── attention ────────────────────────────────────────────────────

    /// Additive attention bias for the given key mask / causality; `None`
    /// when nothing is masked.
    fn attention_bias(
        &mut self,
        n_q: usize,
        key_mask: Option<&[bool]>,
        causal: bool,
    ) -> Option<TensorRef> {
        let masked_keys = key_mask.map_or(false, |m| m.iter().any(|&b| !b));
        if !masked_keys && !causal {
            return None;
        }
        let n_k = key_mask.map_or(n_q, |m| m.len());
        let mut bias = vec![0.0f32; n_q * n_k];
        for i in 0..n_q {
            for j in 0..n_k {
                let blocked = (causal && j > i) || key_mask.map_or(false, |m| !m[j]);
                if blocked {
                    bias[i * n_k + j] = -1e9;
                }
            }
        }
        Some(self.graph.constant(bias, vec![n_q, n_k]))
    }

    /// Multi-head attention; `trace` collects detached per-head post-softmax
    /// weights when provided.
    fn mha(
        &mut self,
        name: &str,
        q_src: TensorRef,
        kv_src: TensorRef,
        bias: Option<TensorRef>,
        trace: Option<&mut Vec<Vec<f32>>>,
    ) -> Result<TensorRef> {
        let cfg = &self.model.config;
        let (n_heads, d_head) = (cfg.n_heads, cfg.d_head());
        let wq = self.p(&format!("{name}.wq"));
        let wk = self.p(&format!("{name}.wk"));
        let wv = self.p(&format!("{name}.wv"));
        let wo = self.p(&format!("{name}.wo"));
        let q = self.graph.matmul(q_src, wq)?;
        let k = self.graph.matmul(kv_src, wk)?;
        let v = self.graph.matmul(kv_src, wv)?;
        let scale = 1.0 / (d_head as f32).sqrt();
        let mut heads = Vec::with_capacity(n_heads);
        let mut captured: Vec<Vec<f32>> = Vec::new();
        for h in 0..n_heads {
            let qh = self.graph.slice_cols(q, h * d_head, d_head)?;
            let kh = self.graph.slice_cols(k, h * d_head, d_head)?;
            let vh = self.graph.slice_cols(v, h * d_head, d_head)?;
            let scores = self.graph.matmul_nt(qh, kh)?;
            let mut scores = self.graph.scale(scores, scale);
            if let Some(b) = bias {
                scores = self.graph.add(scores, b)?;
            }
            let att = self.graph.softmax(scores, 1)?;
            if trace.is_some() {
                captured.push(self.graph.data(att).to_vec());
            }
            heads.push(self.graph.matmul(att, vh)?);
        }
        if let Some(sink) = trace {
            sink.extend(captured);
        }
        let ctx = self.graph.concat_cols(&heads)?;
        self.graph.matmul(ctx, wo)
    }

    fn ln(&mut self, name: &str, x: TensorRef) -> Result<TensorRef> {
        let gain = self.p(&format!("{name}.gain"));
        let bias = self.p(&format!("{name}.bias"));
        self.graph.layer_norm(x, gain, bias)
    }

    fn ffn(&mut self, name: &str, x: TensorRef) -> Result<TensorRef> {
        let w1 = self.p(&format!("{name}.w1"));
        let w2 = self.p(&format!("{name}.w2"));
        let h = self.graph.matmul(x, w1)?;
        let h = self.graph.relu(h);
        self.graph.matmul(h, w2)
    }

    fn encoder_layer(&mut self, i: usize, x: TensorRef, mask: &[bool]) -> Result<TensorRef> {
        let n = mask.len();
        let h = self.ln(&format!("enc{i}.ln1"), x)?;
        let bias = self.attention_bias(n, Some(mask), false);
        let att = self.mha(&format!("enc{i}.attn"), h, h, bias, None)?;
        let att = self.maybe_dropout(att);
        let x = self.graph.add(x, att)?;
        let h = self.ln(&format!("enc{i}.ln2"), x)?;
        let ff = self.ffn(&format!("enc{i}.ffn"), h)?;
        let ff = self.maybe_dropout(ff);
        self.graph.add(x, ff)
    }

    /// Apply encoder layers `[from_layer, to_layer)`. `from_layer` must
    /// match the input's depth; `from == to` is the identity.
    pub fn run_encoder_range(
        &mut self,
        h: &HiddenStates,
        from_layer: usize,
        to_layer: usize,
    ) -> Result<HiddenStates> {
        let total = self.model.config.total_encoder_layers();
        if from_layer != h.layer_index {
            return Err(Error::contract(format!(
                "encoder range starts at {from_layer} but states are at layer {}",
                h.layer_index
            )));
        }
        if from_layer > to_layer || to_layer > total {
            return Err(Error::contract(format!(
                "invalid encoder range {from_layer}..{to_layer} of {total}"
            )));
        }
        let mut x = h.states;
        for i in from_layer..to_layer {
            x = self.encoder_layer(i, x, &h.mask)?;
        }
        Ok(HiddenStates {
            layer_index: to_layer,
            states: x,
            mask: h.mask.clone(),
        })
    }

    /// Row 0 of the hidden-state matrix, shape (1, d_model).
    pub fn first_token(&mut self, h: &HiddenStates) -> Result<TensorRef> {
        if self.graph.shape(h.states)[0] == 0 {
            return Err(Error::contract("first_token of an empty sequence"));
        }
        self.graph.slice_rows(h.states, 0, 1)
    }

    // ── decoder ──────────────────────────────────────────────────────

    /// Teacher-forced decoder pass over a fused encoder output.
    /// `target_ids` must begin with the start token. Returns the logits,
    /// shape (|targets|, vocab), and the detached cross-attention trace.
    pub fn run_decoder(
        &mut self,
        fused: TensorRef,
        target_ids: &[u32],
    ) -> Result<(TensorRef, DecoderAttentionTrace)> {
        let cfg = &self.model.config;
        let n_enc = self.graph.shape(fused)[0];
        if n_enc == 0 {
            return Err(Error::contract("decoder needs a nonempty fused input"));
        }
        if target_ids.first() != Some(&vocab::BOS) {
            return Err(Error::contract("decoder targets must begin with <bos>"));
        }
        let t_len = target_ids.len();
        let tok_table = self.p("embed.token");
        let pos_table = self.p("embed.pos");
        let pos_ids: Vec<u32> = (0..t_len as u32).collect();
        let tok = self.graph.embedding(tok_table, target_ids)?;
        let pos = self.graph.embedding(pos_table, &pos_ids)?;
        let mut x = self.graph.add(tok, pos)?;

        let causal = self.attention_bias(t_len, None, true);
        let mut all_heads: Vec<Vec<f32>> = Vec::new();
        for i in 0..cfg.decoder_layers {
            let h = self.ln(&format!("dec{i}.ln1"), x)?;
            let sa = self.mha(&format!("dec{i}.self"), h, h, causal, None)?;
            let sa = self.maybe_dropout(sa);
            x = self.graph.add(x, sa)?;
            let h = self.ln(&format!("dec{i}.ln2"), x)?;
            let ca = self.mha(
                &format!("dec{i}.cross"),
                h,
                fused,
                None,
                Some(&mut all_heads),
            )?;
            let ca = self.maybe_dropout(ca);
            x = self.graph.add(x, ca)?;
            let h = self.ln(&format!("dec{i}.ln3"), x)?;
            let ff = self.ffn(&format!("dec{i}.ffn"), h)?;
            let ff = self.maybe_dropout(ff);
            x = self.graph.add(x, ff)?;
        }
        // output projection tied to the token embedding, scaled by
        // 1/sqrt(d) so random-init logits stay near-uniform: copying an
        // attended token reduces to matching its embedding
        let h = self.ln("dec.final_ln", x)?;
        let logits = self.graph.matmul_nt(h, tok_table)?;
        let logits = self
            .graph
            .scale(logits, 1.0 / (cfg.d_model as f32).sqrt());
        let trace = DecoderAttentionTrace {
            n_layers: cfg.decoder_layers,
            n_heads: cfg.n_heads,
            n_outputs: t_len,
            n_enc,
            att: all_heads,
        };
        Ok((logits, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::model::Model;

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            vocab_size: 23,
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
            ..ModelConfig::default()
        };
        Model::init(cfg, 42).unwrap()
    }

    #[test]
    fn embed_gives_position_signal() {
        let model = tiny_model();
        let mut s = Session::inference(&model);
        let h = s.embed(&[7, 7, 7], Prefix::Query).unwrap();
        let d = model.config.d_model;
        let rows = s.graph.data(h.states);
        assert_ne!(rows[0..d], rows[d..2 * d]);
    }

    #[test]
    fn embed_truncates_at_limits() {
        let model = tiny_model();
        let mut s = Session::inference(&model);
        let long: Vec<u32> = (0..40).map(|i| (i % 9) as u32).collect();
        let hq = s.embed(&long, Prefix::Query).unwrap();
        assert_eq!(hq.mask.len(), model.config.max_query_len);
        let hp = s.embed(&long, Prefix::Passage).unwrap();
        assert_eq!(hp.mask.len(), model.config.max_seq_len);
    }

    #[test]
    fn embed_is_deterministic() {
        let model = tiny_model();
        let mut s1 = Session::inference(&model);
        let h1 = s1.embed(&[1, 2, 3], Prefix::Passage).unwrap();
        let mut s2 = Session::inference(&model);
        let h2 = s2.embed(&[1, 2, 3], Prefix::Passage).unwrap();
        let (a, b) = (s1.graph.data(h1.states), s2.graph.data(h2.states));
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn encoder_range_identity_and_composition() {
        let model = tiny_model();

        // from == to is the identity
        let mut s = Session::inference(&model);
        let h = s.embed(&[4, 9, 2], Prefix::Passage).unwrap();
        let same = s.run_encoder_range(&h, 0, 0).unwrap();
        assert_eq!(s.graph.data(h.states), s.graph.data(same.states));

        // 0->1 then 1->3 equals 0->3 bitwise with dropout off
        let mut s1 = Session::inference(&model);
        let h1 = s1.embed(&[4, 9, 2], Prefix::Passage).unwrap();
        let a = s1.run_encoder_range(&h1, 0, 1).unwrap();
        let a = s1.run_encoder_range(&a, 1, 3).unwrap();
        let mut s2 = Session::inference(&model);
        let h2 = s2.embed(&[4, 9, 2], Prefix::Passage).unwrap();
        let b = s2.run_encoder_range(&h2, 0, 3).unwrap();
        let (va, vb) = (s1.graph.data(a.states), s2.graph.data(b.states));
        assert!(va.iter().zip(vb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn encoder_range_contract_violations() {
        let model = tiny_model();
        let mut s = Session::inference(&model);
        let h = s.embed(&[4, 9, 2], Prefix::Passage).unwrap();
        assert!(s.run_encoder_range(&h, 1, 2).is_err()); // wrong start
        assert!(s.run_encoder_range(&h, 0, 99).is_err()); // beyond stack
    }

    #[test]
    fn padding_invariance_of_unmasked_positions() {
        let model = tiny_model();
        let mut s1 = Session::inference(&model);
        let h1 = s1.embed(&[4, 9, 2], Prefix::Passage).unwrap();
        let out1 = s1.run_encoder_range(&h1, 0, 2).unwrap();

        let mut s2 = Session::inference(&model);
        let mut h2 = s2.embed(&[4, 9, 2, 0, 0], Prefix::Passage).unwrap();
        h2.mask = vec![true, true, true, false, false];
        let out2 = s2.run_encoder_range(&h2, 0, 2).unwrap();

        let d = model.config.d_model;
        let a = s1.graph.data(out1.states);
        let b = s2.graph.data(out2.states);
        for i in 0..3 * d {
            assert!((a[i] - b[i]).abs() < 1e-5, "row {} differs", i / d);
        }
    }

    #[test]
    fn first_token_changes_with_depth() {
        let model = tiny_model();
        let mut s = Session::inference(&model);
        let h = s.embed(&[4, 9, 2], Prefix::Passage).unwrap();
        let h1 = s.run_encoder_range(&h, 0, 1).unwrap();
        let h2 = s.run_encoder_range(&h1, 1, 2).unwrap();
        let f1 = s.first_token(&h1).unwrap();
        let f2 = s.first_token(&h2).unwrap();
        assert_ne!(s.graph.data(f1), s.graph.data(f2));
    }

    #[test]
    fn decoder_trace_shape_and_row_sums() {
        let model = tiny_model();
        let mut s = Session::inference(&model);
        let h = s.embed(&[4, 9, 2, 11], Prefix::Passage).unwrap();
        let enc = s.run_encoder_range(&h, 0, 3).unwrap();
        let targets = [crate::vocab::BOS, 5, 6];
        let (logits, trace) = s.run_decoder(enc.states, &targets).unwrap();
        assert_eq!(s.graph.shape(logits), [3, model.config.vocab_size]);
        assert_eq!(trace.n_layers, 1);
        assert_eq!(trace.n_heads, 2);
        assert_eq!(trace.n_outputs, 3);
        assert_eq!(trace.n_enc, 4);
        for l in 0..trace.n_layers {
            for hd in 0..trace.n_heads {
                for t in 0..trace.n_outputs {
                    let sum: f32 = trace.row(l, hd, t).iter().sum();
                    assert!((sum - 1.0).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn decoder_requires_bos_and_nonempty_input() {
        let model = tiny_model();
        let mut s = Session::inference(&model);
        let h = s.embed(&[4], Prefix::Passage).unwrap();
        let enc = s.run_encoder_range(&h, 0, 3).unwrap();
        assert!(s.run_decoder(enc.states, &[5, 6]).is_err());
    }

    #[test]
    fn logits_respond_to_any_passage_perturbation() {
        // cross-attention connectivity: perturbing the encoder output
        // changes the logits
        let model = tiny_model();
        let mut s = Session::inference(&model);
        let h = s.embed(&[4, 9, 2, 11], Prefix::Passage).unwrap();
        let enc = s.run_encoder_range(&h, 0, 3).unwrap();
        let targets = [crate::vocab::BOS, 5];
        let (logits, _) = s.run_decoder(enc.states, &targets).unwrap();
        let base = s.graph.data(logits).to_vec();

        let bump = s.graph.constant(vec![0.25; 4 * 16], vec![4, 16]);
        let enc2 = s.graph.add(enc.states, bump).unwrap();
        let (logits2, _) = s.run_decoder(enc2, &targets).unwrap();
        assert_ne!(base, s.graph.data(logits2));
    }

    #[test]
    fn trace_is_detached_from_decoder_parameters() {
        // a loss built only from trace values cannot reach any parameter
        let model = tiny_model();
        let mut s = Session::new(&model, false, 0);
        let h = s.embed(&[4, 9, 2], Prefix::Passage).unwrap();
        let enc = s.run_encoder_range(&h, 0, 3).unwrap();
        let (_, trace) = s.run_decoder(enc.states, &[crate::vocab::BOS, 5]).unwrap();
        let w = trace.weights(0, 0).to_vec();
        let c = s.graph.constant(w, vec![2 * 3, 1]);
        let loss = s.graph.sum_all(c);
        let grads = s.graph.backward(loss).unwrap();
        let collected = s.collect_param_grads(&grads);
        assert!(collected.iter().all(|g| g.is_none()));
    }
}
