//! The iterative training procedure: a first iteration supervised by gold
//! passages with in-batch negatives, then iterations over passages fetched
//! from the (per-iteration frozen) index with the gold injected during
//! pretraining, an index refresh at every iteration boundary, and
//! fine-tuning with a one-shot re-initialization to undo reader
//! overfitting while keeping the improved index.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::losses::{compute_losses, LossInputs, LossValues, Losses};
use super::optim::Adam;
use crate::config::{ModelConfig, TrainConfig};
use crate::corpus::{Corpus, Split, TrainingTriple};
use crate::error::{Error, Result};
use crate::eval::{self, EvalMode, EvalOptions};
use crate::model::{Model, Session};
use crate::reader::{self, OutputAggregation};
use crate::rerank;
use crate::retrieval::{self, PassageIndex};
use crate::vocab::{self, Vocab};

/// Generation budget for the short entity answers of the synthetic task.
pub const MAX_ANSWER_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    /// L_retrieval + L_reranking + L_reading.
    Full,
    /// L_retrieval only (ablation baseline; first iteration only).
    RetrievalOnly,
}

impl LossVariant {
    pub fn label(&self) -> &'static str {
        match self {
            LossVariant::Full => "retrieval+reading",
            LossVariant::RetrievalOnly => "retrieval_only",
        }
    }
}

/// One training example, fully tokenized: the retrieved candidate set (gold
/// possibly injected, retrieval-rank order) plus in-batch negatives.
pub struct ExampleInput {
    pub query_tokens: Vec<u32>,
    pub answer_ids: Vec<u32>,
    pub candidates: Vec<(u64, Vec<u32>)>,
    pub negatives: Vec<(u64, Vec<u32>)>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Full per-example forward: both attention-score distributions, the
/// decoder trace and the reading loss, combined per the training objective.
pub fn forward_example(
    sess: &mut Session,
    ex: &ExampleInput,
    gamma: f32,
) -> Result<(Losses, LossValues)> {
    forward_example_inner(sess, ex, gamma, None)
}

/// Same forward but with the distillation targets pinned to externally
/// supplied decoder scores instead of this pass's trace. Finite-difference
/// checks need this: the stop-gradient boundary makes the targets constants
/// of the differentiated function, so a perturbed forward must reuse the
/// base model's targets.
pub fn forward_example_frozen_targets(
    sess: &mut Session,
    ex: &ExampleInput,
    gamma: f32,
    decoder_scores: &[f32],
) -> Result<(Losses, LossValues)> {
    forward_example_inner(sess, ex, gamma, Some(decoder_scores))
}

fn forward_example_inner(
    sess: &mut Session,
    ex: &ExampleInput,
    gamma: f32,
    frozen_scores: Option<&[f32]>,
) -> Result<(Losses, LossValues)> {
    if ex.candidates.is_empty() {
        return Err(Error::contract("example has an empty candidate set"));
    }
    let d_k = sess.model.config.d_head();
    let scale = 1.0 / (d_k as f32).sqrt();

    let (q_vec, q_k) = retrieval::query_vector_graph(sess, &ex.query_tokens)?;

    let mut key_rows = Vec::with_capacity(ex.candidates.len());
    let mut cand_states = Vec::with_capacity(ex.candidates.len());
    for (_, tokens) in &ex.candidates {
        let (kv, hk) = retrieval::passage_vector_graph(sess, tokens)?;
        key_rows.push(kv);
        cand_states.push(hk);
    }
    let keys = sess.graph.concat_rows(&key_rows)?;
    let ret_logits = sess.graph.matmul_nt(q_vec, keys)?;
    let ret_logits = sess.graph.scale(ret_logits, scale);

    let neg_logits = if ex.negatives.is_empty() {
        None
    } else {
        let mut rows = Vec::with_capacity(ex.negatives.len());
        for (_, tokens) in &ex.negatives {
            let (kv, _) = retrieval::passage_vector_graph(sess, tokens)?;
            rows.push(kv);
        }
        let nk = sess.graph.concat_rows(&rows)?;
        let nl = sess.graph.matmul_nt(q_vec, nk)?;
        Some(sess.graph.scale(nl, scale))
    };

    let joint = rerank::joint_encode(sess, &q_k, &cand_states)?;
    let rr_logits = rerank::joint_logits(sess, &joint)?;

    let ids: Vec<u64> = ex.candidates.iter().map(|c| c.0).collect();
    let fused = reader::encode_reading(sess, &joint, &ids, q_k.mask.len())?;
    let (reading_loss, trace) = reader::reading_loss(sess, &fused, &ex.answer_ids)?;
    let decoder_scores = match frozen_scores {
        Some(s) => s.to_vec(),
        None => reader::score_decoder(&trace, &fused.spans, OutputAggregation::FirstPosition)?,
    };

    let losses = compute_losses(
        &mut sess.graph,
        &LossInputs {
            retrieved_logits: ret_logits,
            negative_logits: neg_logits,
            rerank_logits: rr_logits,
            decoder_scores,
            reading_loss,
        },
        gamma,
    )?;
    let values = losses.values(&sess.graph);
    Ok((losses, values))
}

/// This pass's decoder-attention scores over the candidate set (detached).
pub fn example_decoder_scores(
    sess: &mut Session,
    ex: &ExampleInput,
    _gamma: f32,
) -> Result<Vec<f32>> {
    let k = sess.model.config.retrieval_layers;
    let h0 = sess.embed(&ex.query_tokens, crate::model::Prefix::Query)?;
    let q_k = sess.run_encoder_range(&h0, 0, k)?;
    let mut cand_states = Vec::with_capacity(ex.candidates.len());
    for (_, tokens) in &ex.candidates {
        let h = sess.embed(tokens, crate::model::Prefix::Passage)?;
        cand_states.push(sess.run_encoder_range(&h, 0, k)?);
    }
    let joint = rerank::joint_encode(sess, &q_k, &cand_states)?;
    let ids: Vec<u64> = ex.candidates.iter().map(|c| c.0).collect();
    let fused = reader::encode_reading(sess, &joint, &ids, q_k.mask.len())?;
    let (_, trace) = reader::reading_loss(sess, &fused, &ex.answer_ids)?;
    reader::score_decoder(&trace, &fused.spans, OutputAggregation::FirstPosition)
}

/// Retrieval-only forward for the ablation baseline: the candidate set must
/// be the single gold passage; the target is one-hot on it.
pub fn forward_example_retrieval_only(
    sess: &mut Session,
    ex: &ExampleInput,
    gamma: f32,
) -> Result<(crate::tensor::TensorRef, LossValues)> {
    if ex.candidates.len() != 1 {
        return Err(Error::contract(
            "retrieval-only training runs on single-gold candidate sets",
        ));
    }
    let d_k = sess.model.config.d_head();
    let scale = 1.0 / (d_k as f32).sqrt();
    let (q_vec, _) = retrieval::query_vector_graph(sess, &ex.query_tokens)?;
    let (kv, _) = retrieval::passage_vector_graph(sess, &ex.candidates[0].1)?;
    let gold_logit = sess.graph.matmul_nt(q_vec, kv)?;
    let gold_logit = sess.graph.scale(gold_logit, scale);
    let logits = if ex.negatives.is_empty() {
        gold_logit
    } else {
        let mut rows = Vec::with_capacity(ex.negatives.len());
        for (_, tokens) in &ex.negatives {
            let (nv, _) = retrieval::passage_vector_graph(sess, tokens)?;
            rows.push(nv);
        }
        let nk = sess.graph.concat_rows(&rows)?;
        let nl = sess.graph.matmul_nt(q_vec, nk)?;
        let nl = sess.graph.scale(nl, scale);
        let nl = sess.graph.add_scalar(nl, gamma);
        sess.graph.concat_cols(&[gold_logit, nl])?
    };
    let s = sess.graph.softmax(logits, 1)?;
    let mut target = vec![0.0f32; 1 + ex.negatives.len()];
    target[0] = 1.0;
    let n = target.len();
    let t = sess.graph.constant(target, vec![n]);
    let loss = sess.graph.kl_divergence(t, s)?;
    let values = LossValues {
        retrieval: sess.graph.data(loss)[0] as f64,
        rerank: 0.0,
        reading: 0.0,
    };
    Ok((loss, values))
}

// ── batching ─────────────────────────────────────────────────────────

struct Scheduler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Scheduler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Scheduler { order, pos: 0, rng }
    }

    fn next_batch(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Where an example's in-batch negatives come from.
#[derive(Clone, Copy, PartialEq, Eq)]
enum NegativeSource {
    /// Other examples' gold passages (pretraining).
    Gold,
    /// Other examples' rank-1 retrieved passage (fine-tuning, which has no
    /// gold labels).
    TopRetrieved,
}

/// Precomputed tokenizations.
pub struct TrainContext {
    passage_tokens: HashMap<u64, Vec<u32>>,
    queries: Vec<Vec<u32>>,
    answers: Vec<Vec<u32>>,
    golds: Vec<u64>,
}

impl TrainContext {
    pub fn new(corpus: &Corpus, vocab: &Vocab, triples: &[TrainingTriple]) -> Self {
        let passage_tokens = corpus
            .passages()
            .iter()
            .map(|p| (p.id, vocab.serialize_passage(&p.title, &p.text)))
            .collect();
        let queries = triples
            .iter()
            .map(|t| vocab.serialize_query(&t.query))
            .collect();
        let answers = triples
            .iter()
            .map(|t| {
                let mut ids = vocab.tokenize(&t.answer);
                ids.push(vocab::EOS);
                ids
            })
            .collect();
        let golds = triples.iter().map(|t| t.gold_passage_id).collect();
        TrainContext {
            passage_tokens,
            queries,
            answers,
            golds,
        }
    }

    fn tokens(&self, id: u64) -> Vec<u32> {
        self.passage_tokens
            .get(&id)
            .cloned()
            .unwrap_or_else(|| panic!("passage {id} missing from corpus"))
    }
}

fn assemble_first_iteration(ctx: &TrainContext, idxs: &[usize]) -> Vec<ExampleInput> {
    idxs.iter()
        .map(|&i| {
            let gold = ctx.golds[i];
            let negatives: Vec<(u64, Vec<u32>)> = idxs
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| ctx.golds[j])
                .filter(|&g| g != gold)
                .map(|g| (g, ctx.tokens(g)))
                .collect();
            ExampleInput {
                query_tokens: ctx.queries[i].clone(),
                answer_ids: ctx.answers[i].clone(),
                candidates: vec![(gold, ctx.tokens(gold))],
                negatives,
            }
        })
        .collect()
}

fn assemble_retrieval_batch(
    ctx: &TrainContext,
    model: &Model,
    index: &PassageIndex,
    idxs: &[usize],
    gold_injection: bool,
    negative_source: NegativeSource,
) -> Result<Vec<ExampleInput>> {
    let width = model.config.retrieval_width;
    // retrieval pass for every example first (negatives may need others'
    // top hits)
    let mut retrieved: Vec<Vec<u64>> = Vec::with_capacity(idxs.len());
    for &i in idxs {
        let mut sess = Session::inference(model);
        let (qv, _) = retrieval::query_vector_graph(&mut sess, &ctx.queries[i])?;
        let q = sess.graph.data(qv).to_vec();
        let top = index.top_n(&q, width)?;
        let mut ids = top.scored.passage_ids;
        if gold_injection {
            let gold = ctx.golds[i];
            if !ids.contains(&gold) {
                // replace the lowest-scoring retrieved passage; the set
                // width stays fixed
                *ids.last_mut().expect("top_n returns at least one row") = gold;
            }
        }
        retrieved.push(ids);
    }
    Ok(idxs
        .iter()
        .enumerate()
        .map(|(bi, &i)| {
            let own = &retrieved[bi];
            let negatives: Vec<(u64, Vec<u32>)> = idxs
                .iter()
                .enumerate()
                .filter(|&(bj, _)| bj != bi)
                .map(|(bj, &j)| match negative_source {
                    NegativeSource::Gold => ctx.golds[j],
                    NegativeSource::TopRetrieved => retrieved[bj][0],
                })
                .filter(|id| !own.contains(id))
                .map(|id| (id, ctx.tokens(id)))
                .collect();
            ExampleInput {
                query_tokens: ctx.queries[i].clone(),
                answer_ids: ctx.answers[i].clone(),
                candidates: own.iter().map(|&id| (id, ctx.tokens(id))).collect(),
                negatives,
            }
        })
        .collect())
}

// ── stepping ─────────────────────────────────────────────────────────

/// One optimizer step over a batch: per-example forward/backward in
/// parallel, gradients folded in example order (deterministic regardless
/// of thread count), clipped, then Adam.
fn train_step(
    model: &Model,
    gamma: f32,
    items: &[ExampleInput],
    step_seed: u64,
    variant: LossVariant,
) -> Result<(Vec<Option<Vec<f32>>>, Vec<LossValues>)> {
    let per_example: Result<Vec<(Vec<Option<Vec<f32>>>, LossValues)>> = items
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let seed = splitmix64(step_seed ^ (i as u64).wrapping_mul(0x9e37_79b9));
            let mut sess = Session::new(model, true, seed);
            let (loss_ref, values) = match variant {
                LossVariant::Full => {
                    let (losses, values) = forward_example(&mut sess, ex, gamma)?;
                    (losses.total, values)
                }
                LossVariant::RetrievalOnly => {
                    forward_example_retrieval_only(&mut sess, ex, gamma)?
                }
            };
            let grads = sess.graph.backward(loss_ref)?;
            Ok((sess.collect_param_grads(&grads), values))
        })
        .collect();
    let per_example = per_example?;

    let inv_b = 1.0 / items.len() as f32;
    let mut acc: Vec<Option<Vec<f32>>> = vec![None; model.params.len()];
    let mut values = Vec::with_capacity(per_example.len());
    for (grads, v) in per_example {
        values.push(v);
        for (slot, g) in acc.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            match slot {
                Some(a) => {
                    for (x, y) in a.iter_mut().zip(&g) {
                        *x += y * inv_b;
                    }
                }
                None => {
                    let mut g = g;
                    g.iter_mut().for_each(|x| *x *= inv_b);
                    *slot = Some(g);
                }
            }
        }
    }
    Ok((acc, values))
}

// ── the driver ───────────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub recall1: f64,
    pub recall5: f64,
    pub recall20: f64,
    pub em: f64,
    pub loss_retrieval: f64,
    pub loss_rerank: f64,
    pub loss_reading: f64,
}

pub const METRICS_HEADER: &str =
    "iteration,recall@1,recall@5,recall@20,em,loss_retrieval,loss_rerank,loss_reading";

pub fn write_metrics_csv(path: &Path, rows: &[IterationMetrics]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.iteration,
            r.recall1,
            r.recall5,
            r.recall20,
            r.em,
            r.loss_retrieval,
            r.loss_rerank,
            r.loss_reading
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub struct TrainDriver<'a> {
    pub model: Model,
    pub vocab: &'a Vocab,
    pub corpus: &'a Corpus,
    pub cfg: TrainConfig,
    adam: Adam,
}

impl<'a> TrainDriver<'a> {
    pub fn new(model: Model, vocab: &'a Vocab, corpus: &'a Corpus, cfg: TrainConfig) -> Self {
        let adam = Adam::new(&model.params, cfg.learning_rate);
        TrainDriver {
            model,
            vocab,
            corpus,
            cfg,
            adam,
        }
    }

    /// Reset parameters to a pretrained snapshot; optimizer moments reset
    /// with them.
    pub fn reinit_from(&mut self, pretrained: &Model) -> Result<()> {
        self.model.params.copy_from(&pretrained.params)?;
        self.adam.reset();
        Ok(())
    }

    /// First-iteration training: candidate set is the gold passage, other
    /// examples' golds serve as in-batch negatives, and the reranking loss
    /// contributes exactly zero.
    pub fn first_iteration(
        &mut self,
        triples: &[TrainingTriple],
        variant: LossVariant,
        iteration_seed: u64,
    ) -> Result<LossValues> {
        if triples.is_empty() {
            return Err(Error::contract("no training triples"));
        }
        let ctx = TrainContext::new(self.corpus, self.vocab, triples);
        let mut sched = Scheduler::new(triples.len(), iteration_seed);
        if self.cfg.batch_size == 1 {
            eprintln!("warning: batch size 1 leaves the in-batch negative set empty");
        }
        let steps = self.cfg.first_iteration_steps.unwrap_or(self.cfg.steps_per_iteration);
        let mut sum = LossValues::default();
        let mut count = 0usize;
        for step in 0..steps {
            let idxs = sched.next_batch(self.cfg.batch_size);
            let items = assemble_first_iteration(&ctx, &idxs);
            let step_seed = splitmix64(iteration_seed ^ splitmix64(step as u64));
            let (mut grads, values) =
                train_step(&self.model, self.cfg.gamma, &items, step_seed, variant)?;
            for v in &values {
                if variant == LossVariant::Full && v.rerank != 0.0 {
                    return Err(Error::contract(format!(
                        "reranking loss must be exactly 0 in the first iteration, got {}",
                        v.rerank
                    )));
                }
                sum.retrieval += v.retrieval;
                sum.rerank += v.rerank;
                sum.reading += v.reading;
                count += 1;
            }
            self.adam.step(&mut self.model.params, &mut grads);
        }
        Ok(LossValues {
            retrieval: sum.retrieval / count as f64,
            rerank: sum.rerank / count as f64,
            reading: sum.reading / count as f64,
        })
    }

    /// One iteration over retrieved candidate sets against a frozen index
    /// snapshot. During pretraining the gold passage is injected when
    /// absent; fine-tuning never sees gold labels, so negatives come from
    /// other examples' top hits.
    pub fn retrieval_iteration(
        &mut self,
        triples: &[TrainingTriple],
        index: &PassageIndex,
        gold_injection: bool,
        iteration_seed: u64,
    ) -> Result<LossValues> {
        if triples.is_empty() {
            return Err(Error::contract("no training triples"));
        }
        if index.version == 0 {
            return Err(Error::contract("index version must be > 0"));
        }
        let ctx = TrainContext::new(self.corpus, self.vocab, triples);
        let mut sched = Scheduler::new(triples.len(), iteration_seed);
        let negative_source = if gold_injection {
            NegativeSource::Gold
        } else {
            NegativeSource::TopRetrieved
        };
        let mut sum = LossValues::default();
        let mut count = 0usize;
        for step in 0..self.cfg.steps_per_iteration {
            let idxs = sched.next_batch(self.cfg.batch_size);
            let items = assemble_retrieval_batch(
                &ctx,
                &self.model,
                index,
                &idxs,
                gold_injection,
                negative_source,
            )?;
            let step_seed = splitmix64(iteration_seed ^ splitmix64(step as u64));
            let (mut grads, values) =
                train_step(&self.model, self.cfg.gamma, &items, step_seed, LossVariant::Full)?;
            for v in &values {
                sum.retrieval += v.retrieval;
                sum.rerank += v.rerank;
                sum.reading += v.reading;
                count += 1;
            }
            self.adam.step(&mut self.model.params, &mut grads);
        }
        Ok(LossValues {
            retrieval: sum.retrieval / count as f64,
            rerank: sum.rerank / count as f64,
            reading: sum.reading / count as f64,
        })
    }

    fn eval_metrics(
        &self,
        iteration: usize,
        dev: &[TrainingTriple],
        index: &PassageIndex,
        losses: &LossValues,
        with_generation: bool,
    ) -> Result<IterationMetrics> {
        let opts = EvalOptions {
            mode: EvalMode::Retrieval,
            n_retrieve: self.model.config.retrieval_width.max(20),
            m_rerank: self.model.config.rerank_width,
            max_answer_len: MAX_ANSWER_LEN,
            with_generation,
        };
        let summary = eval::evaluate(&self.model, self.vocab, self.corpus, index, dev, &opts)?;
        Ok(IterationMetrics {
            iteration,
            recall1: summary.recall[&1],
            recall5: summary.recall[&5],
            recall20: summary.recall[&20],
            em: summary.em,
            loss_retrieval: losses.retrieval,
            loss_rerank: losses.rerank,
            loss_reading: losses.reading,
        })
    }
}

// ── top-level runs ───────────────────────────────────────────────────

pub struct TrainRun {
    pub model: Model,
    pub index: PassageIndex,
    pub metrics: Vec<IterationMetrics>,
    pub reinit_at: Option<usize>,
}

/// Deterministic train/dev partition for triples without split labels.
pub fn holdout_split(
    triples: &[TrainingTriple],
    seed: u64,
    max_dev: usize,
) -> (Vec<TrainingTriple>, Vec<TrainingTriple>) {
    let mut idxs: Vec<usize> = (0..triples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x5eed));
    idxs.shuffle(&mut rng);
    let n_dev = (triples.len() / 10).clamp(1.min(triples.len()), max_dev);
    let dev: Vec<TrainingTriple> = idxs[..n_dev].iter().map(|&i| triples[i].clone()).collect();
    let train: Vec<TrainingTriple> = idxs[n_dev..].iter().map(|&i| triples[i].clone()).collect();
    (train, dev)
}

fn save_iteration_artifacts(
    out_dir: Option<&Path>,
    model: &Model,
    train_cfg: &TrainConfig,
    index: &PassageIndex,
    metrics: &[IterationMetrics],
) -> Result<()> {
    let Some(dir) = out_dir else { return Ok(()) };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    crate::model::save_checkpoint(&dir.join("ckpt_final.bin"), model, train_cfg)?;
    retrieval::save_index(&dir.join("index_final.idx"), index)?;
    write_metrics_csv(&dir.join("metrics.csv"), metrics)?;
    Ok(())
}

/// Iterative pretraining over masked-span triples: first iteration with
/// gold supervision and in-batch negatives, then retrieval-driven
/// iterations with gold injection, index refresh at every boundary.
pub fn pretrain(
    corpus: &Corpus,
    triples: &[TrainingTriple],
    mut model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(TrainRun, Vocab)> {
    train_cfg.validate()?;
    let vocab = Vocab::from_corpus(corpus);
    model_cfg.vocab_size = vocab.len();
    model_cfg.validate()?;
    let model = Model::init(model_cfg, train_cfg.seed)?;
    let (train, dev) = holdout_split(triples, train_cfg.seed, 100);

    let mut driver = TrainDriver::new(model, &vocab, corpus, train_cfg.clone());
    let mut metrics = Vec::new();

    let losses = driver.first_iteration(&train, LossVariant::Full, splitmix64(train_cfg.seed))?;
    let mut index = retrieval::build_index(&driver.model, &vocab, corpus)?;
    metrics.push(driver.eval_metrics(1, &dev, &index, &losses, true)?);
    save_iteration_artifacts(out_dir, &driver.model, &train_cfg, &index, &metrics)?;

    for it in 2..=train_cfg.n_iterations {
        let iteration_seed = splitmix64(train_cfg.seed ^ (it as u64) << 32);
        let losses = driver.retrieval_iteration(&train, &index, true, iteration_seed)?;
        index = retrieval::refresh_index(&driver.model, &vocab, corpus, &index)?;
        metrics.push(driver.eval_metrics(it, &dev, &index, &losses, true)?);
        save_iteration_artifacts(out_dir, &driver.model, &train_cfg, &index, &metrics)?;
    }
    Ok((
        TrainRun {
            model: driver.model,
            index,
            metrics,
            reinit_at: None,
        },
        vocab,
    ))
}

/// Fine-tuning over weakly-supervised QA triples: no gold injection,
/// negatives from other examples' top retrievals, and a one-shot
/// re-initialization to the pretrained parameters (keeping the improved
/// index) when dev exact match drops, or at a fixed iteration when
/// configured.
pub fn finetune(
    corpus: &Corpus,
    pretrained: &Model,
    vocab: &Vocab,
    triples: &[TrainingTriple],
    train_cfg: TrainConfig,
    start_index: PassageIndex,
    out_dir: Option<&Path>,
) -> Result<TrainRun> {
    train_cfg.validate()?;
    if start_index.version == 0 {
        return Err(Error::contract("fine-tuning needs a built index"));
    }
    let labeled: Vec<TrainingTriple> = triples
        .iter()
        .filter(|t| t.split == Some(Split::Train))
        .cloned()
        .collect();
    let dev_labeled: Vec<TrainingTriple> = triples
        .iter()
        .filter(|t| t.split == Some(Split::Dev))
        .cloned()
        .collect();
    let (train, dev) = if labeled.is_empty() {
        holdout_split(triples, train_cfg.seed, 100)
    } else {
        (labeled, dev_labeled)
    };
    if dev.is_empty() {
        return Err(Error::contract("fine-tuning needs a dev split"));
    }

    let model = Model {
        config: pretrained.config.clone(),
        params: pretrained.params.clone(),
    };
    let mut driver = TrainDriver::new(model, vocab, corpus, train_cfg.clone());
    let mut metrics: Vec<IterationMetrics> = Vec::new();
    let mut index = start_index;
    let mut reinit_at = None;
    let mut prev_em: Option<f64> = None;

    for it in 1..=train_cfg.n_iterations {
        let iteration_seed = splitmix64(train_cfg.seed ^ 0xf1e7 ^ (it as u64) << 32);
        let losses = driver.retrieval_iteration(&train, &index, false, iteration_seed)?;
        index = retrieval::refresh_index(&driver.model, vocab, corpus, &index)?;
        let row = driver.eval_metrics(it, &dev, &index, &losses, true)?;
        let em = row.em;
        metrics.push(row);
        save_iteration_artifacts(out_dir, &driver.model, &train_cfg, &index, &metrics)?;

        if reinit_at.is_none() {
            let trigger = match train_cfg.reinit_iteration {
                Some(k) => it == k,
                None => prev_em.map_or(false, |p| em < p),
            };
            if trigger {
                driver.reinit_from(pretrained)?;
                reinit_at = Some(it);
            }
        }
        prev_em = Some(em);
    }
    Ok(TrainRun {
        model: driver.model,
        index,
        metrics,
        reinit_at,
    })
}

// ── reader-loss ablation ─────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationRow {
    pub loss_variant: String,
    pub recall1: f64,
    pub recall5: f64,
    pub recall20: f64,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    /// Mean rows for both variants plus a delta row.
    pub rows: Vec<AblationRow>,
    /// (seed, variant label, recall@1, recall@5, recall@20)
    pub per_seed: Vec<(u64, &'static str, f64, f64, f64)>,
}

/// First-iteration comparison of the combined loss against retrieval-only,
/// identical seeds and batch sequences, recall on a held-out dev split.
pub fn ablate_reader_loss(
    corpus: &Corpus,
    triples: &[TrainingTriple],
    mut model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seeds: &[u64],
) -> Result<AblationReport> {
    let vocab = Vocab::from_corpus(corpus);
    model_cfg.vocab_size = vocab.len();
    model_cfg.validate()?;
    let mut per_seed = Vec::new();
    let mut means = HashMap::new();
    for &seed in seeds {
        let mut cfg = train_cfg.clone();
        cfg.seed = seed;
        let (train, dev) = holdout_split(triples, seed, 100);
        for variant in [LossVariant::Full, LossVariant::RetrievalOnly] {
            let model = Model::init(model_cfg.clone(), seed)?;
            let mut driver = TrainDriver::new(model, &vocab, corpus, cfg.clone());
            driver.first_iteration(&train, variant, splitmix64(seed))?;
            let index = retrieval::build_index(&driver.model, &vocab, corpus)?;
            let opts = EvalOptions {
                mode: EvalMode::Retrieval,
                n_retrieve: 20,
                m_rerank: model_cfg.rerank_width,
                max_answer_len: MAX_ANSWER_LEN,
                with_generation: false,
            };
            let s = eval::evaluate(&driver.model, &vocab, corpus, &index, &dev, &opts)?;
            per_seed.push((seed, variant.label(), s.recall[&1], s.recall[&5], s.recall[&20]));
            let e = means.entry(variant.label()).or_insert((0.0, 0.0, 0.0));
            e.0 += s.recall[&1];
            e.1 += s.recall[&5];
            e.2 += s.recall[&20];
        }
    }
    let n = seeds.len() as f64;
    let get = |label: &str| -> (f64, f64, f64) {
        let (a, b, c) = means[label];
        (a / n, b / n, c / n)
    };
    let full = get(LossVariant::Full.label());
    let only = get(LossVariant::RetrievalOnly.label());
    let rows = vec![
        AblationRow {
            loss_variant: LossVariant::Full.label().into(),
            recall1: full.0,
            recall5: full.1,
            recall20: full.2,
        },
        AblationRow {
            loss_variant: LossVariant::RetrievalOnly.label().into(),
            recall1: only.0,
            recall5: only.1,
            recall20: only.2,
        },
        AblationRow {
            loss_variant: "delta".into(),
            recall1: full.0 - only.0,
            recall5: full.1 - only.1,
            recall20: full.2 - only.2,
        },
    ];
    Ok(AblationReport { rows, per_seed })
}

pub fn write_ablation_csv(path: &Path, report: &AblationReport) -> Result<()> {
    let mut out = String::from("loss_variant,recall@1,recall@5,recall@20\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.loss_variant, r.recall1, r.recall5, r.recall20
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, GenConfig};
    use crate::model::Prefix;
    use crate::reader;
    use crate::rerank;

    fn fixture() -> (Corpus, Vec<TrainingTriple>, Vocab, ModelConfig) {
        let corpus = generate_corpus(&GenConfig {
            seed: 5,
            n_docs: 8,
            entities_per_doc: 6,
            lexicon_size: 60,
            words_per_passage: 30,
        });
        let triples = crate::corpus::extract_mssp_triples(&corpus);
        let vocab = Vocab::from_corpus(&corpus);
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            d_model: 32,
            n_heads: 2,
            dropout: 0.0,
            retrieval_width: 4,
            ..ModelConfig::default()
        };
        (corpus, triples, vocab, cfg)
    }

    #[test]
    fn first_iteration_builds_b_minus_one_negatives() {
        let (corpus, triples, vocab, _) = fixture();
        // construct a batch over triples with distinct golds
        let mut distinct = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for t in &triples {
            if seen.insert(t.gold_passage_id) {
                distinct.push(t.clone());
            }
            if distinct.len() == 4 {
                break;
            }
        }
        let ctx = TrainContext::new(&corpus, &vocab, &distinct);
        let items = assemble_first_iteration(&ctx, &[0, 1, 2, 3]);
        for (i, it) in items.iter().enumerate() {
            assert_eq!(it.candidates.len(), 1);
            assert_eq!(it.candidates[0].0, distinct[i].gold_passage_id);
            assert_eq!(it.negatives.len(), 3, "B-1 in-batch negatives");
            assert!(it
                .negatives
                .iter()
                .all(|(id, _)| *id != it.candidates[0].0));
        }
    }

    #[test]
    fn gold_injection_replaces_lowest_and_never_duplicates() {
        let (corpus, triples, vocab, cfg) = fixture();
        let model = Model::init(cfg, 1).unwrap();
        let index = retrieval::build_index(&model, &vocab, &corpus).unwrap();
        let ctx = TrainContext::new(&corpus, &vocab, &triples);
        let idxs: Vec<usize> = (0..4).collect();
        let items = assemble_retrieval_batch(
            &ctx,
            &model,
            &index,
            &idxs,
            true,
            NegativeSource::Gold,
        )
        .unwrap();
        for (bi, it) in items.iter().enumerate() {
            let gold = triples[idxs[bi]].gold_passage_id;
            let n_gold = it.candidates.iter().filter(|(id, _)| *id == gold).count();
            assert_eq!(n_gold, 1, "gold present exactly once");
            assert_eq!(it.candidates.len(), model.config.retrieval_width);
        }
    }

    #[test]
    fn single_example_overfit_decreases_reading_loss() {
        // training probe: windows of the loss trajectory strictly decrease,
        // and greedy decoding emits the training answer exactly
        let (corpus, triples, vocab, cfg) = fixture();
        let model = Model::init(cfg, 2).unwrap();
        let tc = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 1,
            steps_per_iteration: 10,
            first_iteration_steps: Some(10),
            ..TrainConfig::default()
        };
        let one = vec![triples[0].clone()];
        let mut driver = TrainDriver::new(model, &vocab, &corpus, tc);
        let mut window_means = Vec::new();
        for w in 0..5 {
            let l = driver
                .first_iteration(&one, LossVariant::Full, 100 + w)
                .unwrap();
            window_means.push(l.reading);
        }
        for pair in window_means.windows(2) {
            assert!(
                pair[1] < pair[0],
                "reading loss must fall across overfit windows: {window_means:?}"
            );
        }
        assert!(window_means[4] < 0.5 * window_means[0]);

        // the overfit model reproduces the answer
        let gold = corpus.get(triples[0].gold_passage_id).unwrap();
        let mut sess = Session::inference(&driver.model);
        let q = vocab.serialize_query(&triples[0].query);
        let (_, qk) = retrieval::query_vector_graph(&mut sess, &q).unwrap();
        let p_tokens = vocab.serialize_passage(&gold.title, &gold.text);
        let h = sess.embed(&p_tokens, Prefix::Passage).unwrap();
        let pk = sess
            .run_encoder_range(&h, 0, driver.model.config.retrieval_layers)
            .unwrap();
        let joint = rerank::joint_encode(&mut sess, &qk, &[pk]).unwrap();
        let fused = reader::encode_reading(&mut sess, &joint, &[gold.id], qk.mask.len()).unwrap();
        let text = reader::generate_text(&mut sess, &vocab, &fused, 4).unwrap();
        assert_eq!(
            crate::eval::normalize_answer(&text),
            crate::eval::normalize_answer(&triples[0].answer)
        );
    }

    #[test]
    fn reading_loss_at_random_init_is_near_chance() {
        // analytic expectation: T_A * ln(vocab) within 20%
        let (corpus, triples, vocab, cfg) = fixture();
        let vocab_size = cfg.vocab_size;
        let model = Model::init(cfg, 3).unwrap();
        let mut total = 0.0f64;
        let mut tokens = 0usize;
        for t in triples.iter().take(10) {
            let mut sess = Session::inference(&model);
            let gold = corpus.get(t.gold_passage_id).unwrap();
            let q = vocab.serialize_query(&t.query);
            let (_, qk) = retrieval::query_vector_graph(&mut sess, &q).unwrap();
            let p_tokens = vocab.serialize_passage(&gold.title, &gold.text);
            let h = sess.embed(&p_tokens, Prefix::Passage).unwrap();
            let pk = sess
                .run_encoder_range(&h, 0, model.config.retrieval_layers)
                .unwrap();
            let joint = rerank::joint_encode(&mut sess, &qk, &[pk]).unwrap();
            let fused =
                reader::encode_reading(&mut sess, &joint, &[gold.id], qk.mask.len()).unwrap();
            let mut ans = vocab.tokenize(&t.answer);
            ans.push(crate::vocab::EOS);
            let (loss, _) = reader::reading_loss(&mut sess, &fused, &ans).unwrap();
            total += sess.graph.data(loss)[0] as f64;
            tokens += ans.len();
        }
        let per_token = total / tokens as f64;
        let chance = (vocab_size as f64).ln();
        assert!(
            (per_token - chance).abs() < 0.2 * chance,
            "per-token NLL {per_token:.3} vs ln V {chance:.3}"
        );
    }

    #[test]
    fn first_iteration_is_deterministic_for_a_seed() {
        let (corpus, triples, vocab, cfg) = fixture();
        let tc = TrainConfig {
            steps_per_iteration: 3,
            first_iteration_steps: Some(3),
            batch_size: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let model = Model::init(cfg.clone(), 7).unwrap();
            let mut driver = TrainDriver::new(model, &vocab, &corpus, tc.clone());
            driver
                .first_iteration(&triples, LossVariant::Full, 11)
                .unwrap();
            driver.model
        };
        let a = run();
        let b = run();
        assert!(a.params.bitwise_eq(&b.params));
    }

    #[test]
    fn reinit_restores_parameters_bitwise_and_resets_moments() {
        let (corpus, triples, vocab, cfg) = fixture();
        let pretrained = Model::init(cfg.clone(), 9).unwrap();
        let snapshot = pretrained.params.clone();
        let tc = TrainConfig {
            steps_per_iteration: 2,
            first_iteration_steps: Some(2),
            batch_size: 2,
            ..TrainConfig::default()
        };
        let model = Model {
            config: cfg,
            params: pretrained.params.clone(),
        };
        let mut driver = TrainDriver::new(model, &vocab, &corpus, tc);
        driver
            .first_iteration(&triples, LossVariant::Full, 1)
            .unwrap();
        assert!(!driver.model.params.bitwise_eq(&snapshot));
        driver.reinit_from(&pretrained).unwrap();
        assert!(driver.model.params.bitwise_eq(&snapshot));
    }
}
