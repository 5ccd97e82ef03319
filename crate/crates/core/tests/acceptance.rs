//! Acceptance suite: every criterion runs sequentially at its stated
//! tolerance and prints one pass/fail line. Run with
//! `cargo test --test acceptance -- --nocapture` to watch the lines appear.

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use yono_core::config::{ModelConfig, TrainConfig};
use yono_core::corpus::{
    extract_mssp_triples, generate_corpus, make_qa_triples, Corpus, GenConfig, Split,
    TrainingTriple,
};
use yono_core::diagnostics;
use yono_core::eval::{self, EvalMode, EvalOptions};
use yono_core::model::Model;
use yono_core::retrieval::{self, PassageIndex};
use yono_core::tensor::gradcheck;
use yono_core::tensor::Graph;
use yono_core::trainer;
use yono_core::vocab::{Vocab, MASK_TOKEN};

// ── the shared synthetic task ────────────────────────────────────────

/// Reference fixture: ~1000 passages, ~2000 masked-span triples.
fn fixture_gen_config() -> GenConfig {
    GenConfig {
        seed: 7,
        n_docs: 150,
        entities_per_doc: 8,
        lexicon_size: 1200,
        words_per_passage: 30,
    }
}

/// Reference training configuration, confirmed by an oracle run before the
/// thresholds below were frozen.
fn reference_train_config() -> TrainConfig {
    TrainConfig {
        gamma: 5.0,
        learning_rate: 1e-3,
        batch_size: 8,
        steps_per_iteration: 300,
        first_iteration_steps: Some(7000),
        n_iterations: 4,
        reinit_iteration: None,
        seed: 0,
    }
}

fn reference_model_config() -> ModelConfig {
    ModelConfig::default() // desk-scale defaults; vocab filled from corpus
}

struct Fixture {
    corpus: Corpus,
    mssp: Vec<TrainingTriple>,
    qa: Vec<TrainingTriple>,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let corpus = generate_corpus(&fixture_gen_config());
        let mssp = extract_mssp_triples(&corpus);
        let qa = make_qa_triples(7, &corpus, 0);
        Fixture { corpus, mssp, qa }
    })
}

struct Trained {
    vocab: Vocab,
    pretrained: Model,
    pretrain_index: PassageIndex,
    finetuned: Model,
    finetune_index: PassageIndex,
}

fn trained() -> &'static Trained {
    static TRAINED: OnceLock<Trained> = OnceLock::new();
    TRAINED.get_or_init(|| {
        let f = fixture();
        let (pre, vocab) = trainer::pretrain(
            &f.corpus,
            &f.mssp,
            reference_model_config(),
            reference_train_config(),
            None,
        )
        .expect("pretraining");
        let ft_cfg = TrainConfig {
            first_iteration_steps: None,
            ..reference_train_config()
        };
        let run = trainer::finetune(
            &f.corpus,
            &pre.model,
            &vocab,
            &f.qa,
            ft_cfg,
            pre.index.clone(),
            None,
        )
        .expect("fine-tuning");
        Trained {
            vocab,
            pretrained: pre.model,
            pretrain_index: pre.index,
            finetuned: run.model,
            finetune_index: run.index,
        }
    })
}

struct Criterion {
    label: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
    budget: Option<Duration>,
}

fn check(
    label: &'static str,
    budget: Option<Duration>,
    f: impl FnOnce() -> (bool, String),
) -> Criterion {
    let t0 = Instant::now();
    let (passed, detail) = f();
    let elapsed = t0.elapsed();
    let within = budget.map_or(true, |b| elapsed <= b);
    Criterion {
        label,
        passed: passed && within,
        detail: if within {
            detail
        } else {
            format!("{detail}; over budget: {elapsed:?}")
        },
        elapsed,
        budget,
    }
}

// ── criterion bodies ─────────────────────────────────────────────────

fn criterion_1_gradient_integrity() -> (bool, String) {
    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    for seed in 0..20u64 {
        for r in gradcheck::standard_battery(seed) {
            if r.max_err > worst {
                worst = r.max_err;
                worst_name = format!("{} (seed {seed})", r.name);
            }
        }
    }
    let composed =
        diagnostics::composed_loss_gradcheck(0, 12, 5.0).expect("composed gradcheck runs");
    let ok = worst < gradcheck::GRADCHECK_TOL && composed.passed();
    (
        ok,
        format!(
            "per-op worst {worst:.2e} ({worst_name}); composed total {:.2e} over {} directions",
            composed.max_err, composed.elements
        ),
    )
}

fn criterion_2_stop_gradient_contract() -> (bool, String) {
    let report = diagnostics::gradient_partition_check(0, 5.0).expect("partition check runs");
    let ok = report.decoder_grad_from_scores == 0.0 && report.retrieval_grad_from_reading > 0.0;
    (
        ok,
        format!(
            "decoder grad under score losses = {}; retrieval-range grad under reading loss = {:.3e}",
            report.decoder_grad_from_scores, report.retrieval_grad_from_reading
        ),
    )
}

fn criterion_3_retrieval_exactness() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (count, dim) = (1000usize, 16usize);
    let mut vectors: Vec<f32> = (0..count * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    // plant exact ties: duplicate rows under different ids
    for dup in 0..20 {
        let src = dup * 31 % count;
        let dst = count - 1 - dup;
        let row: Vec<f32> = vectors[src * dim..(src + 1) * dim].to_vec();
        vectors[dst * dim..(dst + 1) * dim].copy_from_slice(&row);
    }
    let ids: Vec<u64> = (0..count as u64).map(|i| (i * 7919) % 10007).collect();
    let index = PassageIndex::from_rows(1, dim, vectors.clone(), ids.clone()).unwrap();

    let mut mismatches = 0usize;
    for _ in 0..50 {
        let q: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        // independent brute force: naive sequential dots, full sort by
        // (score desc, id asc)
        let mut oracle: Vec<(u64, f32)> = (0..count)
            .map(|i| {
                let mut s = 0.0f32;
                for j in 0..dim {
                    s += q[j] * vectors[i * dim + j];
                }
                (ids[i], s)
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let got = index.top_n(&q, count).unwrap();
        let want: Vec<u64> = oracle.iter().map(|p| p.0).collect();
        if got.scored.passage_ids != want {
            mismatches += 1;
        }
    }
    (
        mismatches == 0,
        format!("50 queries x 1000 passages, {mismatches} rank mismatches (ties planted)"),
    )
}

fn criterion_4_loss_oracle() -> (bool, String) {
    // hand-built batch: 2 retrieved + 1 in-batch negative, gamma = 5
    let mut g = Graph::new();
    let retrieved = g.var(vec![2.0, 1.0], vec![1, 2]);
    let negative = g.var(vec![0.0], vec![1, 1]);
    let rerank_logits = g.var(vec![0.7, -0.2], vec![2, 1]);
    let decoder_scores = vec![0.06f32, 0.02];
    let reading = g.var(vec![1.75], vec![1]);
    let losses = trainer::compute_losses(
        &mut g,
        &trainer::LossInputs {
            retrieved_logits: retrieved,
            negative_logits: Some(negative),
            rerank_logits,
            decoder_scores: decoder_scores.clone(),
            reading_loss: reading,
        },
        5.0,
    )
    .unwrap();
    let got = losses.values(&g);
    let got_total = g.data(losses.total)[0] as f64;

    // straight-line f64 oracle, no shared code with the implementation
    let softmax = |x: &[f64]| -> Vec<f64> {
        let m = x.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    };
    let s_ret = softmax(&[2.0, 1.0, 0.0 + 5.0]);
    let t_mass = 0.06 + 0.02;
    let t_ret = [0.06 / t_mass, 0.02 / t_mass, 0.0];
    let mut l_ret = 0.0;
    for i in 0..3 {
        if t_ret[i] > 0.0 {
            l_ret += t_ret[i] * (t_ret[i] / s_ret[i]).ln();
        }
    }
    let s_rr = softmax(&[0.7, -0.2]);
    let t_rr = [0.06 / t_mass, 0.02 / t_mass];
    let mut l_rr = 0.0;
    for i in 0..2 {
        l_rr += t_rr[i] * (t_rr[i] / s_rr[i]).ln();
    }
    let want_total = l_ret + l_rr + 1.75;

    let errs = [
        (got.retrieval - l_ret).abs(),
        (got.rerank - l_rr).abs(),
        (got.reading - 1.75).abs(),
        (got_total - want_total).abs(),
    ];
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    (worst < 1e-5, format!("max |impl - oracle| = {worst:.2e}"))
}

/// Independent straight-line re-check of the four masked-span heuristics.
/// Works from raw text with string search; shares no code with extraction.
fn criterion_5_mssp_validity() -> (bool, String) {
    let corpus = generate_corpus(&GenConfig {
        seed: 11,
        n_docs: 200,
        entities_per_doc: 8,
        lexicon_size: 1600,
        words_per_passage: 30,
    });
    let triples = extract_mssp_triples(&corpus);
    let sample: Vec<&TrainingTriple> = triples.iter().take(1000).collect();

    let occurs = |text: &str, name: &str| -> bool { text.contains(name) };
    let mut violations = Vec::new();
    for t in &sample {
        let entity = t.masked_entity.as_deref().unwrap_or("");
        let mut explained = false;
        'docs: for doc_id in corpus.doc_ids() {
            let doc = corpus.doc_passages(doc_id);
            for (pi, p) in doc.iter().enumerate() {
                for sentence in p.text.split('.').map(str::trim).filter(|s| !s.is_empty()) {
                    if !occurs(sentence, entity) {
                        continue;
                    }
                    if sentence.replace(entity, MASK_TOKEN) != t.query {
                        continue;
                    }
                    // heuristic 1: all instances masked
                    if t.query.contains(entity) {
                        continue;
                    }
                    // other entities of the sentence, by string search over
                    // the corpus' entity inventory
                    let others: BTreeSet<&str> = p
                        .entities
                        .iter()
                        .map(|m| m.name.as_str())
                        .filter(|n| *n != entity && occurs(sentence, n))
                        .collect();
                    // heuristics 2-4: best target among +-2 neighbors that
                    // contain the entity and share another entity
                    let mut best: Option<(usize, u64)> = None;
                    for (qi, q) in doc.iter().enumerate() {
                        if qi == pi || (qi as i64 - pi as i64).abs() > 2 {
                            continue;
                        }
                        if !occurs(&q.text, entity) {
                            continue;
                        }
                        let common = others.iter().filter(|n| occurs(&q.text, n)).count();
                        if common < 1 {
                            continue;
                        }
                        best = match best {
                            None => Some((common, q.id)),
                            Some((bc, bid)) => {
                                if common > bc || (common == bc && q.id < bid) {
                                    Some((common, q.id))
                                } else {
                                    Some((bc, bid))
                                }
                            }
                        };
                    }
                    if let Some((_, want_gold)) = best {
                        if want_gold == t.gold_passage_id
                            && t.answer == entity
                            && corpus
                                .get(t.gold_passage_id)
                                .map(|g| occurs(&g.text, entity))
                                .unwrap_or(false)
                        {
                            explained = true;
                            break 'docs;
                        }
                    }
                }
            }
        }
        if !explained {
            violations.push(t.query.clone());
            if violations.len() > 3 {
                break;
            }
        }
    }
    (
        violations.is_empty(),
        format!(
            "{} / {} triples re-derived exactly by the independent validator{}",
            sample.len() - violations.len(),
            sample.len(),
            if violations.is_empty() {
                String::new()
            } else {
                format!("; first violation: {:?}", violations[0])
            }
        ),
    )
}

fn criterion_6_reader_loss_ablation() -> (bool, String) {
    let f = fixture();
    let cfg = TrainConfig {
        first_iteration_steps: Some(1600),
        ..reference_train_config()
    };
    let report = trainer::ablate_reader_loss(
        &f.corpus,
        &f.mssp,
        reference_model_config(),
        cfg,
        &[0, 1, 2],
    )
    .expect("ablation runs");
    let full = &report.rows[0];
    let only = &report.rows[1];
    (
        full.recall5 > only.recall5,
        format!(
            "mean recall@5 over 3 seeds: combined {:.3} vs retrieval-only {:.3} (delta {:+.3})",
            full.recall5,
            only.recall5,
            full.recall5 - only.recall5
        ),
    )
}

fn criterion_7_end_to_end_learnability() -> (bool, String) {
    let f = fixture();
    let t = trained();
    let test_split: Vec<TrainingTriple> = f
        .qa
        .iter()
        .filter(|x| x.split == Some(Split::Test))
        .cloned()
        .collect();
    let opts = EvalOptions {
        mode: EvalMode::Retrieval,
        n_retrieve: 10,
        m_rerank: 2,
        max_answer_len: 4,
        with_generation: true,
    };
    let s = eval::evaluate(
        &t.finetuned,
        &t.vocab,
        &f.corpus,
        &t.finetune_index,
        &test_split,
        &opts,
    )
    .expect("evaluation runs");
    let ok = s.recall[&5] >= 0.9 && s.em >= 0.8;
    (
        ok,
        format!(
            "held-out test ({} records): recall@5 {:.3} (>= 0.9), em {:.3} (>= 0.8)",
            s.n_records, s.recall[&5], s.em
        ),
    )
}

fn criterion_8_reranking_gain() -> (bool, String) {
    let f = fixture();
    let t = trained();
    // three short fine-tunes seeded differently from the shared pretrained
    // checkpoint; directional comparison on their means
    let mut r1_retr = 0.0;
    let mut r1_rr = 0.0;
    let mut em2_retr = 0.0;
    let mut em2_rr = 0.0;
    let test_split: Vec<TrainingTriple> = f
        .qa
        .iter()
        .filter(|x| x.split == Some(Split::Test))
        .cloned()
        .collect();
    for seed in [0u64, 1, 2] {
        let cfg = TrainConfig {
            seed,
            n_iterations: 2,
            first_iteration_steps: None,
            ..reference_train_config()
        };
        let run = trainer::finetune(
            &f.corpus,
            &t.pretrained,
            &t.vocab,
            &f.qa,
            cfg,
            t.pretrain_index.clone(),
            None,
        )
        .expect("short fine-tune");
        for (mode, r1, em2) in [
            (EvalMode::Retrieval, &mut r1_retr, &mut em2_retr),
            (EvalMode::Rerank, &mut r1_rr, &mut em2_rr),
        ] {
            let opts = EvalOptions {
                mode,
                n_retrieve: 10,
                m_rerank: 2,
                max_answer_len: 4,
                with_generation: true,
            };
            let s = eval::evaluate(&run.model, &t.vocab, &f.corpus, &run.index, &test_split, &opts)
                .expect("evaluation runs");
            *r1 += s.recall[&1] / 3.0;
            *em2 += s.em_at[&2] / 3.0;
        }
    }
    let ok = r1_rr >= r1_retr && em2_rr >= em2_retr;
    (
        ok,
        format!(
            "mean of 3 seeds: recall@1 rerank {r1_rr:.3} vs retrieval {r1_retr:.3}; \
             em@2 rerank {em2_rr:.3} vs retrieval {em2_retr:.3}"
        ),
    )
}

fn criterion_9_reinit_behavior() -> (bool, String) {
    let f = fixture();
    let t = trained();
    // overfit-prone: tiny train split, long iterations, no dropout
    let mut small: Vec<TrainingTriple> = f
        .qa
        .iter()
        .filter(|x| x.split == Some(Split::Train))
        .take(32)
        .cloned()
        .collect();
    small.extend(
        f.qa
            .iter()
            .filter(|x| x.split == Some(Split::Dev))
            .take(60)
            .cloned(),
    );

    // bitwise restore + index retention, observed at the reinit boundary:
    // with n_iterations == reinit_iteration the returned model is the
    // freshly reset one
    let k = 2usize;
    let cfg = TrainConfig {
        seed: 5,
        n_iterations: k,
        steps_per_iteration: 150,
        first_iteration_steps: None,
        reinit_iteration: Some(k),
        ..reference_train_config()
    };
    let start_version = t.pretrain_index.version;
    let run = trainer::finetune(
        &f.corpus,
        &t.pretrained,
        &t.vocab,
        &small,
        cfg,
        t.pretrain_index.clone(),
        None,
    )
    .expect("reinit fine-tune");
    let bitwise = run.model.params.bitwise_eq(&t.pretrained.params);
    let index_kept = run.index.version == start_version + k as u32;
    if !bitwise || !index_kept || run.reinit_at != Some(k) {
        return (
            false,
            format!(
                "bitwise restore {bitwise}, index version kept {index_kept} \
                 (v{} -> v{}), reinit_at {:?}",
                start_version, run.index.version, run.reinit_at
            ),
        );
    }

    // recovery: dev EM within 2 post-reinit iterations exceeds the trough
    let cfg = TrainConfig {
        seed: 5,
        n_iterations: k + 2,
        steps_per_iteration: 150,
        first_iteration_steps: None,
        reinit_iteration: Some(k),
        ..reference_train_config()
    };
    let run = trainer::finetune(
        &f.corpus,
        &t.pretrained,
        &t.vocab,
        &small,
        cfg,
        t.pretrain_index.clone(),
        None,
    )
    .expect("recovery fine-tune");
    let ems: Vec<f64> = run.metrics.iter().map(|m| m.em).collect();
    let trough = ems[..k].iter().cloned().fold(f64::INFINITY, f64::min);
    let recovered = ems[k..].iter().cloned().fold(0.0, f64::max);
    (
        recovered > trough,
        format!("dev EM per iteration {ems:?}; trough {trough:.3}, post-reinit best {recovered:.3}"),
    )
}

fn criterion_10_metric_correctness() -> (bool, String) {
    use yono_core::corpus::Passage;
    use yono_core::eval::{exact_match, recall_at_n, EvalRecord};
    let passage = |id: u64, text: &str| Passage {
        id,
        doc_id: 0,
        position_in_doc: id as u32,
        title: "t".into(),
        text: text.into(),
        entities: vec![],
    };
    let corpus = Corpus::from_passages(vec![
        passage(0, "the beatles played here"),
        passage(1, "nothing relevant"),
        passage(2, "a cafe\u{301} on the corner"),
        passage(3, "empty filler text"),
    ])
    .unwrap();
    let rec = |golds: &[&str], retrieved: &[u64], generated: &str| EvalRecord {
        query: "q".into(),
        golds: golds.iter().map(|s| s.to_string()).collect(),
        retrieved_ids: retrieved.to_vec(),
        generated: generated.into(),
    };
    // 10 records, hand-enumerated: hits at rank 1 (x3), rank 2 (x2),
    // rank 3 (x1), misses (x4)
    let records = vec![
        rec(&["The Beatles!"], &[0, 1, 3], "the beatles"), // rank 1, EM 1
        rec(&["beatles"], &[0, 3, 1], "Beatle"),           // rank 1, EM 0
        rec(&["caf\u{e9}"], &[2, 1, 3], "cafe\u{301}"),    // rank 1, EM 1 (NFKC)
        rec(&["the beatles"], &[1, 0, 3], "beatles the"),  // rank 2, EM 0
        rec(&["caf\u{e9}"], &[3, 2, 1], "caf\u{e9}"),      // rank 2, EM 1
        rec(&["beatles"], &[1, 3, 0], "beatles"),          // rank 3, EM 1
        rec(&["absent"], &[0, 1, 2], "absent"),            // miss, EM 1
        rec(&["absent"], &[1, 3], "nope"),                 // miss, EM 0
        rec(&["absent"], &[3], ":absent;"),                // miss, EM 1 (punct)
        rec(&["absent"], &[1], ""),                        // miss, EM 0
    ];
    let r1 = recall_at_n(&records, 1, &corpus);
    let r2 = recall_at_n(&records, 2, &corpus);
    let r3 = recall_at_n(&records, 3, &corpus);
    let em: u32 = records
        .iter()
        .map(|r| exact_match(&r.generated, &r.golds))
        .sum();
    let ok = (r1 - 0.3).abs() < 1e-12
        && (r2 - 0.5).abs() < 1e-12
        && (r3 - 0.6).abs() < 1e-12
        && em == 6
        && exact_match("The Beatles!", &["the beatles".into()]) == 1
        && exact_match("Beatle", &["Beatles".into()]) == 0;
    (
        ok,
        format!("recall@1 {r1} (0.3), recall@2 {r2} (0.5), recall@3 {r3} (0.6), EM hits {em}/10 (6)"),
    )
}

fn criterion_11_determinism_and_persistence() -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(&GenConfig {
        seed: 3,
        n_docs: 10,
        entities_per_doc: 6,
        lexicon_size: 60,
        words_per_passage: 30,
    });
    let triples = extract_mssp_triples(&corpus);
    let model_cfg = ModelConfig {
        d_model: 32,
        dropout: 0.1,
        retrieval_width: 4,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        seed: 9,
        batch_size: 4,
        steps_per_iteration: 5,
        first_iteration_steps: Some(8),
        n_iterations: 2,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let run = |out: &std::path::Path| {
        trainer::pretrain(&corpus, &triples, model_cfg.clone(), train_cfg.clone(), Some(out))
            .expect("pretrain")
    };
    let (a_dir, b_dir) = (dir.path().join("a"), dir.path().join("b"));
    run(&a_dir);
    run(&b_dir);
    let ckpt_a = std::fs::read(a_dir.join("ckpt_final.bin")).unwrap();
    let ckpt_b = std::fs::read(b_dir.join("ckpt_final.bin")).unwrap();
    let metrics_a = std::fs::read(a_dir.join("metrics.csv")).unwrap();
    let metrics_b = std::fs::read(b_dir.join("metrics.csv")).unwrap();
    let idx_a = std::fs::read(a_dir.join("index_final.idx")).unwrap();
    let idx_b = std::fs::read(b_dir.join("index_final.idx")).unwrap();
    let reproducible = ckpt_a == ckpt_b && metrics_a == metrics_b && idx_a == idx_b;

    // file round-trips are bitwise
    let (model, tc) = yono_core::model::load_checkpoint(&a_dir.join("ckpt_final.bin")).unwrap();
    let resaved = dir.path().join("resaved.bin");
    yono_core::model::save_checkpoint(&resaved, &model, &tc).unwrap();
    let ckpt_rt = std::fs::read(&resaved).unwrap() == ckpt_a;
    let index = retrieval::load_index(&a_dir.join("index_final.idx")).unwrap();
    let re_idx = dir.path().join("resaved.idx");
    retrieval::save_index(&re_idx, &index).unwrap();
    let idx_rt = std::fs::read(&re_idx).unwrap() == idx_a;

    (
        reproducible && ckpt_rt && idx_rt,
        format!(
            "identical-seed reruns bitwise equal: {reproducible}; checkpoint round-trip: \
             {ckpt_rt}; index round-trip: {idx_rt}"
        ),
    )
}

// ── the suite ────────────────────────────────────────────────────────

#[test]
fn acceptance() {
    let mins = |m: u64| Some(Duration::from_secs(m * 60));
    let results = vec![
        check("1. gradient integrity", mins(1), criterion_1_gradient_integrity),
        check("2. stop-gradient contract", mins(1), criterion_2_stop_gradient_contract),
        check("3. retrieval exactness", mins(1), criterion_3_retrieval_exactness),
        check("4. loss oracle", mins(1), criterion_4_loss_oracle),
        check("5. masked-span validity", mins(1), criterion_5_mssp_validity),
        check("6. reader-loss ablation", mins(15), criterion_6_reader_loss_ablation),
        check("7. end-to-end learnability", mins(30), criterion_7_end_to_end_learnability),
        check("8. reranking gain", mins(15), criterion_8_reranking_gain),
        check("9. re-initialization behavior", mins(10), criterion_9_reinit_behavior),
        check("10. metric correctness", mins(1), criterion_10_metric_correctness),
        check("11. determinism & persistence", mins(5), criterion_11_determinism_and_persistence),
    ];
    let mut all = true;
    for r in &results {
        let budget = r
            .budget
            .map(|b| format!(" (budget {:?})", b))
            .unwrap_or_default();
        println!(
            "{} — {}: {} [{:?}{}]",
            r.label,
            if r.passed { "PASS" } else { "FAIL" },
            r.detail,
            r.elapsed,
            budget
        );
        all &= r.passed;
    }
    assert!(all, "one or more acceptance criteria failed");
}
