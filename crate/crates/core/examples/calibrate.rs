use std::time::Instant;

use yono_core::config::{ModelConfig, TrainConfig};
use yono_core::corpus::{extract_mssp_triples, generate_corpus, make_qa_triples, GenConfig};
use yono_core::eval::{self, EvalMode, EvalOptions};
use yono_core::trainer;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f32 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let dropout: f32 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let t0 = Instant::now();
    let gen = GenConfig {
        seed: 7,
        n_docs: 150,
        entities_per_doc: 8,
        lexicon_size: 1200,
        words_per_passage: 30,
    };
    let corpus = generate_corpus(&gen);
    let mssp = extract_mssp_triples(&corpus);
    let qa = make_qa_triples(7, &corpus, 0);
    println!(
        "fixture: {} passages, {} mssp, {} qa; lr={lr} dropout={dropout}",
        corpus.len(),
        mssp.len(),
        qa.len()
    );

    let mc = ModelConfig {
        dropout,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        learning_rate: lr,
        n_iterations: 4,
        steps_per_iteration: 300,
        first_iteration_steps: Some(7000),
        ..TrainConfig::default()
    };

    let (pre, vocab) = trainer::pretrain(&corpus, &mssp, mc, tc.clone(), None).unwrap();
    for m in &pre.metrics {
        println!(
            "pretrain it{}: r@1 {:.3} r@5 {:.3} r@20 {:.3} em {:.3} losses {:.3}/{:.3}/{:.3}",
            m.iteration, m.recall1, m.recall5, m.recall20, m.em,
            m.loss_retrieval, m.loss_rerank, m.loss_reading
        );
    }
    println!("pretrain done at {:?}", t0.elapsed());

    let ft_cfg = TrainConfig {
        learning_rate: lr,
        n_iterations: 4,
        steps_per_iteration: 300,
        first_iteration_steps: None,
        ..tc
    };
    let run = trainer::finetune(&corpus, &pre.model, &vocab, &qa, ft_cfg, pre.index, None).unwrap();
    for m in &run.metrics {
        println!(
            "finetune it{}: r@1 {:.3} r@5 {:.3} r@20 {:.3} em {:.3} losses {:.3}/{:.3}/{:.3}",
            m.iteration, m.recall1, m.recall5, m.recall20, m.em,
            m.loss_retrieval, m.loss_rerank, m.loss_reading
        );
    }
    println!("finetune done at {:?} (reinit at {:?})", t0.elapsed(), run.reinit_at);

    // held-out test evaluation, both modes
    let test: Vec<_> = qa
        .iter()
        .filter(|t| t.split == Some(yono_core::corpus::Split::Test))
        .cloned()
        .collect();
    for mode in [EvalMode::Retrieval, EvalMode::Rerank] {
        let opts = EvalOptions {
            mode,
            n_retrieve: 10,
            m_rerank: 2,
            max_answer_len: 4,
            with_generation: true,
        };
        let s = eval::evaluate(&run.model, &vocab, &corpus, &run.index, &test, &opts).unwrap();
        println!(
            "test {:?}: recall {:?} em {:.3} em_at {:?}",
            mode, s.recall, s.em, s.em_at
        );
    }
    println!("total {:?}", t0.elapsed());
}
