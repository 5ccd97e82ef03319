use std::time::Instant;

use yono_core::config::{ModelConfig, TrainConfig};
use yono_core::corpus::{extract_mssp_triples, generate_corpus, make_qa_triples, GenConfig};
use yono_core::eval::{self, EvalMode, EvalOptions};
use yono_core::model::Model;
use yono_core::retrieval;
use yono_core::trainer::{LossVariant, TrainDriver};
use yono_core::vocab::Vocab;

fn main() {
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
        "corpus: {} passages, {} mssp triples, {} qa triples ({:?})",
        corpus.len(),
        mssp.len(),
        qa.len(),
        t0.elapsed()
    );

    let vocab = Vocab::from_corpus(&corpus);
    println!("vocab: {}", vocab.len());
    let mut mc = ModelConfig::default();
    mc.vocab_size = vocab.len();
    mc.dropout = 0.1;
    let model = Model::init(mc.clone(), 0).unwrap();
    println!("params: {}", model.params.total_elements());

    let tc = TrainConfig {
        steps_per_iteration: 20,
        ..TrainConfig::default()
    };
    let mut driver = TrainDriver::new(model, &vocab, &corpus, tc.clone());

    let t = Instant::now();
    let losses = driver
        .first_iteration(&mssp, LossVariant::Full, 1)
        .unwrap();
    println!(
        "first iteration: 20 steps in {:?} ({:.0} ms/step), losses {:?}",
        t.elapsed(),
        t.elapsed().as_millis() as f64 / 20.0,
        losses
    );

    let t = Instant::now();
    let index = retrieval::build_index(&driver.model, &vocab, &corpus).unwrap();
    println!("index build over {} passages: {:?}", index.len(), t.elapsed());

    let t = Instant::now();
    let losses = driver
        .retrieval_iteration(&mssp, &index, true, 2)
        .unwrap();
    println!(
        "retrieval iteration: 20 steps in {:?} ({:.0} ms/step), losses {:?}",
        t.elapsed(),
        t.elapsed().as_millis() as f64 / 20.0,
        losses
    );

    let t = Instant::now();
    let opts = EvalOptions {
        mode: EvalMode::Retrieval,
        n_retrieve: 20,
        m_rerank: 2,
        max_answer_len: 4,
        with_generation: true,
    };
    let s = eval::evaluate(&driver.model, &vocab, &corpus, &index, &qa[..100], &opts).unwrap();
    println!(
        "eval 100 records in {:?}: recall {:?} em {:.3}",
        t.elapsed(),
        s.recall,
        s.em
    );
}
