use std::time::Instant;
use yono_core::config::{ModelConfig, TrainConfig};
use yono_core::corpus::{extract_mssp_triples, generate_corpus, GenConfig};
use yono_core::eval::{self, EvalMode, EvalOptions};
use yono_core::model::Model;
use yono_core::retrieval;
use yono_core::trainer::{holdout_split, LossVariant, TrainDriver};
use yono_core::vocab::Vocab;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f32 = args[1].parse().unwrap();
    let entities_per_doc: usize = args[2].parse().unwrap();
    let chunks: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(6);
    let per_chunk: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(800);

    let gen = GenConfig {
        seed: 7, n_docs: 150, entities_per_doc,
        lexicon_size: 150 * entities_per_doc, words_per_passage: 30,
    };
    let corpus = generate_corpus(&gen);
    let mssp = extract_mssp_triples(&corpus);
    let vocab = Vocab::from_corpus(&corpus);
    println!("passages {} triples {} vocab {}", corpus.len(), mssp.len(), vocab.len());
    let (train, dev) = holdout_split(&mssp, 0, 100);

    let mc = ModelConfig { vocab_size: vocab.len(), dropout: 0.1, ..ModelConfig::default() };
    let model = Model::init(mc, 0).unwrap();
    let tc = TrainConfig {
        learning_rate: lr, batch_size: 8,
        steps_per_iteration: per_chunk, first_iteration_steps: Some(per_chunk),
        ..TrainConfig::default()
    };
    let mut driver = TrainDriver::new(model, &vocab, &corpus, tc);
    let t0 = Instant::now();
    for c in 1..=chunks {
        let l = driver.first_iteration(&train, LossVariant::Full, c as u64).unwrap();
        let index = retrieval::build_index(&driver.model, &vocab, &corpus).unwrap();
        let opts = EvalOptions { mode: EvalMode::Retrieval, n_retrieve: 20, m_rerank: 2, max_answer_len: 4, with_generation: true };
        let s = eval::evaluate(&driver.model, &vocab, &corpus, &index, &dev, &opts).unwrap();
        println!(
            "steps {:>5}: ret {:.3} read {:.3} | dev r@1 {:.3} r@5 {:.3} r@20 {:.3} em {:.3} ({:?})",
            c * per_chunk, l.retrieval, l.reading, s.recall[&1], s.recall[&5], s.recall[&20], s.em, t0.elapsed()
        );
    }
}
