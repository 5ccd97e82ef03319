use yono_core::config::{ModelConfig, TrainConfig};
use yono_core::corpus::{extract_mssp_triples, generate_corpus, GenConfig};
use yono_core::trainer;

fn main() {
    let gen = GenConfig {
        seed: 7, n_docs: 150, entities_per_doc: 8,
        lexicon_size: 1200, words_per_passage: 30,
    };
    let corpus = generate_corpus(&gen);
    let mssp = extract_mssp_triples(&corpus);
    let tc = TrainConfig {
        learning_rate: 1e-3,
        first_iteration_steps: Some(1600),
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let report = trainer::ablate_reader_loss(&corpus, &mssp, ModelConfig::default(), tc, &[0, 1, 2]).unwrap();
    for r in &report.rows {
        println!("{:<20} r@1 {:.3} r@5 {:.3} r@20 {:.3}", r.loss_variant, r.recall1, r.recall5, r.recall20);
    }
    for s in &report.per_seed {
        println!("  seed {} {:<18} r@1 {:.3} r@5 {:.3} r@20 {:.3}", s.0, s.1, s.2, s.3, s.4);
    }
    println!("elapsed {:?}", t0.elapsed());
}
