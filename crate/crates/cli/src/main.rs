//! `yono` — train and evaluate the single-model retrieve/rerank/read QA
//! stack on synthetic corpora.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use yono_core::config::{load_config, ModelConfig, TrainConfig};
use yono_core::corpus::{
    extract_mssp_triples, generate_corpus, load_corpus, load_triples, make_qa_triples,
    save_corpus, save_triples, GenConfig,
};
use yono_core::diagnostics;
use yono_core::eval::{self, EvalMode, EvalOptions};
use yono_core::model::load_checkpoint;
use yono_core::retrieval;
use yono_core::tensor::gradcheck;
use yono_core::trainer;
use yono_core::vocab::Vocab;

#[derive(Parser)]
#[command(name = "yono", about = "single-model retrieval, reranking and reading", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TripleMode {
    Mssp,
    Qa,
}

#[derive(Clone, Copy, ValueEnum)]
enum RankMode {
    Retrieval,
    Rerank,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateMode {
    ReaderLoss,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic entity-annotated corpus.
    GenCorpus {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        docs: usize,
        #[arg(long, default_value_t = 8)]
        entities_per_doc: usize,
        #[arg(long, default_value_t = 500)]
        lexicon_size: usize,
        #[arg(long, default_value_t = 30)]
        words_per_passage: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract training triples from a corpus.
    GenTriples {
        #[arg(long, value_enum)]
        mode: TripleMode,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// QA mode: sampling seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// QA mode: cap on emitted questions (0 = all).
        #[arg(long, default_value_t = 0)]
        count: usize,
    },
    /// Embed every passage with a checkpoint and write the index.
    BuildIndex {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Iterative pretraining on masked-span triples.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        triples: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the config file's seed when set.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune a pretrained checkpoint on QA triples (no gold labels).
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        triples: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint + index over triples.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        triples: PathBuf,
        #[arg(long, value_enum, default_value = "retrieval")]
        mode: RankMode,
        #[arg(long, default_value_t = 10)]
        n_retrieve: usize,
        #[arg(long, default_value_t = 2)]
        m_rerank: usize,
        /// Which split of the triples file to evaluate.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Loss ablations.
    Ablate {
        #[arg(long, value_enum)]
        mode: AblateMode,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        triples: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Finite-difference gradient checks (per-op battery + composed loss).
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Seeds to sweep for the per-op battery.
        #[arg(long, default_value_t = 20)]
        battery_seeds: u64,
    },
    /// Emit plot-ready CSVs from a run directory's metrics.
    EmitPlots {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn load_configs(path: &Option<PathBuf>) -> anyhow::Result<(ModelConfig, TrainConfig)> {
    match path {
        Some(p) => load_config(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok((ModelConfig::default(), TrainConfig::default())),
    }
}

fn write_eval_outputs(
    out_dir: &Path,
    summary: &eval::EvalSummary,
    mode_label: &str,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut csv = String::from(
        "mode,n_retrieve,m_rerank,recall@1,recall@5,recall@20,em,em@1,em@2,em@5,em@10,n_records\n",
    );
    csv.push_str(&format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}\n",
        mode_label,
        summary.n_retrieve,
        summary.m_rerank,
        summary.recall[&1],
        summary.recall[&5],
        summary.recall[&20],
        summary.em,
        summary.em_at[&1],
        summary.em_at[&2],
        summary.em_at[&5],
        summary.em_at[&10],
        summary.n_records
    ));
    let path = out_dir.join(format!("eval_{mode_label}.csv"));
    std::fs::write(&path, csv)?;
    eval::record_eval_em(out_dir, summary)?;
    println!(
        "{mode_label}: recall@1 {:.4} recall@5 {:.4} recall@20 {:.4} em {:.4} ({} records) -> {}",
        summary.recall[&1],
        summary.recall[&5],
        summary.recall[&20],
        summary.em,
        summary.n_records,
        path.display()
    );
    Ok(())
}

fn run() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::GenCorpus {
            seed,
            docs,
            entities_per_doc,
            lexicon_size,
            words_per_passage,
            out,
        } => {
            let corpus = generate_corpus(&GenConfig {
                seed,
                n_docs: docs,
                entities_per_doc,
                lexicon_size,
                words_per_passage,
            });
            save_corpus(&out, &corpus)?;
            println!("wrote {} passages to {}", corpus.len(), out.display());
        }
        Command::GenTriples {
            mode,
            corpus,
            out,
            seed,
            count,
        } => {
            let corpus = load_corpus(&corpus)?;
            let triples = match mode {
                TripleMode::Mssp => extract_mssp_triples(&corpus),
                TripleMode::Qa => make_qa_triples(seed, &corpus, count),
            };
            save_triples(&out, &triples)?;
            println!("wrote {} triples to {}", triples.len(), out.display());
        }
        Command::BuildIndex { corpus, ckpt, out } => {
            let corpus = load_corpus(&corpus)?;
            let (model, _) = load_checkpoint(&ckpt)?;
            let vocab = Vocab::from_corpus(&corpus);
            if vocab.len() != model.config.vocab_size {
                bail!(
                    "corpus vocabulary ({}) does not match the checkpoint ({})",
                    vocab.len(),
                    model.config.vocab_size
                );
            }
            let index = retrieval::build_index(&model, &vocab, &corpus)?;
            retrieval::save_index(&out, &index)?;
            println!(
                "indexed {} passages (dim {}) into {}",
                index.len(),
                index.dim,
                out.display()
            );
        }
        Command::Pretrain {
            corpus,
            triples,
            config,
            out_dir,
            seed,
        } => {
            let corpus = load_corpus(&corpus)?;
            let triples = load_triples(&triples)?;
            let (model_cfg, mut train_cfg) = load_configs(&config)?;
            if let Some(s) = seed {
                train_cfg.seed = s;
            }
            let (run, _) = trainer::pretrain(&corpus, &triples, model_cfg, train_cfg, Some(&out_dir))?;
            let last = run.metrics.last().expect("at least one iteration");
            println!(
                "pretrained {} iterations: recall@5 {:.4} em {:.4} -> {}",
                run.metrics.len(),
                last.recall5,
                last.em,
                out_dir.display()
            );
        }
        Command::Finetune {
            ckpt,
            corpus,
            index,
            triples,
            config,
            out_dir,
            seed,
        } => {
            let corpus = load_corpus(&corpus)?;
            let triples = load_triples(&triples)?;
            let (pretrained, ckpt_train_cfg) = load_checkpoint(&ckpt)?;
            let start_index = retrieval::load_index(&index)?;
            let vocab = Vocab::from_corpus(&corpus);
            if vocab.len() != pretrained.config.vocab_size {
                bail!(
                    "corpus vocabulary ({}) does not match the checkpoint ({})",
                    vocab.len(),
                    pretrained.config.vocab_size
                );
            }
            let mut train_cfg = match &config {
                Some(_) => load_configs(&config)?.1,
                None => ckpt_train_cfg,
            };
            if let Some(s) = seed {
                train_cfg.seed = s;
            }
            let run = trainer::finetune(
                &corpus,
                &pretrained,
                &vocab,
                &triples,
                train_cfg,
                start_index,
                Some(&out_dir),
            )?;
            let last = run.metrics.last().expect("at least one iteration");
            println!(
                "fine-tuned {} iterations (reinit at {:?}): recall@5 {:.4} em {:.4} -> {}",
                run.metrics.len(),
                run.reinit_at,
                last.recall5,
                last.em,
                out_dir.display()
            );
        }
        Command::Eval {
            ckpt,
            index,
            corpus,
            triples,
            mode,
            n_retrieve,
            m_rerank,
            split,
            out_dir,
        } => {
            let corpus = load_corpus(&corpus)?;
            let triples = load_triples(&triples)?;
            let triples: Vec<_> = match split {
                SplitArg::All => triples,
                SplitArg::Train => triples
                    .into_iter()
                    .filter(|t| t.split == Some(yono_core::corpus::Split::Train))
                    .collect(),
                SplitArg::Dev => triples
                    .into_iter()
                    .filter(|t| t.split == Some(yono_core::corpus::Split::Dev))
                    .collect(),
                SplitArg::Test => triples
                    .into_iter()
                    .filter(|t| t.split == Some(yono_core::corpus::Split::Test))
                    .collect(),
            };
            if triples.is_empty() {
                bail!("no triples in the requested split");
            }
            let (model, _) = load_checkpoint(&ckpt)?;
            let index = retrieval::load_index(&index)?;
            let vocab = Vocab::from_corpus(&corpus);
            if vocab.len() != model.config.vocab_size {
                bail!(
                    "corpus vocabulary ({}) does not match the checkpoint ({})",
                    vocab.len(),
                    model.config.vocab_size
                );
            }
            let (mode_enum, label) = match mode {
                RankMode::Retrieval => (EvalMode::Retrieval, "retrieval"),
                RankMode::Rerank => (EvalMode::Rerank, "rerank"),
            };
            let opts = EvalOptions {
                mode: mode_enum,
                n_retrieve,
                m_rerank,
                max_answer_len: trainer::MAX_ANSWER_LEN,
                with_generation: true,
            };
            let summary = eval::evaluate(&model, &vocab, &corpus, &index, &triples, &opts)?;
            write_eval_outputs(&out_dir, &summary, label)?;
        }
        Command::Ablate {
            mode: AblateMode::ReaderLoss,
            corpus,
            triples,
            config,
            seeds,
            out_dir,
        } => {
            let corpus = load_corpus(&corpus)?;
            let triples = load_triples(&triples)?;
            let (model_cfg, train_cfg) = load_configs(&config)?;
            let report =
                trainer::ablate_reader_loss(&corpus, &triples, model_cfg, train_cfg, &seeds)?;
            std::fs::create_dir_all(&out_dir)?;
            let path = out_dir.join("ablation_reader_loss.csv");
            trainer::write_ablation_csv(&path, &report)?;
            for row in &report.rows {
                println!(
                    "{:<18} recall@1 {:.4} recall@5 {:.4} recall@20 {:.4}",
                    row.loss_variant, row.recall1, row.recall5, row.recall20
                );
            }
            println!("wrote {}", path.display());
        }
        Command::Gradcheck {
            seed,
            battery_seeds,
        } => {
            let mut all_ok = true;
            let mut worst: Option<gradcheck::CheckResult> = None;
            for s in 0..battery_seeds {
                for r in gradcheck::standard_battery(seed.wrapping_add(s)) {
                    all_ok &= r.passed();
                    if worst.as_ref().map_or(true, |w| r.max_err > w.max_err) {
                        worst = Some(r);
                    }
                }
            }
            if let Some(w) = &worst {
                println!(
                    "per-op battery over {battery_seeds} seeds: worst {} at rel err {:.3e} ({})",
                    w.name,
                    w.max_err,
                    if all_ok { "pass" } else { "FAIL" }
                );
            }
            let composed = diagnostics::composed_loss_gradcheck(seed, 12, 5.0)?;
            println!(
                "composed total loss over {} directions: rel err {:.3e} ({})",
                composed.elements,
                composed.max_err,
                if composed.passed() { "pass" } else { "FAIL" }
            );
            let partition = diagnostics::gradient_partition_check(seed, 5.0)?;
            println!(
                "gradient partition: decoder grad from score losses = {} (must be 0), \
                 retrieval-range grad from reading loss = {:.4e} (must be > 0)",
                partition.decoder_grad_from_scores, partition.retrieval_grad_from_reading
            );
            if !all_ok
                || !composed.passed()
                || partition.decoder_grad_from_scores != 0.0
                || partition.retrieval_grad_from_reading <= 0.0
            {
                bail!("gradient checks failed");
            }
        }
        Command::EmitPlots { run_dir } => {
            let written = eval::emit_plot_data(&run_dir)?;
            if written.is_empty() {
                bail!("no metrics store found under {}", run_dir.display());
            }
            for p in written {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
