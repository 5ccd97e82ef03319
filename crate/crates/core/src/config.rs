//! Model and training configuration, plus the flat `key = value` config
//! file format shared by the CLI and the checkpoint header.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Architecture hyperparameters. The encoder stack is split into three
/// contiguous ranges: layers `[0, K)` feed the retrieval head, `[K, K+L)`
/// the reranking head, and `[K+L, K+L+R_enc)` the reader; `R_dec` decoder
/// layers perform fused multi-passage reading.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub max_query_len: usize,
    /// K: encoder layers whose output feeds the retrieval head.
    pub retrieval_layers: usize,
    /// L: encoder layers for joint query-passage reranking (may be 0).
    pub rerank_layers: usize,
    /// R_enc: remaining encoder layers for reading.
    pub reading_layers: usize,
    /// R_dec: decoder layers.
    pub decoder_layers: usize,
    pub dropout: f32,
    /// N: retrieval width.
    pub retrieval_width: usize,
    /// M: rerank width at inference (training never filters).
    pub rerank_width: usize,
}

impl Default for ModelConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 2,
            vocab_size: 0, // derived from the corpus
            max_seq_len: 64,
            max_query_len: 16,
            retrieval_layers: 2,
            rerank_layers: 1,
            reading_layers: 2,
            decoder_layers: 2,
            dropout: 0.1,
            retrieval_width: 10,
            rerank_width: 2,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn total_encoder_layers(&self) -> usize {
        self.retrieval_layers + self.rerank_layers + self.reading_layers
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    /// Maximum position id: passages are embedded at positions offset by
    /// the query slot so joint sequences live in one position space.
    pub fn position_table_len(&self) -> usize {
        self.max_query_len + self.max_seq_len
    }

    /// The full-scale layer split this architecture scales down from:
    /// 24 encoder layers as 12 retrieval + 4 reranking + 8 reading, and
    /// 6 decoder layers.
    pub fn full_scale_reference() -> Self {
        ModelConfig {
            d_model: 1024,
            n_heads: 16,
            vocab_size: 32_128,
            max_seq_len: 200,
            max_query_len: 40,
            retrieval_layers: 12,
            rerank_layers: 4,
            reading_layers: 8,
            decoder_layers: 6,
            dropout: 0.1,
            retrieval_width: 100,
            rerank_width: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::contract(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.retrieval_layers < 1
            || self.reading_layers < 1
            || self.decoder_layers < 1
        {
            return Err(Error::contract(
                "retrieval, reading and decoder layer counts must be >= 1",
            ));
        }
        if self.vocab_size == 0 {
            return Err(Error::contract("vocab_size must be set"));
        }
        if self.retrieval_width < 1 || self.rerank_width < 1 {
            return Err(Error::contract("retrieval/rerank widths must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract(format!("dropout {} out of [0,1)", self.dropout)));
        }
        if self.max_query_len == 0 || self.max_seq_len == 0 {
            return Err(Error::contract("sequence length limits must be >= 1"));
        }
        Ok(())
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Constant penalty added to in-batch negatives' retrieval logits
    /// before the softmax.
    pub gamma: f32,
    /// Fixed learning rate (no schedule).
    pub learning_rate: f32,
    pub batch_size: usize,
    pub steps_per_iteration: usize,
    /// Steps for the (cheaper, gold-supervised) first iteration; `None`
    /// falls back to `steps_per_iteration`. The full-scale recipe trains
    /// its first iteration roughly 80x longer than later ones.
    pub first_iteration_steps: Option<usize>,
    pub n_iterations: usize,
    /// Fine-tuning only: fixed iteration at which parameters are reset to
    /// the pretrained checkpoint. `None` means the automatic trigger
    /// (dev exact-match drops below the previous iteration's).
    pub reinit_iteration: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 5.0,
            learning_rate: 1e-4,
            batch_size: 8,
            steps_per_iteration: 200,
            first_iteration_steps: None,
            n_iterations: 8,
            reinit_iteration: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::contract(format!("gamma {} must be >= 0", self.gamma)));
        }
        if self.batch_size < 1 || self.steps_per_iteration < 1 || self.n_iterations < 1 {
            return Err(Error::contract("batch/steps/iterations must be >= 1"));
        }
        Ok(())
    }
}

/// Both configs rendered as flat `key = value` lines.
pub fn render_config(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv("d_model", model.d_model.to_string());
    kv("n_heads", model.n_heads.to_string());
    kv("d_head", model.d_head().to_string());
    kv("vocab_size", model.vocab_size.to_string());
    kv("max_seq_len", model.max_seq_len.to_string());
    kv("max_query_len", model.max_query_len.to_string());
    kv("retrieval_layers", model.retrieval_layers.to_string());
    kv("rerank_layers", model.rerank_layers.to_string());
    kv("reading_layers", model.reading_layers.to_string());
    kv("decoder_layers", model.decoder_layers.to_string());
    kv("dropout", model.dropout.to_string());
    kv("retrieval_width", model.retrieval_width.to_string());
    kv("rerank_width", model.rerank_width.to_string());
    kv("gamma", train.gamma.to_string());
    kv("learning_rate", train.learning_rate.to_string());
    kv("batch_size", train.batch_size.to_string());
    kv("steps_per_iteration", train.steps_per_iteration.to_string());
    kv(
        "first_iteration_steps",
        train
            .first_iteration_steps
            .map(|i| i.to_string())
            .unwrap_or_else(|| "auto".to_string()),
    );
    kv("n_iterations", train.n_iterations.to_string());
    kv(
        "reinit_iteration",
        train
            .reinit_iteration
            .map(|i| i.to_string())
            .unwrap_or_else(|| "auto".to_string()),
    );
    kv("seed", train.seed.to_string());
    s
}

/// Parse flat `key = value` text. Missing keys keep their defaults;
/// unknown keys are rejected. `d_head` is accepted and cross-checked.
pub fn parse_config(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();
    let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::format("config", format!("line {}: expected key = value", lineno + 1))
        })?;
        seen.insert(k.trim(), v.trim());
    }
    let parse_usize = |k: &str, v: &str| -> Result<usize> {
        v.parse()
            .map_err(|_| Error::format("config", format!("{k}: bad integer {v:?}")))
    };
    let parse_f32 = |k: &str, v: &str| -> Result<f32> {
        v.parse()
            .map_err(|_| Error::format("config", format!("{k}: bad float {v:?}")))
    };
    let mut d_head_claim = None;
    for (k, v) in seen {
        match k {
            "d_model" => model.d_model = parse_usize(k, v)?,
            "n_heads" => model.n_heads = parse_usize(k, v)?,
            "d_head" => d_head_claim = Some(parse_usize(k, v)?),
            "vocab_size" => model.vocab_size = parse_usize(k, v)?,
            "max_seq_len" => model.max_seq_len = parse_usize(k, v)?,
            "max_query_len" => model.max_query_len = parse_usize(k, v)?,
            "retrieval_layers" => model.retrieval_layers = parse_usize(k, v)?,
            "rerank_layers" => model.rerank_layers = parse_usize(k, v)?,
            "reading_layers" => model.reading_layers = parse_usize(k, v)?,
            "decoder_layers" => model.decoder_layers = parse_usize(k, v)?,
            "dropout" => model.dropout = parse_f32(k, v)?,
            "retrieval_width" => model.retrieval_width = parse_usize(k, v)?,
            "rerank_width" => model.rerank_width = parse_usize(k, v)?,
            "gamma" => train.gamma = parse_f32(k, v)?,
            "learning_rate" => train.learning_rate = parse_f32(k, v)?,
            "batch_size" => train.batch_size = parse_usize(k, v)?,
            "steps_per_iteration" => train.steps_per_iteration = parse_usize(k, v)?,
            "first_iteration_steps" => {
                train.first_iteration_steps = if v == "auto" {
                    None
                } else {
                    Some(parse_usize(k, v)?)
                }
            }
            "n_iterations" => train.n_iterations = parse_usize(k, v)?,
            "reinit_iteration" => {
                train.reinit_iteration = if v == "auto" {
                    None
                } else {
                    Some(parse_usize(k, v)?)
                }
            }
            "seed" => {
                train.seed = v
                    .parse()
                    .map_err(|_| Error::format("config", format!("seed: bad integer {v:?}")))?
            }
            other => {
                return Err(Error::format(
                    "config",
                    format!("unknown key {other:?}"),
                ))
            }
        }
    }
    if let Some(dh) = d_head_claim {
        if model.n_heads == 0 || dh != model.d_model / model.n_heads {
            return Err(Error::format(
                "config",
                format!(
                    "d_head {dh} inconsistent with d_model {} / n_heads {}",
                    model.d_model, model.n_heads
                ),
            ));
        }
    }
    Ok((model, train))
}

pub fn load_config(path: &Path) -> Result<(ModelConfig, TrainConfig)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

pub fn save_config(path: &Path, model: &ModelConfig, train: &TrainConfig) -> Result<()> {
    std::fs::write(path, render_config(model, train)).map_err(|e| Error::io(path, e))
}
