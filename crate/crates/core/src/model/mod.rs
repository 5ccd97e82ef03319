//! Model parameters and the shared transformer stack.

mod checkpoint;
mod stack;

pub use checkpoint::{load_checkpoint, save_checkpoint, CKPT_MAGIC};
pub use stack::{DecoderAttentionTrace, HiddenStates, Prefix, Session};

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};

pub type ParamId = usize;

/// Named parameter tensors in a fixed construction order. Data lives behind
/// `Arc` so forward graphs can bind parameters without copying; the
/// optimizer mutates through `make_mut` once all graphs are dropped.
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    data: Vec<Arc<Vec<f32>>>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            shapes: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> ParamId {
        let name = name.into();
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        debug_assert!(!self.index.contains_key(&name), "duplicate param {name}");
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.shapes.push(shape);
        self.data.push(Arc::new(data));
        id
    }

    pub fn id(&self, name: &str) -> ParamId {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id]
    }

    pub fn arc(&self, id: ParamId) -> Arc<Vec<f32>> {
        Arc::clone(&self.data[id])
    }

    pub fn values(&self, id: ParamId) -> &[f32] {
        &self.data[id]
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut Vec<f32> {
        Arc::make_mut(&mut self.data[id])
    }

    pub fn total_elements(&self) -> usize {
        self.data.iter().map(|d| d.len()).sum()
    }

    /// Bitwise equality of every tensor (names, shapes and bits).
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self.shapes == other.shapes
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.len() == b.len()
                    && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    /// Overwrite every tensor with `other`'s values (same layout required).
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names || self.shapes != other.shapes {
            return Err(Error::contract("parameter layouts differ"));
        }
        for (dst, src) in self.data.iter_mut().zip(&other.data) {
            *dst = Arc::new(src.as_ref().clone());
        }
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            data: self.data.iter().map(|d| Arc::new(d.as_ref().clone())).collect(),
            index: self.index.clone(),
        }
    }
}

/// Config plus parameters: everything a forward pass needs.
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn normal(rng: &mut ChaCha8Rng, std: f32, n: usize) -> Vec<f32> {
    // Box-Muller; rand_distr is avoided to keep the init stream simple
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
        let u2: f32 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f32::consts::PI * u2).sin_cos();
        out.push(r * c * std);
        if out.len() < n {
            out.push(r * s * std);
        }
    }
    out
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f32> {
    let std = (2.0 / (rows + cols) as f32).sqrt();
    normal(rng, std, rows * cols)
}

impl Model {
    /// Seeded initialization: Xavier-normal projections, N(0, 0.02)
    /// embeddings, unit gains and zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let v = config.vocab_size;
        let ff = config.d_ff();
        let mut p = ParamStore::new();

        // Embeddings at unit-ish scale: the first pre-LN normalizes rows by
        // 1/sigma, so a tiny embedding scale would both amplify gradients
        // ~1/sigma and blow up curvature ~1/sigma^3.
        let emb = normal(&mut rng, 0.5, v * d);
        p.add("embed.token", vec![v, d], emb);
        let pos = normal(&mut rng, 0.5, config.position_table_len() * d);
        p.add("embed.pos", vec![config.position_table_len(), d], pos);

        let add_ln = |p: &mut ParamStore, name: String| {
            p.add(format!("{name}.gain"), vec![d], vec![1.0; d]);
            p.add(format!("{name}.bias"), vec![d], vec![0.0; d]);
        };
        let add_attn = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: String| {
            for w in ["wq", "wk", "wv", "wo"] {
                p.add(format!("{name}.{w}"), vec![d, d], xavier(rng, d, d));
            }
        };

        for i in 0..config.total_encoder_layers() {
            add_ln(&mut p, format!("enc{i}.ln1"));
            add_attn(&mut p, &mut rng, format!("enc{i}.attn"));
            add_ln(&mut p, format!("enc{i}.ln2"));
            p.add(format!("enc{i}.ffn.w1"), vec![d, ff], xavier(&mut rng, d, ff));
            p.add(format!("enc{i}.ffn.w2"), vec![ff, d], xavier(&mut rng, ff, d));
        }
        for i in 0..config.decoder_layers {
            add_ln(&mut p, format!("dec{i}.ln1"));
            add_attn(&mut p, &mut rng, format!("dec{i}.self"));
            add_ln(&mut p, format!("dec{i}.ln2"));
            add_attn(&mut p, &mut rng, format!("dec{i}.cross"));
            add_ln(&mut p, format!("dec{i}.ln3"));
            p.add(format!("dec{i}.ffn.w1"), vec![d, ff], xavier(&mut rng, d, ff));
            p.add(format!("dec{i}.ffn.w2"), vec![ff, d], xavier(&mut rng, ff, d));
        }
        add_ln(&mut p, "dec.final_ln".into());

        p.add("retrieval.wq", vec![d, d], xavier(&mut rng, d, d));
        p.add("retrieval.wp", vec![d, d], xavier(&mut rng, d, d));
        add_ln(&mut p, "retrieval.ln_q".into());
        add_ln(&mut p, "retrieval.ln_p".into());
        p.add("rerank.w_qp", vec![d, 1], xavier(&mut rng, d, 1));
        add_ln(&mut p, "rerank.ln".into());

        Ok(Model { config, params: p })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 19,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(tiny_config(), 5).unwrap();
        let b = Model::init(tiny_config(), 5).unwrap();
        assert!(a.params.bitwise_eq(&b.params));
        let c = Model::init(tiny_config(), 6).unwrap();
        assert!(!a.params.bitwise_eq(&c.params));
    }

    #[test]
    fn copy_from_restores_bitwise() {
        let a = Model::init(tiny_config(), 5).unwrap();
        let mut b = Model::init(tiny_config(), 9).unwrap();
        assert!(!a.params.bitwise_eq(&b.params));
        b.params.copy_from(&a.params).unwrap();
        assert!(a.params.bitwise_eq(&b.params));
    }
}
