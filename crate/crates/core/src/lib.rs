//! yono-core: a desk-scale encoder-decoder QA model whose retrieval,
//! reranking and reading stages are internal passage-wise attention layers
//! over one shared transformer stack, plus the self-supervised data
//! generator, iterative training loop and evaluation harness around it.

pub mod config;
pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod model;
pub mod reader;
pub mod rerank;
pub mod retrieval;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::{GradStore, Graph, TensorRef};
