//! Training and evaluation pipeline for bilingual sentence-embedding models.

pub mod curation;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result, TensorError};
pub use tensor::{Gradients, Tape, Tensor, Var};
