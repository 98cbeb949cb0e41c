//! Teacher-student cross-modal identity matching.
//!
//! A teacher fuses each image or text embedding with same-identity embeddings
//! from other views (multi-head attentional fusion) and is trained with
//! multi-stage and cross-stage projection matching losses. A single-input
//! student is then distilled from the frozen teacher through feature and
//! relation distillation, and only the student is used for retrieval.
//!
//! Everything runs on a small reverse-mode tape over dense `f64` tensors
//! ([`tensor`]), checked against central differences ([`gradcheck`]).

pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gradsuite;
pub mod losses;
pub mod mhaf;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
