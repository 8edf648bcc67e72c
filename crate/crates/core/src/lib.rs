//! Syntax-aware language models over tag-prefixed symbol sequences, with a
//! particle-filter decoder for applying them to untagged text.

pub mod corpus;
pub mod demo;
pub mod error;
pub mod eval;
pub mod lstm;
pub mod nncore;
pub mod oracle;
pub mod synsir;
pub mod train;

pub use error::{Error, Result};
