//! Background exemplar codebooks, exemplar-driven negative anchor mining and
//! open-world proposal recall evaluation.

pub mod cli;
pub mod coco;
pub mod codebook;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod kernel;
pub mod labeler;
pub mod probe;
pub mod store;
pub mod supervision;
pub mod synthetic;

pub use error::{Error, Result};
