#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod downstream;
pub mod error;
pub mod evaluator;
pub mod genome_io;
pub mod kernels;
pub mod model;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
