//! Graph relation and representation generative modeling wrapped around a toy
//! visual-question-answering model, plus a synthetic compositional
//! out-of-distribution benchmark to measure it.
// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod numerics;

pub mod concepts;
pub mod vqa;
pub mod dataset;
pub mod fsutil;
pub mod encoder;
pub mod rggm;
pub mod nggm;
pub mod trainer;
pub mod checkpoint;
pub mod heatmap;
pub mod gradsuite;
pub mod cli;

pub use error::{Error, Result};
