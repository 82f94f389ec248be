//! Sequence-to-sequence ICD-10 coding of death certificates.
//!
//! The pipeline runs from certificate records through BPE tokenization to a
//! conditional Transformer, beam search decoding, F-measure consensus
//! ensembling and evaluation.

pub mod config;
pub mod decode;
pub mod ensemble;
pub mod eval;
pub mod pipeline;
pub mod error;
pub mod records;
pub mod synth;
pub mod tensor;
pub mod textprep;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
