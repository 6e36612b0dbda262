//! Transformer neural machine translation with source-side part-of-speech
//! factors.
//!
//! POS information enters the encoder in one of two ways (see [`pos_aug`]):
//! concatenated with the subword embedding before positional encoding
//! (`embed_concat`), or concatenated after positional encoding has been added
//! to the subword block (`pe_concat`). The rest of the crate is the pipeline
//! around that: corpus filtering, BPE with tag propagation, training,
//! beam search and BLEU.

pub mod bleu;
pub mod bpe;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod model;
pub mod pos_aug;
pub mod tagging;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
