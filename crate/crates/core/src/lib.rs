//! Prior-knowledge injection for gene expression prediction from slide
//! embeddings.
//!
//! The pipeline builds thresholded Pearson co-expression graphs
//! ([`coexpr`]), compresses them into nonnegative gene embeddings with NMF
//! ([`nmf`]), checks how much neighborhood structure survives
//! ([`embedqc`]), and injects the embeddings into a linear prediction head
//! ([`predictor`]) that is trained and evaluated per gene ([`train_eval`]).
//! [`synth`] generates datasets with a known co-expression structure and
//! [`experiment`] wires everything into reproducible cross-validated runs.

pub mod coexpr;
pub mod dataio;
pub mod embedqc;
pub mod error;
pub mod experiment;
pub mod nmf;
pub mod predictor;
pub mod synth;
pub mod train_eval;

pub use error::{Error, Result};
