//! Two-stage character-level NER with uncertainty-driven knowledge retrieval.
//!
//! A base tagger produces a provisional labelling. Entity-level disagreements
//! between that labelling and a set of candidate decodings (Monte-Carlo dropout
//! passes or the top-K legal sequences) are merged into uncertain components.
//! Each component is used as a query against an offline BM25 knowledge base or a
//! replayed search cache, and a small Transformer encoder re-predicts the
//! sentence from the retrieved text plus the provisional labels with the
//! uncertain positions masked.
//!
//! Module map:
//!
//! - [`tagspace`]: BIESO scheme, transition legality, span algebra
//! - [`decoder`]: constrained Viterbi and list-Viterbi top-K decoding
//! - [`tagger`]: windowed-embedding base tagger with hand-written backprop
//! - [`uncertainty`]: candidate sampling, entity diffs and component merging
//! - [`retrieval`]: triplet knowledge base, BM25, search cache, knowledge assembly
//! - [`fusion`]: knowledge fusion encoder, weighted loss and training
//! - [`pipeline`]: end-to-end prediction and jackknifed stage-two data
//! - [`evalkit`]: metrics, oracle F1, sampling ratios, cost model, sweeps
//! - [`corpus`]: tab-separated column corpus reader and writer

pub mod corpus;
pub mod decoder;
pub mod error;
pub mod evalkit;
pub mod fusion;
mod nn;
pub mod par;
pub mod pipeline;
pub mod retrieval;
pub mod tagger;
pub mod tagspace;
pub mod uncertainty;

pub use error::{Error, Result};
