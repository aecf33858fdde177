//! Synthetic-image detection on frozen vision-language embeddings.
//!
//! - [`dataset`]: embedding datasets, vocabularies and their file formats
//! - [`linear_head`]: orthogonality-regularized two-layer head and linear probe
//! - [`concept`]: sparse concept-bottleneck model with a variational mask
//! - [`metrics`]: AP, AUC, accuracy and per-generator evaluation
//! - [`interpret`]: contributions, direction/vocabulary matching, concept reports
//! - [`zeroshot`]: prompt-pair zero-shot scoring and antonym vocabularies

// `!(x > 0.0)` also rejects NaN, which is the intent wherever it appears.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod concept;
pub mod dataset;
pub mod error;
pub mod interpret;
pub mod linear_head;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod planted;
pub mod tensor_io;
pub mod training;
pub mod zeroshot;

pub use dataset::{load_dataset, load_vocabulary, EmbeddingDataset, Split, Vocabulary};
pub use error::{Error, Result};
