//! Word-in-context relatedness and disagreement prediction from frozen
//! contextual embeddings.
//!
//! The crate covers corpus and embedding-store I/O, anisotropy-removing
//! transforms, Krippendorff's alpha and Spearman's rho, threshold fitting
//! with Nelder–Mead, virtual-annotator ensembles, small MLP baselines, and a
//! Gaussian simulator that produces synthetic corpora and stores.

pub mod cli;
pub mod corpus;
pub mod ensemble;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod mlp;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod simulator;
pub mod store;
pub mod threshold;

pub use error::{Error, Result};
