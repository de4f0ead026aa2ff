//! Neuronal group communication for toy transformers.
//!
//! Weight blocks are factorized into per-neuron state embeddings whose
//! interactions reproduce the dense map. Communication policies merge and
//! share state matrices across blocks, a coupled discrete dynamical system
//! tracks how the rewired model shadows the original, and stability scores
//! rank candidate policies before fine-tuning.
//!
//! Module map:
//! - [`matrix`], [`ngct`]: dense carrier and the on-disk tensor container
//! - [`linalg`]: SVD, truncation, pseudo-inverse, least squares
//! - [`groups`]: neuronal states, similarity metrics, sharing propositions
//! - [`policy`]: merge-set grammar, rank budgeting, delayed-link compilation
//! - [`netmodel`]: the toy decoder-only transformer (root and com variants)
//! - [`init`]: state initialization from captured activations
//! - [`dynamics`]: projection fitting, stability scores, ISS checks
//! - [`pipeline`], [`report`], [`verify`]: end-to-end orchestration

pub mod error;
pub mod seeding;
pub mod matrix;
pub mod ngct;
pub mod linalg;
pub mod groups;
pub mod policy;
pub mod netmodel;
pub mod init;
pub mod dynamics;
pub mod pipeline;
pub mod report;
pub mod verify;

pub use error::{NgcError, Result};
pub use matrix::Matrix;
