//! Few-shot unsupervised feature selection.
//!
//! A support-set-conditioned Concrete feature selector trained episodically
//! across related tasks. The selector draws K relaxed one-hot rows over M
//! features from task-conditioned logits, a task-conditioned decoder
//! reconstructs full instances from the selected values, and the whole
//! pipeline is trained end to end with temperature annealing. At test time
//! features are picked by a hard argmax per selector row, so a model trained
//! on source tasks selects features for an unseen target task from a handful
//! of unlabeled instances.
//!
//! Modules:
//! - [`matrix`] / [`tape`]: dense row-major matrices and reverse-mode
//!   autodiff on a Wengert tape
//! - [`concrete`]: Gumbel noise, Concrete relaxation, temperature schedule,
//!   hard selection
//! - [`set_encoder`]: permutation-invariant support-set encoders for the
//!   selector logits and the decoder context
//! - [`model`]: the selector + decoder, checkpoints
//! - [`trainer`]: episodic training loop, Adam, validation bank, fine-tuning
//! - [`baselines`]: Laplacian Score and trivial selectors
//! - [`eval`]: reconstruction error, k-means, ARI/NMI, selection scoring
//! - [`data`]: task datasets, manifests, normalization, episode sampling and
//!   the synthetic benchmark generator

pub mod baselines;
pub mod concrete;
pub mod data;
pub mod error;
pub mod eval;
pub mod matrix;
pub mod model;
pub mod rng;
pub mod set_encoder;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use tape::{NodeId, Tape};
