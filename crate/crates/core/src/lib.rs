//! rvit-core: a self-contained float64 laboratory for studying how block-level
//! stochastic transformations of a toy Vision Transformer affect the transfer
//! of adversarial perturbations between models.
//!
//! The crate provides, bottom to top:
//!
//! - [`tensor`]: dense tensors with reverse-mode differentiation and a
//!   finite-difference gradient checker;
//! - [`vit`]: a small pre-norm Vision Transformer with per-block hook points,
//!   plus [`cnn`], a compact convolutional classifier for the model zoo;
//! - [`redundancy`]: the four block-level operations (attention
//!   sparsification, head permutation, clean-token injection, ghost
//!   mixture-of-experts) and their composition rules;
//! - [`robust`]: trainable robustification tokens learned by an inner/outer
//!   adversarial loop before an attack runs;
//! - [`attack`]: momentum sign-gradient attacks and the full
//!   schedule-sampling attack driver;
//! - [`policy`]: the per-block categorical operation policy and its
//!   score-function update;
//! - [`data`], [`zoo`], [`eval`]: a procedural shapes dataset, surrogate and
//!   victim training, transfer matrices, and structural redundancy probes;
//! - [`config`], [`checkpoint`], [`advb`], [`report`]: the JSON experiment
//!   schema, binary tensor container, adversarial-batch file, and canonical
//!   report writers.

pub mod advb;
pub mod attack;
pub mod checkpoint;
pub mod cnn;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod policy;
pub mod redundancy;
pub mod report;
pub mod rng;
pub mod suite;
pub mod robust;
pub mod tensor;
pub mod vit;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::{backward, Gradients, Tape, Tensor};
