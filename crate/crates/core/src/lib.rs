//! Joint learning of word embeddings and lexical alignments from parallel
//! text.
//!
//! Each L1 token gets a Gaussian latent embedding z_i. The embedding
//! generates the token itself, and every L2 token is generated from the
//! embedding at a uniformly chosen L1 position (position 0 is NULL). Training
//! maximises a single-sample reparameterised ELBO with KL annealing and Adam,
//! optionally approximating both softmax heads with complementary sum
//! sampling (CSS).
//!
//! Modules, bottom up:
//! - [`autodiff`]: f64 tensors and a reverse-mode tape
//! - [`corpus`]: vocabularies, sentence pairs, batching, CSS supports and a
//!   synthetic dictionary corpus
//! - [`model`] / [`hiermodel`]: the base model and its sentence-latent variant
//! - [`training`]: initialisation, Adam, annealing, the epoch loop and checkpoints
//! - [`alignment`], [`semeval`]: alignment decoding, AER, GAP, Spearman, embeddings
//! - [`baselines`]: IBM1 trained by EM and a neural IBM1
//!
//! Data-parallel loops go through [`parallel`]; without the `parallel`
//! feature every loop runs on the calling thread, with identical results.

// `!(x > 0.0)` is used on purpose so that NaN fails the check too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod autodiff;
pub mod baselines;
pub mod corpus;
pub mod gaussian;
pub mod hiermodel;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod semeval;
pub mod training;
