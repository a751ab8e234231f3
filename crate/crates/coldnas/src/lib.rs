//! Search-to-modulate user cold-start recommendation.
//!
//! A cold-start user comes with only a handful of rated items. Instead of
//! adapting a model by gradient steps per user, a hypernetwork maps the
//! user's support set to parameter vectors that modulate the hidden states
//! of a shared MLP predictor. Which elementwise operations to modulate
//! with, and at which layers, is treated as an architecture search problem:
//! arbitrary chains over `{max, min, ⊙, /, +, −}` canonicalize into an
//! equivalent four-operation form, and a differentiable supernet searches
//! over the canonical space.
//!
//! Module map:
//! - [`numerics`]: dense `f64` tensors with a define-by-run reverse-mode tape
//! - [`modulation`]: operation-chain expressions, the canonical form, and the
//!   soft-mixed supernet layer
//! - [`algebra`]: executable canonicalizer with a numerical equivalence oracle
//! - [`model`]: embedding layer, adaptation hypernetwork, modulated predictor
//! - [`data`]: dataset parsing, few-shot task construction, user-disjoint splits
//! - [`search`]: supernet training, Top-K selection, retraining, random-search
//!   baselines
//! - [`eval`]: MSE / MAE / nDCG metrics over task sets
//! - [`config`] and [`cli`]: run configuration and the command-line surface

pub mod algebra;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod modulation;
pub mod numerics;
pub mod search;

pub use error::{Error, Result};
