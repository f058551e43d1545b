//! Similarity-invariant hand representations and few-shot metric learning.
//!
//! The crate turns 21-keypoint hand landmarks into `raw`, `angle` or
//! `raw_angle` feature vectors ([`geometry`]), organises landmark files into
//! catalogs and deterministic splits ([`dataio`]), samples N-way K-shot
//! episodes ([`episodes`]), and trains an MLP encoder ([`nnet`]) with a
//! prototypical head plus a supervised contrastive term ([`fewshot`]).
//! [`pipeline`] drives training and cross-domain adaptation; [`eval`] runs
//! episodic evaluation, baselines and ablations.

pub mod config;
pub mod dataio;
pub mod episodes;
pub mod eval;
pub mod error;
pub mod fewshot;
pub mod geometry;
pub mod nnet;
pub mod npy;
pub mod pipeline;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
