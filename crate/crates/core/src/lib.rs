//! Core of the CALM pipeline, usable without the standard library.
//!
//! Everything here is pure computation over in-memory data: the reverse-mode
//! engine ([`graph`]), the log-mel front end ([`features`]), the spectral
//! patch transformer ([`spectran`]), contrastive acoustic-language
//! pretraining ([`calp`]), the multimodal transformer with masked audio and
//! language prediction ([`mmtx`]), supervised emotion heads and metrics
//! ([`heads`]) and the staged training procedures ([`train`]). File formats,
//! audio IO and the command line live in the companion `calm` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod calp;
pub mod config;
pub mod corpus;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod mmtx;
pub mod nn;
pub mod optim;
pub mod params;
pub mod real;
pub mod rng;
pub mod spectran;
pub mod tensor;
pub mod train;

pub use error::{CoreError, Result};
pub use graph::{Graph, SeqLayout, Var};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
