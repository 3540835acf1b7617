//! Hybrid HMM-DNN digit-recognition workbench with uncertainty-aware
//! acoustic models, targeted waveform-space PGD attacks, and a Gaussian
//! one-class detector over uncertainty measures.
//!
//! The crate is organized along the processing pipeline:
//!
//! - [`audio`]: PCM16 WAV I/O and the synthetic digit-utterance generator.
//! - [`features`]: differentiable MFCC+delta front end (forward and exact
//!   backward pass).
//! - [`nn`] / [`bnn`] / [`acoustic`]: the four acoustic-model families and
//!   their training.
//! - [`hmm`]: 95-state topology, digit-loop Viterbi decoding, forced
//!   alignment, and Viterbi training.
//! - [`attack`]: targeted L-infinity projected gradient descent through the
//!   front end.
//! - [`uncertainty`]: entropy, mutual information, variance, and averaged
//!   KL divergence per utterance.
//! - [`eval`]: Gaussian one-class detector, ROC/AUROC, word accuracy.
//! - [`config`] / [`dataset`] / [`checkpoint`] / [`pipeline`]: the
//!   experiment harness behind the `uqasr` CLI.

pub mod acoustic;
pub mod attack;
pub mod audio;
pub mod bnn;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod hmm;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod uncertainty;

pub use error::{Error, Result};
