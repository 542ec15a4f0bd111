//! Training engine for cross-modal convolutional networks (X-CNNs).
//!
//! An X-CNN splits the input into per-channel "superlayers" (one small conv
//! tower per colour channel) and lets them exchange information through 1x1
//! convolution cross-connections inserted at the pooling points.  The design
//! targets sparse training sets, where a monolithic network overfits before it
//! learns anything transferable between channels.
//!
//! This crate is the `no_std + alloc` half of the project: tensors, the
//! reverse-mode tape, layers, the network graph with its built-in presets,
//! the optimiser and training loop, dataset transforms, evaluation helpers
//! and weight introspection.  Everything touching files lives in the `xcnn`
//! companion crate.
//!
//! Determinism is a hard requirement throughout: given a seed and a
//! configuration, every forward pass, shuffle, dropout mask and weight update
//! replays bit-identically on any build of the same version.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod introspect;
pub mod layers;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, TensorId};
