//! Network description and execution.
//!
//! [`spec`] declares architectures as data: superlayer towers of staged
//! layers, cross-connection segments between them and a shared tail.
//! [`presets`] holds the four built-in networks.  [`network`] materialises a
//! spec into parameters and runs it on a [`crate::tensor::Tape`].

mod network;
mod presets;
mod spec;

pub use network::{BnSite, InferForward, NetworkGraph, Param, ParamKind, TrainForward};
pub use presets::{architecture, train_defaults, Preset, PresetOptions, TrainDefaults};
pub use spec::{ArchitectureSpec, CrossConnectionSpec, CrossEdgeSpec, SuperlayerSpec};
