//! Multi-scale aggregation network (SMA-Net) for classifying image
//! sequences, with the small tensor/autodiff engine it runs on.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`tape`], [`conv`]: dense tensors and reverse-mode autodiff.
//! * [`gradcheck`]: central finite-difference verification of gradients.
//! * [`nn`]: parameter storage and the composite blocks (MSDA, SE gate, ConvLSTM).
//! * [`model`]: the full network and its three prediction families.
//! * [`loss`], [`optim`], [`train`]: multi-level loss, Adam, training loop.
//! * [`metrics`]: confusion-matrix metrics and ROC AUC.
//! * [`data`], [`format`]: synthetic sequences, grouped splits, file formats.
//! * [`config`]: flat key=value run configuration.

pub mod config;
pub mod conv;
pub mod data;
pub mod element;
pub mod error;
pub mod format;
pub mod gradcheck;
pub mod gradsuite;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;

#[cfg(any(test, feature = "oracles"))]
pub mod reference;

pub use conv::ConvSpec;
pub use element::Element;
pub use error::{Error, Result};
pub use tape::{OpKind, Tape, Var};
pub use tensor::Tensor;
