//! Numeric core for multigraph convolutional networks on superpixels.
//!
//! Everything in this crate is deterministic and allocation-only (`no_std`
//! compatible with `alloc`): dense tensors with a define-by-run gradient
//! tape, the Adam optimizer, SLIC superpixel segmentation, multigraph
//! assembly (spatial / hierarchical / learned relations), and the
//! three-layer multirelational classifier with its four fusion operators.
//!
//! IO, dataset parsing, caching and the experiment CLI live in the `mgcn`
//! companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

#[cfg(test)]
#[macro_use]
extern crate std;

pub mod adam;
pub mod batch;
pub mod error;
pub mod graph;
pub mod image;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod superpixel;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use batch::{BasisKind, Batch};
pub use error::{Error, Result};
pub use graph::{MultiGraph, RelationKind, RelationSpec};
pub use image::Image;
pub use model::{FusionKind, ModelConfig, ModelParams, Regularizer};
pub use rng::Rng;
pub use scalar::Scalar;
pub use superpixel::{Segmentation, SuperpixelHierarchy};
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::{Mask, Tensor};
