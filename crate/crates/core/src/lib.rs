//! Engine for sparse vision-language interaction in decoder-style transformers.
//!
//! The crate is organized around a single idea: most layers of a
//! vision-language decoder never need to touch the visual tokens. A
//! [`model::LayerSchedule`] compiles a per-layer assignment over three layer
//! kinds — text-only, cross-attention (text reads static visual tokens), and
//! full self-attention over the concatenated `[V; T]` sequence (which is the
//! only kind that refines the visual tokens). On top of the scheduled model:
//!
//! - [`numkernel`] — deterministic f64 dense kernels with a reverse-mode
//!   gradient tape, enough to train the toy model end to end.
//! - [`model`] — the schedule-compiled transformer, training loop, and
//!   checkpoint format.
//! - [`configspace`] — enumeration and viability screening of self-attention
//!   layer subsets ("configurations").
//! - [`router`] — per-sample configuration selection: routing token, policy
//!   head, offline pseudo-labels.
//! - [`packing`] — spatial interpolation plus space-to-depth token packing
//!   for arbitrary reduction rates.
//! - [`analysis`] — CKA similarity, attention-share decomposition,
//!   vision-drop sensitivity, per-sample oracle selection, and the FLOPs
//!   cost model.

pub mod analysis;
pub mod configspace;
pub mod error;
pub mod model;
pub mod numkernel;
pub mod packing;
pub mod router;

pub use error::{CoreError, Result};
