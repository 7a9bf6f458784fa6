//! Desk-scale semi-supervised segmentation with synergy-guided regional
//! supervision: a mean teacher proposes pseudo labels, a mixed image
//! probes their reliability, and per-pixel entropy splits the unlabeled
//! stream into discard / trust / cross-check regions that receive
//! different losses.

pub mod augment;
pub mod data;
pub mod error;
pub mod harness;
pub mod label;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod synergy;
pub mod teacher;
pub mod tensor;
pub mod tsr;

pub use error::{Error, Result};
