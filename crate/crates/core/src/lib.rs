//! Continual imitation learning on a toy vision–language–action policy.
//!
//! The crate bundles a small reverse-mode autodiff engine, a flow-matching
//! policy with an attention fusion layer, the replay-anchored contrastive and
//! cross-modal mutual-information objectives, a synthetic pick-and-place
//! suite, a continual trainer with four baselines, and the usual
//! continual-learning metrics.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod experiment;
pub mod gradsuite;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod policy;
pub mod replay;
pub mod suite;
pub mod trainer;

pub use error::{Error, Result};
