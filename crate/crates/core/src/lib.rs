//! Multi-modality multi-object tracking.
//!
//! The crate links detections across consecutive frames by (1) encoding each
//! sensor modality into per-detection feature vectors, (2) fusing the
//! modalities with a robust fusion module that keeps working when sensors
//! drop out, (3) estimating confidence / affinity / start / end scores with
//! small differentiable heads, and (4) solving the resulting two-frame
//! min-cost-flow assignment exactly. Everything upstream of the solver is
//! differentiable through a reverse-mode tape so the whole score pipeline
//! trains end to end.

pub mod adjacency;
pub mod assoc;
pub mod config;
pub mod diffcore;
pub mod error;
pub mod features;
pub mod fusion;
pub mod gradsuite;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod tracker;

pub use error::{Error, Result};
