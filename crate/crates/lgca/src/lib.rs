//! Local-global class-aware semantic segmentation.
//!
//! A compact, CPU-only research implementation: multi-scale encoder, global
//! and per-window class-center context modules with a learned affine window
//! transform, a cascaded decoder, and the data/training/evaluation machinery
//! to exercise them end to end. All numerics are `f64` on a small
//! reverse-mode tape so every gradient can be finite-difference checked.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod eval;
pub mod gca;
pub mod lca;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod sweep;
pub mod train;
pub mod verify;
pub mod nn;
pub mod oracle;
pub mod tensor;
