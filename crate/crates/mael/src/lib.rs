//! Weakly supervised recognition and temporal parsing of actions from
//! pre-extracted region-proposal descriptors.
//!
//! The pipeline has four stages, each usable on its own:
//!
//! 1. [`hierarchy`] prunes background proposals per video, pools the
//!    survivors into spatiotemporal segments, and agglomerates the segments
//!    into a binary tree per video.
//! 2. [`discovery`] clusters segments across the videos of each action class
//!    into a vocabulary of mid-level action elements (MAEs), each with a
//!    discriminatively trained linear classifier.
//! 3. [`model`] + [`inference`] + [`training`] define a tree-structured
//!    linear scoring model over (video class, per-node MAE assignment),
//!    exact max-sum inference over it, and cutting-plane structural SVM
//!    learning for both recognition and parsing.
//! 4. [`eval`] implements the metrics (per-class accuracy, temporal IoU,
//!    localization mAP) plus the sliding-window and root-only baselines.
//!
//! [`synth`] generates planted synthetic datasets with ground-truth
//! metadata, and [`numerics`] holds the self-contained numerical kernels
//! (symmetric eigensolver, k-means, spectral clustering, linear SVM) that
//! everything above is built on. All stochastic routines take explicit
//! seeds; identical inputs and seeds reproduce identical outputs.

/// Crate version, embedded in run manifests and diagnostics.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod data;
pub mod discovery;
pub mod eval;
pub mod hierarchy;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod training;
