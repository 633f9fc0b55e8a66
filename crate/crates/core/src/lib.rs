//! Two-view geometry and transformer-internals analysis toolkit.
//!
//! The crate covers the full analysis path for a feed-forward multi-view
//! transformer evaluated on image pairs:
//!
//! - [`geometry`]: cameras, essential/fundamental matrices, Sampson error.
//! - [`estimators`]: normalized eight-point solver, RANSAC, failure rule.
//! - [`scene`]: procedural two-view scenes with exact ground truth.
//! - [`tensor_io`]: the EPGT tensor format, manifests, run directories.
//! - [`attention`]: token layout and correspondence-matching metrics.
//! - [`probing`]: two-layer MLP probes trained under Sampson loss.
//! - [`interventions`]: attention-knockout specs and their evaluation.
//! - [`robustness`]: occlusion, focal-length and ambiguity studies.
//! - [`report`]: diff-stable CSV and SVG output.
//! - [`synth`]: oracle run directories for exercising the pipeline
//!   without model weights.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod estimators;
pub mod geometry;
pub mod interventions;
pub mod probing;
pub mod report;
pub mod rng;
pub mod robustness;
pub mod scene;
pub mod stats;
pub mod synth;
pub mod tensor_io;
