//! Multitask encoder/decoder segmentation toolkit for layered OCT-style images.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`domain`] — scans, label maps, per-class binary masks, layer surfaces.
//! - [`phantom`] — deterministic synthetic layered B-scan generator with
//!   analytic ground truth.
//! - [`dataio`] — manifest loading, subject-disjoint splits, preprocessing,
//!   augmentation and batching.
//! - [`nn`] — tensor primitives with hand-written backward passes.
//! - [`model`] — the six network regimes (binary, multiclass, 2-decoder
//!   multitask and the 3-decoder variants with/without inter-decoder
//!   connections and gradient flow).
//! - [`loss`] — per-branch soft Dice losses and their linear combination.
//! - [`train`] — seeded training loop with checkpointing, resume and early
//!   stopping.
//! - [`postproc`] — mask cleanup, per-column surface extraction and drusen
//!   derivation.
//! - [`metrics`] — confusion metrics, surface errors, eye-level aggregation
//!   and the paired Wilcoxon signed-rank test.
//! - [`cli`] — the `octseg` command-line entry points.

pub mod cli;
pub mod config;
pub mod dataio;
pub mod domain;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod postproc;
pub mod train;

/// Crate version string recorded next to run outputs.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
