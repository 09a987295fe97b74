//! FAMix: freeze, augment and mix for domain-generalized semantic segmentation.
//!
//! The toolkit covers the full recipe: language-driven local style mining into
//! class-wise style banks, patch-wise style randomization while training a
//! minimally fine-tuned backbone, the baseline/ablation arms around it, and a
//! mIoU evaluation harness.
//!
//! Modules map onto the pipeline stages:
//! - [`stats`] — feature-statistics math: channel stats, AdaIN, style mixing,
//!   patch grids, dominant-class queries, SNR perturbation.
//! - [`nn`] — small deterministic CPU tensor layers with explicit backward
//!   passes (convolutions, group norm, bilinear resize, cross-entropy).
//! - [`encoder`] — joint vision/language embedding encoders behind the
//!   [`encoder::JointEncoder`] trait.
//! - [`mining`] — prompt-driven instance normalization and the local style
//!   mining loop that populates class-wise banks.
//! - [`bank`] — versioned persistence and sampling of style banks and prompt
//!   sets.
//! - [`model`] — the segmentation network and freeze policies.
//! - [`train`] — style randomization, train steps, schedules and baselines.
//! - [`eval`] — confusion matrices, per-class IoU and multi-run summaries.
//! - [`data`] — dataset manifests, PNG IO and the synthetic two-domain corpus.
//! - [`config`] — experiment configuration files and profiles.
//! - [`harness`] — mine/train/eval/ablate entry points shared by the CLI.

pub mod bank;
pub mod config;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod harness;
pub mod mining;
pub mod model;
pub mod nn;
pub mod stats;
pub mod train;
