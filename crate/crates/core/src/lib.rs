//! Adversarial-example toolkit for promptable segmentation models.
//!
//! A promptable segmenter maps an (image, point-prompt) pair to a per-pixel
//! logit map; pixels with positive logits form the predicted mask. This
//! crate crafts L∞-bounded perturbations against such models and measures
//! what they do to the masks:
//!
//! - mask removal via squared-error losses toward a negative logit
//!   threshold, with a clipped variant that zeroes the gradient of pixels
//!   already below the threshold;
//! - cross-prompt transfer (craft on K source prompts, evaluate on fresh
//!   ones) and cross-task transfer (craft on a classifier surrogate);
//! - mask enlargement and targeted generation of arbitrary masks (shifts,
//!   flips, geometric shapes, masks borrowed from other prompts/images).
//!
//! A small trainable encoder-decoder segmenter and a synthetic shapes
//! dataset make every attack property checkable end to end on a laptop;
//! full-scale backends plug in through the [`model::Segmenter`] trait and
//! the adapter registry.

pub mod attacks;
pub mod budget;
pub mod config;
pub mod data;
pub mod error;
pub mod image;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod prompt;
pub mod reporting;
pub mod runner;
pub mod tasks;

pub use budget::{AttackBudget, AttackResult};
pub use error::{Error, Result};
pub use image::Image;
pub use mask::{binarize, BinaryMask, LogitMap};
pub use prompt::{sample_prompts, PointPrompt, PromptSet};
