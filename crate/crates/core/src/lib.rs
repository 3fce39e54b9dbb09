//! Point-cloud classification with distilled prompts, plus the adversarial
//! attack/defense bench used to measure robustness.
//!
//! The crate is organized bottom-up:
//!
//! - [`diffmath`] — reverse-mode autodiff on a dynamic tape (`f32`).
//! - [`geometry`] — point-cloud types, sampling, set distances, synthetic shapes.
//! - [`projection`] — orthographic multi-view depth images.
//! - [`encoders`] — point/image/text encoders and the teacher bootstrap.
//! - [`losses`] — confidence-gated contrastive distillation losses.
//! - [`attacks`] — gradient-based attack suite and preprocessing defenses.
//! - [`pipeline`] — training, evaluation, checkpoints, reports, CLI plumbing.

pub mod attacks;
pub mod diffmath;
pub mod encoders;
pub mod geometry;
pub mod losses;
pub mod pipeline;
pub mod projection;
