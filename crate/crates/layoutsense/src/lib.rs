//! Two-stage pipeline for grounding text in scene structure.
//!
//! Stage 1 trains a caption-conditioned scene-layout generator: a transformer
//! text encoder feeds an autoregressive decoder that emits labeled bounding
//! boxes, conditioned on a convolutional-GRU encoding of the layout produced
//! so far. Stage 2 reuses the stage-1 text encoder as a frozen feature
//! extractor next to a fine-tunable language model for multiple-choice
//! reasoning.
//!
//! All model math is generic over the scalar type ([`num::Scalar`], f32 or
//! f64); f32 is the training default and f64 backs the gradient checks.

pub mod cli;
pub mod config;
pub mod data;
pub mod io;
pub mod layout;
pub mod num;
pub mod optim;
pub mod reasoner;
pub mod tape;
pub mod textenc;
pub mod train;

/// Training-default parameter store.
pub type Params32 = tape::ParamSet<f32>;
/// Double-precision parameter store (gradient checks, exact replays).
pub type Params64 = tape::ParamSet<f64>;
/// Training-default stage-1 model.
pub type LayoutModel32 = layout::LayoutModel<f32>;
/// Double-precision stage-1 model.
pub type LayoutModel64 = layout::LayoutModel<f64>;
