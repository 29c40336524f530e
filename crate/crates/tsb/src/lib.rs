//! Target-speaker speech processing toolkit.
//!
//! Everything needed to build and probe small target-speaker systems on a
//! single machine: a deterministic two-speaker mixture simulator with frame
//! labels, a frozen toy upstream producing layered features (plus an import
//! format for real ones), a unified target speech encoder with attentive
//! speaker pooling, task heads for extraction, enhancement, activity
//! detection and transcription, an exact reverse-mode autograd engine behind
//! the training loop, and the metric/analysis stack used to score runs.
//!
//! The `tsb` binary exposes the same functionality as `simulate`, `features`,
//! `train`, `eval` and `analyze` subcommands; `examples/` holds one runnable
//! example per capability.

pub mod analysis;
pub mod audio;
pub mod cli;
pub mod autograd;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod params;
pub mod demo;
pub mod seeding;
pub mod sim;
pub mod train;
pub mod upstream;

pub use audio::AudioSignal;
pub use error::{Error, Result};

/// Samples per feature/label frame at 16 kHz (20 ms grid).
pub const FRAME_STRIDE: usize = 320;
