//! Vortex detection, tracking and latent interaction graph inference over
//! noisy 2D flow fields.
//!
//! The pipeline runs `synth` (or measured fields) → `detect` → `track` →
//! `nri` (train and encode) → `markers`.

pub mod detect;
pub mod error;
pub mod field;
pub mod io;
pub mod markers;
pub mod nri;
pub mod seed;
pub mod synth;
pub mod tape;
pub mod track;
pub mod train;

pub use error::{Error, Result};
