//! Two-stage adversarial video generation on a bouncing-balls corpus.
//!
//! A frame generator is trained against many discriminators that each see a
//! fixed random projection of the frame. A recurrent video generator then
//! learns to emit sequences of frame latents, decoded by the frozen frame
//! generator, against 3-D convolutional discriminators on projected clips.

pub mod ballsim;
pub mod error;
pub mod evalsuite;
pub mod framegan;
pub mod ganloss;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod videogan;

pub use error::{Error, Result};
