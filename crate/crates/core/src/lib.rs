//! Reference-guided enhancement of wide field-of-view images.
//!
//! A wide shot is split into an 8×8 patch grid; every wide patch is paired
//! with the most similar patch of a co-captured narrow (zoomed) shot, and a
//! generator fuses the two through cross-view attention before the patches
//! are upscaled and feathered back together.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod imaging;
pub mod inference;
pub mod losses;
pub mod matching;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod visual;

pub use error::{Error, Result};
