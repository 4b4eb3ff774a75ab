//! Few-shot glyph synthesis: dataset handling, the W-shaped generator and
//! its critic, perceptual classifiers, losses, and the adversarial trainer.

pub mod error;
pub mod glyphdata;

pub use error::{Error, Result};
pub mod config;
pub mod nn;
pub mod wnet;
pub mod checkpoint;
pub mod losses;
pub mod optim;
pub mod percepnets;
pub mod trainer;
pub mod gradsuite;
