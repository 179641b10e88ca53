//! Pure, allocation-only core of the emotion-geometry toolkit.
//!
//! Everything in this crate operates on activations that have already been
//! captured: building centered per-emotion vectors, sweeping layers, cosine
//! RDMs and their descriptors, rank correlation between RDMs, the four-way
//! method/precision decomposition, and the steering-regime classifier.
//! Model execution, file formats and the CLI live in the `emogeom` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod capture;
pub mod comprehension;
pub mod decomposition;
pub mod equivalence;
pub mod error;
pub mod genprotocol;
pub mod geometry;
mod math;
pub mod record;
pub mod rsa;
pub mod steering;
pub mod vocab;

pub use error::{Error, Result};
pub use math::{cosine, dot, norm};
