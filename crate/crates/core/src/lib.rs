//! Core of the causal-abstraction toolkit: a small reverse-mode autodiff
//! engine, finite causal models, the equality tasks, the MLP under study,
//! alignment maps, distributed alignment search, the vacuity construction
//! and representation diagnostics.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod align;
pub mod autodiff;
pub mod causal;
pub mod das;
pub mod diagnostics;
pub mod error;
pub mod mlp;
pub mod rng;
pub mod tasks;
pub mod vacuity;

pub use error::{Error, Result};
