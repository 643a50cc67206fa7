//! Weakly-supervised object counting from image-level counts.
//!
//! The crate carries its own reverse-mode differentiation engine
//! ([`autodiff`]), two small backbones ([`backbone`]), the similarity-based
//! counting head ([`sfsl`]), global-local consistency training ([`glc`]), a
//! synthetic scene generator ([`datagen`]) and the experiment harness
//! ([`eval`]). [`config`] and [`checkpoint`] handle run files.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod glc;
pub mod model;
pub mod params;
pub mod sfsl;
pub mod verify;

pub use error::{Error, Result};
