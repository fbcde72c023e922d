//! Tiny-object detection building blocks: a small reverse-mode autodiff
//! engine, a context-enhanced feature pyramid with foreground gating, an
//! adaptive L1/L2 regression loss, anchor assignment, a synthetic scene
//! generator and a training/evaluation harness.

pub mod assign;
pub mod cem;
pub mod dcloss;
pub mod error;
pub mod fbsm;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod kernels;
pub mod nn;
pub mod params;
pub mod pyramid;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
