//! AGHMN: attention gated hierarchical memory networks for real-time
//! emotion recognition in conversations.
//!
//! The crate is self-contained: a small reverse-mode autodiff core, the
//! recurrent cells and model assembly, corpus handling with a synthetic
//! generator, and a training/evaluation harness driven by the `aghmn` CLI.

pub mod autodiff;
pub mod cells;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod train;

pub use error::{Error, Result};
