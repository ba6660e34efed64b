//! Self-supervised temporal ordering for blur-to-video decomposition.
//!
//! A blurry image is the mean of its sharp frames, so it cannot tell a
//! sequence from its reverse. This crate learns an order label for frame
//! sequences (an encoder that places a pair and its swap on opposite sides of
//! a fixed hyperplane) and uses it to regularize multi-frame deblurring.

pub mod blur2vid;
pub mod cli;
pub mod diffcore;
pub mod error;
pub mod hypercut;
pub mod layout;
pub mod metrics;
pub mod pipeline;
pub mod scenes;

pub use error::{Error, Result};
