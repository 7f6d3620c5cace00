//! Search-based discovery of an autonomous vehicle's decision manifold, and
//! learned correctness properties over it.
//!
//! The crate has three layers:
//!
//! * a cross-entropy engine ([`engine`]) driving a hybrid
//!   categorical-Gaussian path distribution ([`hybrid`]) through a
//!   deterministic lane simulator ([`sim`]) under a weighted pair cost
//!   ([`cost`]), producing near-identical pairs of colliding and
//!   non-colliding adversary behaviors;
//! * a labeled path archive ([`archive`]) and windowed feature extraction
//!   ([`features`]) over the recorded traces;
//! * a from-scratch random-forest classifier ([`forest`]) that predicts
//!   imminent collisions with configurable advance notice, plus the
//!   command-line pipeline ([`cli`]).
//!
//! The `manifold` binary exposes the whole pipeline; see the guide under
//! `book/` for worked examples.

pub mod archive;
pub mod cli;
pub mod config;
pub mod cost;
pub mod digest;
pub mod engine;
pub mod error;
pub mod features;
pub mod forest;
pub mod guide;
pub mod hybrid;
pub mod rng;
pub mod sim;


pub use error::{Error, Result};
