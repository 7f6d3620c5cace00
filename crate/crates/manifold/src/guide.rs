//! The user guide, embedded chapter by chapter from `book/`.
//!
//! Each chapter's code blocks compile and run against this crate as
//! doctests, so `cargo test --doc` keeps the book in sync with the API.
//! Render the standalone book with `mdbook build book/`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/getting-started.md")]
pub mod getting_started {}

#[doc = include_str!("../../../book/src/cross-entropy.md")]
pub mod cross_entropy {}

#[doc = include_str!("../../../book/src/hybrid-distributions.md")]
pub mod hybrid_distributions {}

#[doc = include_str!("../../../book/src/lane-simulator.md")]
pub mod lane_simulator {}

#[doc = include_str!("../../../book/src/pair-cost.md")]
pub mod pair_cost {}

#[doc = include_str!("../../../book/src/pair-search.md")]
pub mod pair_search {}

#[doc = include_str!("../../../book/src/archive.md")]
pub mod archive_guide {}

#[doc = include_str!("../../../book/src/features.md")]
pub mod feature_windows {}

#[doc = include_str!("../../../book/src/classifier.md")]
pub mod classifier {}

#[doc = include_str!("../../../book/src/file-formats.md")]
pub mod file_formats {}
