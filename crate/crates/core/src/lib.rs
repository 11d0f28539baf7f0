//! Multi-scale knowledge tracing.
//!
//! Two complementary answer-correctness models over student interaction
//! logs: a windowed attention encoder-decoder ([`muse_local`]) and a
//! recurrent model with unbounded context ([`muse_global`]), blended by a
//! small boosted-tree model ([`fusion`]).

pub mod config;
pub mod datamodel;
pub mod error;
pub mod features;
pub mod fusion;
pub mod metrics;
pub mod muse_global;
pub mod muse_local;
pub mod pipeline;
pub mod numcore;
pub mod simgen;
pub mod training;

pub use error::{MuseError, Result};
