//! Causal-guided representation learning for node classification under
//! distribution shift, with a self-contained reverse-mode diff engine,
//! synthetic shift benchmarks, and numeric verification of the causal theory
//! the training objective rests on.

pub mod config;
pub mod diff;
pub mod experiment;
pub mod encoder;
pub mod error;
pub mod fixture;
pub mod graph;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod report;
pub mod scm;
pub mod shift;
pub mod scalar;

pub use error::{CgrlError, Result};
pub use scalar::Scalar;

/// Concrete aliases for the two supported scalar types.
pub type Graph32 = graph::Graph<f32>;
pub type Graph64 = graph::Graph<f64>;
pub type Tape32 = diff::Tape<f32>;
pub type Tape64 = diff::Tape<f64>;
pub type Mat32 = diff::Mat<f32>;
pub type Mat64 = diff::Mat<f64>;
