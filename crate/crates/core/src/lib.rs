//! Rating prediction from heterogeneous side information.
//!
//! The pipeline counts metagraph instances between users and items on a
//! heterogeneous information network ([`metagraph`]), turns every similarity
//! matrix into low-rank user and item features ([`latent`]), and fuses the
//! feature groups with a factorization machine whose group-sparse
//! regularizer switches whole metagraphs on or off ([`fm`], [`solvers`]).
//! [`pipeline`] wires the stages together with on-disk caching.

// `!(x >= 0.0)` style checks reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fm;
pub mod hin;
pub mod latent;
pub mod metagraph;
pub mod metrics;
pub mod pipeline;
pub mod solvers;
pub mod sparse;
pub mod synth;

pub use error::{Error, Result};
