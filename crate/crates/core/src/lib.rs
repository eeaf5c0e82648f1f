//! Hierarchical Dirichlet Hawkes process.
//!
//! * [`point_process`]: kernels, intensities, likelihoods and moments.
//! * [`generative`]: exact forward simulation and synthetic benchmarks.
//! * [`smc`]: sequential Monte Carlo inference over tasks and patterns.
//! * [`evaluation`]: clustering scores, held-out likelihood, goodness of fit
//!   and per-pattern / per-user reports.
//! * [`io`]: JSONL events, JSON snapshots and CSV reports.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evaluation;
pub mod generative;
pub mod io;
pub mod point_process;
pub mod smc;

pub use error::{HdhpError, Result};
