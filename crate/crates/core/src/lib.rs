//! Random walks in random environment on super-critical Galton-Watson trees.
//!
//! * [`env`]: environment laws and lazily generated trees
//! * [`regime`]: the log-moment function ψ and the recurrence regime
//! * [`walk`]: the walk and its online observables
//! * [`exact`]: exact hitting quantities on truncated trees
//! * [`brw`]: checks on the branching random walk formed by the potential
//! * [`harness`]: replica-parallel experiments and limit estimators
//! * [`cli`]: the `rwre` command line

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alias;
pub mod brw;
pub mod cli;
pub mod env;
pub mod error;
pub mod exact;
pub mod harness;
pub mod json;
pub mod numeric;
pub mod regime;
pub mod rng;
pub mod walk;

pub use env::{Environment, EnvironmentSpec, OffspringLaw, TreeArena, VertexId, WeightLaw};
pub use error::{Error, Result};
