//! Clipped consensus-based optimization with fixed noise intensity
//! `sigma^2 = gamma / alpha`, its Gaussian mean-field flow, and the
//! experiments that probe its scaling laws.

pub mod consensus;
pub mod constants;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod harness;
pub mod meanfield;
pub mod metrics;
pub mod objectives;
pub mod rng;

pub use consensus::{clip, consensus_point, global_best, softmin_weights, WeightVector};
pub use dynamics::{cbo_step, init_particles, run_cbo, CboConfig, ParticleSystem, RunRecord};
pub use error::{CboError, Result};
pub use objectives::{builtin, ObjectiveSpec};
