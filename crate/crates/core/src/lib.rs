//! Solvers for optimal transport and optimal partitions on finitely supported
//! measures.
//!
//! The crate is organised by problem family:
//!
//! * [`measures`] holds the shared data types (measures, utility fields,
//!   capacities, labelings).
//! * [`discrete_ot`] solves finite Kantorovich and assignment problems and
//!   certifies their optimality.
//! * [`matching`] covers ordinal and partially transferable stable matching.
//! * [`semidiscrete`] partitions a discrete measure among agents with capacity
//!   constraints through the convex dual in the prices.
//! * [`multipartition`] deals with vector valued capacities.
//! * [`interpolated`] approximates interpolated costs through finitely many
//!   hub sites.
//! * [`games`] builds coalition games on top of partition values.
//!
//! Every randomized routine takes an explicit seed.

pub mod discrete_ot;
pub mod error;
pub mod games;
pub mod interpolated;
pub mod io;
pub mod matching;
pub mod measures;
pub mod multipartition;
pub mod semidiscrete;

mod lp;
mod smooth;

pub use error::{Error, Result};
pub use measures::{
    classify_regime, discretize_density, restrict, total_mass, CapacityMode, CapacitySpec,
    DiscreteMeasure, FieldValues, PartitionLabeling, Regime, UtilityField, WeakPartition,
};

/// Configures the global rayon pool from `PARTRANS_THREADS` when it is set.
///
/// Returns the number of threads requested, or `None` when the variable is
/// absent or unparsable. Calling it more than once is harmless.
pub fn init_threads_from_env() -> Option<usize> {
    let n = std::env::var("PARTRANS_THREADS").ok()?.trim().parse::<usize>().ok()?;
    if n == 0 {
        return None;
    }
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Some(n)
}
