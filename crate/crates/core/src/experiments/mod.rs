//! Empirical counterparts of the convergence results.
//!
//! The minimax lower bound for non-shared prompts is not testable directly.
//! [`witness`] instead checks its constructive core: a measure sequence whose
//! density error vanishes faster than its Voronoi loss.

mod l2;
mod slope;
mod sweep;
pub mod witness;

pub use l2::{density_l2_error, l2_norm_mc};
pub use slope::{fit_slope, SlopeFit};
pub use sweep::{run_sweep, Aggregate, CellPlan, CellRecord, Series, SweepResult, SweepSpec};
pub use witness::{witness_loss_closed_form, witness_sequence, witness_table, WitnessRow};
