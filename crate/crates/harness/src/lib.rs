//! Experiment grids over the markpaint toolkit: configuration, runners,
//! CSV output and plots. The `markpaint` binary is a thin layer over this.

pub mod config;
mod error;
pub mod plot;
pub mod runs;
pub mod table;

pub use config::{ExperimentConfig, Prepared, StepSpec};
pub use error::{HarnessError, Result};
pub use plot::emit_plots;
pub use runs::{run_attack_grid, run_defense_sweep, run_eot_experiment, run_transfer_matrix, RunRecord};
