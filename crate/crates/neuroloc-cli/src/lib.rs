//! Experiment harness for the neuroloc solvers: configure a head model,
//! source, and noise level; sweep lambda (and the depth exponent p) per
//! solver; and emit machine-readable localization-error results.

pub mod config;
pub mod emit;
pub mod sweep;

pub use config::{builtin_config, ExperimentConfig};
pub use emit::{emit_slices, emit_sweep_plotdata, emit_table};
pub use sweep::{run_experiment, SweepResult};
