//! Experiment orchestration: configuration, the training loop, metrics and
//! sweeps.
//!
//! Loop layout in [`run`], one call site per step:
//! - act with the current policy and store the sample in the real buffer
//! - every `train_every` steps: train the ensemble, generate `rollout_batch`
//!   branched rollouts, then run `g2` adaptation updates
//! - `policy_updates` SAC steps on mixed batches

mod config;
mod metrics;
mod run;
mod sweep;

pub use config::{ModelKind, RunConfig};
pub use metrics::{read_csv, CsvSink, MetricsRecord, CSV_HEADER};
pub use run::{compounding_error, run, run_to_csv, trajectory_compounding_error, HORIZONS};
pub use sweep::{parse_value, sweep, valid_axes, with_axis, ManifestRow, AXIS_ALIASES};
