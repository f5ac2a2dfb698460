//! Throughput experiments over the simulated card and the fit of the bus
//! model constants behind them.

pub mod calibrate;
pub mod matrix;
pub mod model;

pub use calibrate::{calibrate, Anchors, Calibration, CalibrationError, Params, SearchSpace};
pub use matrix::{run_cell, run_matrix, write_csv, BenchConfig, MatrixConfig, ThroughputSample, CSV_HEADER};
pub use model::expected_mbps;
