//! Expected throughput of a cell under the bus model, without simulation.
//!
//! Each command of `c` bytes takes the same simulated time whether or not it
//! is hit by an error, and is repeated until it gets through, so the expected
//! rate is `c (1 - p) / t`.

use netsd_core::bus::{negotiate_mode, BusModel, Caps, Direction};

use crate::matrix::BenchConfig;

pub fn expected_mbps(
    bus: &BusModel,
    config: BenchConfig,
    direction: Direction,
    block_size: usize,
    max_command_bytes: usize,
) -> f64 {
    let cfg = config.bus_config();
    let mode = negotiate_mode(&cfg, Caps::FULL, Caps::FULL);
    let c = block_size.min(max_command_bytes) as u64;
    let t = bus.command_time(&cfg, &mode, c, direction);
    let p = bus.block_error_probability(&cfg, &mode, c, direction);
    c as f64 * (1.0 - p) / t
}
