//! The block-size by configuration throughput sweep.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::thread;

use log::{debug, warn};
use netsd_core::bus::{BusConfig, BusModel, Direction};
use netsd_core::{Arbiter, CardConfig, HostConfig, HostError, HostSession, MemBacking, PortId, Testbed, TestbedConfig};
use serde::Serialize;

pub const CSV_HEADER: &str = "direction,block_size,config,mbps,retries";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum BenchConfig {
    /// Card plugged into the host directly, no switch and no cable.
    Baseline,
    SwitchNoPullups,
    SwitchWithPullups,
}

impl BenchConfig {
    pub const ALL: [BenchConfig; 3] = [
        BenchConfig::Baseline,
        BenchConfig::SwitchNoPullups,
        BenchConfig::SwitchWithPullups,
    ];

    pub fn bus_config(self) -> BusConfig {
        match self {
            BenchConfig::Baseline => BusConfig::direct(),
            BenchConfig::SwitchNoPullups => BusConfig::switched(false),
            BenchConfig::SwitchWithPullups => BusConfig::switched(true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BenchConfig::Baseline => "Baseline",
            BenchConfig::SwitchNoPullups => "SwitchNoPullups",
            BenchConfig::SwitchWithPullups => "SwitchWithPullups",
        }
    }
}

impl fmt::Display for BenchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BenchConfig::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown configuration {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThroughputSample {
    pub direction: Direction,
    pub block_size: usize,
    pub config: BenchConfig,
    /// MByte/s (10^6 bytes) of simulated time; 0 when the cell gave up.
    pub mbps: f64,
    pub retries: u64,
    /// The host ran out of retries somewhere in the cell.
    #[serde(skip)]
    pub exhausted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixConfig {
    pub bus: BusModel,
    pub block_sizes: Vec<usize>,
    pub directions: Vec<Direction>,
    pub configs: Vec<BenchConfig>,
    /// Bytes moved per cell.
    pub total_bytes: u64,
    pub seed: u64,
    pub retry_limit: u32,
    /// Largest single command the host issues.
    pub max_command_bytes: usize,
    /// Run cells on all cores. Output is identical to a sequential run.
    pub parallel: bool,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        MatrixConfig {
            bus: BusModel::default(),
            block_sizes: (12..=20).map(|s| 1usize << s).collect(),
            directions: vec![Direction::Read, Direction::Write],
            configs: BenchConfig::ALL.to_vec(),
            total_bytes: 8 << 20,
            seed: 2024,
            retry_limit: 64,
            max_command_bytes: HostConfig::default().max_command_bytes,
            parallel: false,
        }
    }
}

impl MatrixConfig {
    /// Every (direction, block size, config) cell in output order.
    pub fn cells(&self) -> Vec<(Direction, usize, BenchConfig)> {
        let mut out = Vec::new();
        for &d in &self.directions {
            for &c in &self.configs {
                for &b in &self.block_sizes {
                    out.push((d, b, c));
                }
            }
        }
        out
    }

    /// Seed for one cell. All cells share the matrix seed, so cells whose
    /// command streams coincide (block sizes above the command cap) see the
    /// same noise and differ only through the configuration.
    pub fn cell_seed(&self, _direction: Direction, _block_size: usize, _config: BenchConfig) -> u64 {
        self.seed
    }
}

/// Runs one cell on a fresh card.
pub fn run_cell(
    m: &MatrixConfig,
    direction: Direction,
    block_size: usize,
    config: BenchConfig,
) -> Result<ThroughputSample, HostError> {
    let capacity = m.total_bytes.next_multiple_of(block_size as u64).max(1 << 20);
    let bed_cfg = TestbedConfig {
        card: CardConfig {
            capacity_bytes: capacity,
            ..Default::default()
        },
        bus: m.bus,
        port_configs: vec![config.bus_config(); 2],
        seed: m.cell_seed(direction, block_size, config),
        log_capacity: 64,
        record_tx: false,
        ..Default::default()
    };
    let mut bed = Testbed::new(bed_cfg, Box::new(MemBacking::zeroed(capacity))).map_err(HostError::from)?;
    bed.release();
    let host_cfg = HostConfig {
        retry_limit: m.retry_limit,
        max_command_bytes: m.max_command_bytes,
        ..Default::default()
    };
    let mut host = HostSession::new(Arbiter::new(bed), PortId::DUT, host_cfg);
    host.init()?;
    let before = host.stats().retries;
    let result = host.throughput(direction, m.total_bytes, block_size);
    let retries = host.stats().retries - before;
    let (mbps, exhausted) = match result {
        Ok(v) => (v, false),
        Err(HostError::RetriesExhausted { attempts }) => {
            warn!("{direction} {block_size} {config}: gave up after {attempts} attempts");
            (0.0, true)
        }
        Err(e) => return Err(e),
    };
    debug!("{direction} {block_size} {config}: {mbps:.2} MB/s, {retries} retries");
    Ok(ThroughputSample {
        direction,
        block_size,
        config,
        mbps,
        retries,
        exhausted,
    })
}

pub fn run_matrix(m: &MatrixConfig) -> Result<Vec<ThroughputSample>, HostError> {
    let cells = m.cells();
    if !m.parallel {
        return cells.into_iter().map(|(d, b, c)| run_cell(m, d, b, c)).collect();
    }
    let workers = thread::available_parallelism()
        .map_or(4, |n| n.get())
        .min(cells.len().max(1));
    let mut slots: Vec<Option<Result<ThroughputSample, HostError>>> = Vec::new();
    slots.resize_with(cells.len(), || None);
    thread::scope(|s| {
        let chunks: Vec<_> = slots.chunks_mut(cells.len().div_ceil(workers)).collect();
        let mut start = 0;
        for chunk in chunks {
            let mine = &cells[start..start + chunk.len()];
            start += chunk.len();
            s.spawn(move || {
                for (slot, &(d, b, c)) in chunk.iter_mut().zip(mine) {
                    *slot = Some(run_cell(m, d, b, c));
                }
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every cell ran")).collect()
}

pub fn write_csv<W: Write>(out: W, samples: &[ThroughputSample]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in samples {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

/// The sample for one cell, if present.
pub fn find(
    samples: &[ThroughputSample],
    direction: Direction,
    block_size: usize,
    config: BenchConfig,
) -> Option<&ThroughputSample> {
    samples
        .iter()
        .find(|s| s.direction == direction && s.block_size == block_size && s.config == config)
}
