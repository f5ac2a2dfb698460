//! Signal path model between a host port and the card: transfer-mode
//! negotiation, per-bit error rates, and simulated transfer time.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crc::crc16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Read,
    Write,
}

impl Direction {
    fn index(self) -> usize {
        match self {
            Direction::Read => 0,
            Direction::Write => 1,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Read => "read",
            Direction::Write => "write",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModeName {
    Default3V3,
    HighSpeed3V3,
    Uhs1V8,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMode {
    pub name: ModeName,
    pub signal_voltage: f64,
    pub bus_clock_mhz: f64,
    pub bus_width_bits: u32,
}

impl TransferMode {
    pub const DEFAULT_3V3: TransferMode = TransferMode {
        name: ModeName::Default3V3,
        signal_voltage: 3.3,
        bus_clock_mhz: 25.0,
        bus_width_bits: 4,
    };
    pub const HIGH_SPEED_3V3: TransferMode = TransferMode {
        name: ModeName::HighSpeed3V3,
        signal_voltage: 3.3,
        bus_clock_mhz: 50.0,
        bus_width_bits: 4,
    };
    pub const UHS_1V8: TransferMode = TransferMode {
        name: ModeName::Uhs1V8,
        signal_voltage: 1.8,
        bus_clock_mhz: 100.0,
        bus_width_bits: 4,
    };

    /// Line rate in bytes per microsecond (numerically MByte/s).
    pub fn raw_rate(&self) -> f64 {
        self.bus_clock_mhz * f64::from(self.bus_width_bits) / 8.0
    }

    pub fn is_uhs(&self) -> bool {
        self.name == ModeName::Uhs1V8
    }
}

/// Electrical setup of one port's path to the card.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BusConfig {
    /// 3.3 V pull-ups on the switch side, in addition to the host's own.
    pub explicit_pullups: bool,
    pub cable_length_cm: f64,
    /// Ground line between neighbouring data lines.
    pub crosstalk_safe_layout: bool,
    pub host_supports_uhs: bool,
    /// Signals pass through the switch ICs (false for a card plugged in directly).
    pub switched: bool,
}

impl BusConfig {
    pub const REFERENCE_CABLE_CM: f64 = 48.0;

    /// Card plugged straight into the host.
    pub fn direct() -> Self {
        BusConfig {
            explicit_pullups: false,
            cable_length_cm: 0.0,
            crosstalk_safe_layout: true,
            host_supports_uhs: true,
            switched: false,
        }
    }

    /// The evaluated switch board with its 48 cm extension cable.
    pub fn switched(explicit_pullups: bool) -> Self {
        BusConfig {
            explicit_pullups,
            cable_length_cm: Self::REFERENCE_CABLE_CM,
            crosstalk_safe_layout: true,
            host_supports_uhs: true,
            switched: true,
        }
    }
}

impl Default for BusConfig {
    fn default() -> Self {
        Self::switched(false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Caps {
    pub uhs: bool,
    pub high_speed: bool,
}

impl Caps {
    pub const FULL: Caps = Caps {
        uhs: true,
        high_speed: true,
    };
}

/// Picks the bus mode after initialization.
///
/// Pull-ups at 3.3 V rule out the 1.8 V signalling switch and, together with
/// the cable, limit edges to the default-speed clock.
pub fn negotiate_mode(cfg: &BusConfig, card: Caps, host: Caps) -> TransferMode {
    if !cfg.explicit_pullups && card.uhs && host.uhs {
        TransferMode::UHS_1V8
    } else if !cfg.explicit_pullups && card.high_speed && host.high_speed {
        TransferMode::HIGH_SPEED_3V3
    } else {
        TransferMode::DEFAULT_3V3
    }
}

/// Time for one command with `n_bytes` of data, in microseconds.
pub fn simulated_transfer_time(mode: &TransferMode, n_bytes: u64, per_command_overhead_us: f64) -> f64 {
    per_command_overhead_us + n_bytes as f64 / mode.raw_rate()
}

/// Fitted against the published throughput ratios; see `netsd-bench` for the
/// fitting procedure.
pub mod calibrated {
    pub const P_BIT_UHS_READ: f64 = 4.5154e-7;
    pub const P_BIT_UHS_WRITE: f64 = 3.0182e-6;
    pub const PER_COMMAND_OVERHEAD_US: f64 = 250.89;
    pub const SWITCH_INSERTION_US: f64 = 100.0;
    pub const WRITE_BUSY_US: f64 = 1398.44;
}

/// Residual error rate of a 3.3 V path with explicit pull-ups.
pub const P_BIT_PULLUP_FLOOR: f64 = 1e-13;
/// Host-only pull-ups at 3.3 V still see some of the cable's ringing.
pub const HOST_PULLUP_3V3_FACTOR: f64 = 0.05;
pub const UNSAFE_LAYOUT_FACTOR: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingModel {
    pub per_command_overhead_us: f64,
    pub switch_insertion_us: f64,
    pub write_busy_us: f64,
    /// How long a host waits for a response before giving up.
    pub timeout_us: f64,
}

impl Default for TimingModel {
    fn default() -> Self {
        TimingModel {
            per_command_overhead_us: calibrated::PER_COMMAND_OVERHEAD_US,
            switch_insertion_us: calibrated::SWITCH_INSERTION_US,
            write_busy_us: calibrated::WRITE_BUSY_US,
            timeout_us: 100_000.0,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Line {
    Clk,
    Cmd,
    Dat0,
    Dat1,
    Dat2,
    Dat3,
    Power,
}

impl Line {
    pub const ALL: [Line; 7] = [
        Line::Clk,
        Line::Cmd,
        Line::Dat0,
        Line::Dat1,
        Line::Dat2,
        Line::Dat3,
        Line::Power,
    ];
    pub const SIGNALS: [Line; 6] = [Line::Clk, Line::Cmd, Line::Dat0, Line::Dat1, Line::Dat2, Line::Dat3];
    pub const DATA: [Line; 4] = [Line::Dat0, Line::Dat1, Line::Dat2, Line::Dat3];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Line::Clk => "clk",
            Line::Cmd => "cmd",
            Line::Dat0 => "dat0",
            Line::Dat1 => "dat1",
            Line::Dat2 => "dat2",
            Line::Dat3 => "dat3",
            Line::Power => "power",
        }
    }

    pub fn parse(s: &str) -> Option<Line> {
        Line::ALL.into_iter().find(|l| l.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Line {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineState {
    Conductive,
    Disconnected,
}

/// The six signal lines plus the supply of one port. For the supply,
/// `Conductive` means on.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct LineSet {
    states: [LineState; 7],
}

impl LineSet {
    pub fn disconnected() -> Self {
        LineSet {
            states: [LineState::Disconnected; 7],
        }
    }

    pub fn connected() -> Self {
        LineSet {
            states: [LineState::Conductive; 7],
        }
    }

    pub fn get(&self, line: Line) -> LineState {
        self.states[line.index()]
    }

    pub fn set(&mut self, line: Line, state: LineState) {
        self.states[line.index()] = state;
    }

    pub fn is_conductive(&self, line: Line) -> bool {
        self.get(line) == LineState::Conductive
    }

    pub fn power_on(&self) -> bool {
        self.is_conductive(Line::Power)
    }

    pub fn all_signals_conductive(&self) -> bool {
        Line::SIGNALS.iter().all(|&l| self.is_conductive(l))
    }

    pub fn any_conductive(&self) -> bool {
        self.states.contains(&LineState::Conductive)
    }

    pub fn all_disconnected(&self) -> bool {
        !self.any_conductive()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransferStatus {
    Ok,
    CrcDetectedError,
    Timeout,
    SilentCorruption,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferOutcome {
    pub status: TransferStatus,
    pub bytes: Vec<u8>,
    pub elapsed_us: f64,
    pub flipped_bits: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BusError {
    #[error("card supply is off")]
    NoPower,
}

/// Extra channel effects contributed by active faults.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ChannelEffects {
    pub added_delay_us: f64,
    pub corrupt: Option<CorruptEffect>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptEffect {
    /// Per-bit flip probability within each frame.
    pub bit_flip_rate: f64,
    pub max_flips_per_frame: Option<u32>,
    /// Confine each frame's flips to one window of this many bits.
    pub burst_span_bits: Option<u32>,
}

/// One data phase as seen by the bus.
#[derive(Clone, Copy, Debug)]
pub struct TransferRequest<'a> {
    pub cfg: &'a BusConfig,
    pub mode: TransferMode,
    pub lines: &'a LineSet,
    pub direction: Direction,
    /// Whether the receiver checks the CRC-16 trailer of each frame.
    pub crc_checking: bool,
    /// Frame length in bytes including the 2-byte CRC trailer.
    pub frame_len: usize,
    /// Payload bytes the timing and error model are charged for.
    pub data_bytes: u64,
    pub effects: ChannelEffects,
}

/// Error and timing constants of the modelled channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BusModel {
    pub p_bit_uhs_read: f64,
    pub p_bit_uhs_write: f64,
    pub timing: TimingModel,
}

impl Default for BusModel {
    fn default() -> Self {
        BusModel {
            p_bit_uhs_read: calibrated::P_BIT_UHS_READ,
            p_bit_uhs_write: calibrated::P_BIT_UHS_WRITE,
            timing: TimingModel::default(),
        }
    }
}

impl BusModel {
    /// A channel that never errs.
    pub fn noiseless() -> Self {
        BusModel {
            p_bit_uhs_read: 0.0,
            p_bit_uhs_write: 0.0,
            ..Self::default()
        }
    }

    pub fn p_bit(&self, cfg: &BusConfig, mode: &TransferMode, direction: Direction) -> f64 {
        let uhs = [self.p_bit_uhs_read, self.p_bit_uhs_write][direction.index()];
        let base = if mode.is_uhs() {
            uhs
        } else if cfg.explicit_pullups {
            P_BIT_PULLUP_FLOOR
        } else {
            uhs * HOST_PULLUP_3V3_FACTOR
        };
        let mut p = base * cfg.cable_length_cm.max(0.0) / BusConfig::REFERENCE_CABLE_CM;
        if !cfg.crosstalk_safe_layout {
            p *= UNSAFE_LAYOUT_FACTOR;
        }
        p.min(0.5)
    }

    /// Probability that an `n_bytes` transfer suffers at least one bit error.
    pub fn block_error_probability(
        &self,
        cfg: &BusConfig,
        mode: &TransferMode,
        n_bytes: u64,
        direction: Direction,
    ) -> f64 {
        error_probability(self.p_bit(cfg, mode, direction), n_bytes)
    }

    /// Duration of one data command on this path, excluding fault delays.
    pub fn command_time(&self, cfg: &BusConfig, mode: &TransferMode, n_bytes: u64, direction: Direction) -> f64 {
        let mut overhead = self.timing.per_command_overhead_us;
        if cfg.switched {
            overhead += self.timing.switch_insertion_us;
        }
        if direction == Direction::Write {
            overhead += self.timing.write_busy_us;
        }
        simulated_transfer_time(mode, n_bytes, overhead)
    }

    /// Moves `payload` across the channel.
    ///
    /// `noise_rng` drives the calibrated line noise, `fault_rng` the injected
    /// corruption, so that enabling a fault never shifts the noise sequence.
    pub fn transfer<R: Rng + ?Sized, F: Rng + ?Sized>(
        &self,
        noise_rng: &mut R,
        fault_rng: &mut F,
        req: &TransferRequest<'_>,
        mut payload: Vec<u8>,
    ) -> Result<TransferOutcome, BusError> {
        if !req.lines.power_on() {
            return Err(BusError::NoPower);
        }
        let needed = [Line::Clk, Line::Cmd, Line::Dat0, Line::Dat1, Line::Dat2, Line::Dat3];
        if needed.iter().any(|&l| !req.lines.is_conductive(l)) {
            // Without a start bit on every data line the receiver never syncs.
            return Ok(TransferOutcome {
                status: TransferStatus::Timeout,
                bytes: Vec::new(),
                elapsed_us: self.timing.timeout_us,
                flipped_bits: 0,
            });
        }

        let elapsed = self.command_time(req.cfg, &req.mode, req.data_bytes, req.direction) + req.effects.added_delay_us;
        if req.effects.added_delay_us > 0.0 && elapsed >= self.timing.timeout_us {
            return Ok(TransferOutcome {
                status: TransferStatus::Timeout,
                bytes: Vec::new(),
                elapsed_us: self.timing.timeout_us,
                flipped_bits: 0,
            });
        }

        let mut flipped = 0u32;
        let p = self.block_error_probability(req.cfg, &req.mode, req.data_bytes, req.direction);
        if p > 0.0 && !payload.is_empty() && noise_rng.random::<f64>() < p {
            // At least one flip; each further flip with probability 1/2.
            let mut count = 1;
            while count < 64 && noise_rng.random::<bool>() {
                count += 1;
            }
            let nbits = payload.len() * 8;
            for _ in 0..count {
                let bit = noise_rng.random_range(0..nbits);
                payload[bit / 8] ^= 0x80 >> (bit % 8);
                flipped += 1;
            }
        }
        if let Some(c) = req.effects.corrupt {
            flipped += corrupt_frames(fault_rng, &c, &mut payload, req.frame_len.max(1));
        }

        let status = if flipped == 0 {
            TransferStatus::Ok
        } else if req.crc_checking && !frames_valid(&payload, req.frame_len) {
            TransferStatus::CrcDetectedError
        } else {
            TransferStatus::SilentCorruption
        };
        Ok(TransferOutcome {
            status,
            bytes: payload,
            elapsed_us: elapsed,
            flipped_bits: flipped,
        })
    }
}

/// `1 - (1 - p)^(8 n)`, computed without cancellation for tiny `p`.
pub fn error_probability(p_bit: f64, n_bytes: u64) -> f64 {
    if p_bit <= 0.0 || n_bytes == 0 {
        return 0.0;
    }
    if p_bit >= 1.0 {
        return 1.0;
    }
    -f64::exp_m1(8.0 * n_bytes as f64 * f64::ln_1p(-p_bit))
}

/// True when every frame's trailing CRC-16 matches its body.
pub fn frames_valid(payload: &[u8], frame_len: usize) -> bool {
    if frame_len < 2 || payload.len() % frame_len != 0 {
        return false;
    }
    payload.chunks(frame_len).all(|f| {
        let (body, crc) = f.split_at(frame_len - 2);
        crc16(body) == u16::from_be_bytes([crc[0], crc[1]])
    })
}

fn corrupt_frames<R: Rng + ?Sized>(rng: &mut R, c: &CorruptEffect, payload: &mut [u8], frame_len: usize) -> u32 {
    if c.bit_flip_rate <= 0.0 {
        return 0;
    }
    let rate = c.bit_flip_rate.min(1.0);
    let mut total = 0;
    for frame in payload.chunks_mut(frame_len) {
        let nbits = frame.len() * 8;
        let (lo, width) = match c.burst_span_bits {
            Some(span) => {
                let span = (span as usize).clamp(1, nbits);
                (rng.random_range(0..=nbits - span), span)
            }
            None => (0, nbits),
        };
        let limit = c.max_flips_per_frame.unwrap_or(u32::MAX);
        // Walk the window with geometric gaps between flipped bits.
        let mut pos = next_gap(rng, rate);
        let mut flips = 0;
        while pos < width && flips < limit {
            let bit = lo + pos;
            frame[bit / 8] ^= 0x80 >> (bit % 8);
            flips += 1;
            pos += 1 + next_gap(rng, rate);
        }
        total += flips;
    }
    total
}

fn next_gap<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> usize {
    if rate >= 1.0 {
        return 0;
    }
    let u: f64 = rng.random();
    let gap = (f64::ln(1.0 - u) / f64::ln_1p(-rate)).floor();
    if gap.is_finite() && gap < usize::MAX as f64 {
        gap as usize
    } else {
        usize::MAX / 2
    }
}
