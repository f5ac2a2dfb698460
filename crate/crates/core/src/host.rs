//! Simulated host controller on one switch port: initialization, chunked
//! multi-block transfers with retries, and throughput measurement in
//! simulated time.

use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::arbiter::{Arbiter, ArbiterError, Step};
use crate::blockdev::{check_access, BlockDevice, BlockError, SECTOR};
use crate::bus::{frames_valid, negotiate_mode, Caps, Direction, TransferMode};
use crate::crc::crc16;
use crate::sd::{cmd, csd_capacity, token, ResponseKind, SdCommand, SdResponse, BLOCK_LEN, HCS, R1};
use crate::switch::PortId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HostConfig {
    /// Retries per command after the first attempt.
    pub retry_limit: u32,
    /// Larger chunks are split into commands of at most this size.
    pub max_command_bytes: usize,
    /// Enable CRC checking on the card and verify read data.
    pub crc: bool,
    /// Re-run initialization when the card turns out to have been repowered.
    pub auto_reinit: bool,
    pub init_poll_limit: u32,
}

impl Default for HostConfig {
    fn default() -> Self {
        HostConfig {
            retry_limit: 8,
            max_command_bytes: 64 * 1024,
            crc: true,
            auto_reinit: true,
            init_poll_limit: 1000,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct HostStats {
    pub attempts: u64,
    pub retries: u64,
    pub crc_errors: u64,
    pub timeouts: u64,
    pub reinits: u64,
    pub bytes_ok: u64,
    pub elapsed_us: f64,
}

#[derive(Debug, Error)]
pub enum HostError {
    #[error("no response from the card; the port does not hold the grant")]
    NoGrant,
    #[error("gave up after {attempts} attempts")]
    RetriesExhausted { attempts: u32 },
    #[error("block {lba} is beyond the end of the card")]
    AddressError { lba: u64 },
    #[error("card rejected the request: {0}")]
    CardError(String),
    #[error("card is not initialized")]
    NotInitialized,
    #[error("chunk size {0} must be a positive multiple of 512")]
    InvalidChunk(usize),
    #[error(transparent)]
    Arbiter(#[from] ArbiterError),
}

enum Fail {
    Timeout,
    Crc,
    NeedsInit,
    Fatal(HostError),
}

impl From<HostError> for Fail {
    fn from(e: HostError) -> Self {
        Fail::Fatal(e)
    }
}

impl From<ArbiterError> for Fail {
    fn from(e: ArbiterError) -> Self {
        Fail::Fatal(e.into())
    }
}

#[derive(Debug)]
pub struct HostSession {
    arbiter: Arc<Arbiter>,
    port: PortId,
    config: HostConfig,
    mode: Option<TransferMode>,
    capacity_blocks: u64,
    needs_stop: bool,
    stats: HostStats,
}

impl HostSession {
    pub fn new(arbiter: Arc<Arbiter>, port: PortId, config: HostConfig) -> Self {
        HostSession {
            arbiter,
            port,
            config,
            mode: None,
            capacity_blocks: 0,
            needs_stop: false,
            stats: HostStats::default(),
        }
    }

    pub fn port(&self) -> PortId {
        self.port
    }

    pub fn negotiated_mode(&self) -> Option<TransferMode> {
        self.mode
    }

    pub fn stats(&self) -> HostStats {
        self.stats
    }

    pub fn config(&self) -> &HostConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut HostConfig {
        &mut self.config
    }

    pub fn capacity_blocks(&self) -> u64 {
        self.capacity_blocks
    }

    pub fn arbiter(&self) -> &Arc<Arbiter> {
        &self.arbiter
    }

    /// Retry budget in simulated time: every failed attempt costs at least
    /// one timeout when the path is dead.
    pub fn retry_budget_us(&self) -> f64 {
        f64::from(self.config.retry_limit) * self.arbiter.lock().bus().timing.timeout_us
    }

    fn account<T>(&mut self, step: Step<T>) -> Option<T> {
        self.stats.elapsed_us += step.elapsed_us;
        step.value
    }

    fn command(&mut self, index: u8, arg: u32) -> Result<Option<SdResponse>, HostError> {
        let step = self.arbiter.lock().command(self.port, &SdCommand::new(index, arg))?;
        Ok(self.account(step))
    }

    fn app_command(&mut self, index: u8, arg: u32) -> Result<Option<SdResponse>, HostError> {
        match self.command(cmd::APP_CMD, 0)? {
            None => Ok(None),
            Some(_) => {
                let step = self.arbiter.lock().command(self.port, &SdCommand::app(index, arg))?;
                Ok(self.account(step))
            }
        }
    }

    /// Runs the initialization sequence and switches to the best bus mode.
    pub fn init(&mut self) -> Result<TransferMode, HostError> {
        self.mode = None;
        let mut only_timeouts = true;
        for attempt in 0..=self.config.retry_limit {
            if attempt > 0 {
                self.stats.retries += 1;
            }
            match self.try_init() {
                Ok(m) => return Ok(m),
                Err(Fail::Timeout) => self.stats.timeouts += 1,
                Err(Fail::Crc) => {
                    only_timeouts = false;
                    self.stats.crc_errors += 1;
                }
                Err(Fail::NeedsInit) => only_timeouts = false,
                Err(Fail::Fatal(e)) => return Err(e),
            }
        }
        Err(if only_timeouts {
            HostError::NoGrant
        } else {
            HostError::RetriesExhausted {
                attempts: self.config.retry_limit + 1,
            }
        })
    }

    fn try_init(&mut self) -> Result<TransferMode, Fail> {
        self.mode = None;
        self.needs_stop = false;
        let r = self.command(cmd::GO_IDLE_STATE, 0)?.ok_or(Fail::Timeout)?;
        if r.status() != Some(R1(R1::IN_IDLE)) {
            return Err(Fail::Fatal(HostError::CardError(format!(
                "CMD0 answered {:?}",
                r.status()
            ))));
        }
        let r = self.command(cmd::SEND_IF_COND, 0x1AA)?.ok_or(Fail::Timeout)?;
        if r.word() != Some(0x1AA) {
            return Err(Fail::Fatal(HostError::CardError(
                "interface condition not echoed".into(),
            )));
        }
        let mut ready = false;
        for _ in 0..self.config.init_poll_limit {
            let r = self.app_command(cmd::SD_SEND_OP_COND, HCS)?.ok_or(Fail::Timeout)?;
            match r.status() {
                Some(R1(0)) => {
                    ready = true;
                    break;
                }
                Some(s) if !s.is_error() => continue,
                s => return Err(Fail::Fatal(HostError::CardError(format!("ACMD41 answered {s:?}")))),
            }
        }
        if !ready {
            return Err(Fail::Fatal(HostError::CardError("card stayed busy".into())));
        }
        let r = self.command(cmd::READ_OCR, 0)?.ok_or(Fail::Timeout)?;
        if r.word().is_none_or(|ocr| ocr & (1 << 30) == 0) {
            return Err(Fail::Fatal(HostError::CardError("not a high-capacity card".into())));
        }
        if self.config.crc {
            self.command(cmd::CRC_ON_OFF, 1)?.ok_or(Fail::Timeout)?;
        }
        let r = self.command(cmd::SEND_CSD, 0)?.ok_or(Fail::Timeout)?;
        if r.status().is_none_or(|s| s.is_error()) {
            return Err(Fail::NeedsInit);
        }
        let step = self.arbiter.lock().read_data(self.port, 1, self.config.crc)?;
        let data = self.account(step).ok_or(Fail::Timeout)?;
        let blk = data
            .blocks
            .first()
            .filter(|b| b.kind == ResponseKind::DataBlock)
            .ok_or(Fail::Timeout)?;
        if self.config.crc && !frames_valid(&blk.payload, blk.payload.len()) {
            return Err(Fail::Crc);
        }
        let csd: [u8; 16] = blk.data().and_then(|d| d.try_into().ok()).ok_or(Fail::Crc)?;
        self.capacity_blocks = csd_capacity(&csd) / BLOCK_LEN as u64;
        self.command(cmd::SET_BLOCKLEN, BLOCK_LEN as u32)?
            .ok_or(Fail::Timeout)?;

        let mut bed = self.arbiter.lock();
        let cfg = bed.port_config(self.port)?;
        let host = Caps {
            uhs: cfg.host_supports_uhs,
            high_speed: true,
        };
        let mode = negotiate_mode(&cfg, bed.card_caps(), host);
        bed.set_mode(self.port, mode)?;
        drop(bed);
        self.mode = Some(mode);
        Ok(mode)
    }

    fn with_retries<T>(&mut self, mut attempt: impl FnMut(&mut Self) -> Result<T, Fail>) -> Result<T, HostError> {
        let mut only_timeouts = true;
        // A successful reinit re-runs the operation without using up an attempt, a bounded number of times.
        let mut reinit_grace = 2;
        let mut n = 0;
        while n <= self.config.retry_limit {
            self.stats.attempts += 1;
            if n > 0 {
                self.stats.retries += 1;
            }
            n += 1;
            match attempt(self) {
                Ok(v) => return Ok(v),
                Err(Fail::Timeout) => {
                    self.stats.timeouts += 1;
                    self.needs_stop = true;
                }
                Err(Fail::Crc) => {
                    only_timeouts = false;
                    self.stats.crc_errors += 1;
                    self.needs_stop = true;
                }
                Err(Fail::NeedsInit) => {
                    only_timeouts = false;
                    if !self.config.auto_reinit {
                        self.mode = None;
                        return Err(HostError::NotInitialized);
                    }
                    self.stats.reinits += 1;
                    match self.try_init() {
                        Ok(_) if reinit_grace > 0 => {
                            reinit_grace -= 1;
                            n -= 1;
                        }
                        Ok(_) => {}
                        Err(Fail::Timeout) => self.stats.timeouts += 1,
                        Err(Fail::Crc) => self.stats.crc_errors += 1,
                        Err(Fail::NeedsInit) => {}
                        Err(Fail::Fatal(e)) => return Err(e),
                    }
                }
                Err(Fail::Fatal(e)) => return Err(e),
            }
        }
        Err(if only_timeouts {
            HostError::NoGrant
        } else {
            HostError::RetriesExhausted {
                attempts: self.config.retry_limit + 1,
            }
        })
    }

    fn stop_if_needed(&mut self) -> Result<(), Fail> {
        if self.needs_stop && self.command(cmd::STOP_TRANSMISSION, 0)?.is_some() {
            self.needs_stop = false;
        }
        Ok(())
    }

    fn check_r1(r: &SdResponse, lba: u64) -> Result<(), Fail> {
        match r.status() {
            Some(R1(0)) => Ok(()),
            Some(s) if s.contains(R1::ILLEGAL_COMMAND) || s.in_idle() => Err(Fail::NeedsInit),
            Some(s) if s.contains(R1::ADDRESS_ERROR) || s.contains(R1::PARAMETER_ERROR) => {
                Err(Fail::Fatal(HostError::AddressError { lba }))
            }
            Some(s) if s.contains(R1::COM_CRC_ERROR) => Err(Fail::Crc),
            s => Err(Fail::Fatal(HostError::CardError(format!("{s:?}")))),
        }
    }

    fn read_once(&mut self, lba: u64, nblk: u32) -> Result<Vec<u8>, Fail> {
        self.stop_if_needed()?;
        let single = nblk == 1;
        let index = if single {
            cmd::READ_SINGLE_BLOCK
        } else {
            cmd::READ_MULTIPLE_BLOCK
        };
        let r = self.command(index, lba as u32)?.ok_or(Fail::Timeout)?;
        Self::check_r1(&r, lba)?;
        self.needs_stop = !single;
        let step = self.arbiter.lock().read_data(self.port, nblk, self.config.crc)?;
        let data = self.account(step).ok_or(Fail::Timeout)?;
        let mut out = Vec::with_capacity(nblk as usize * BLOCK_LEN);
        for b in &data.blocks {
            match b.kind {
                ResponseKind::DataBlock => {
                    if self.config.crc && !frames_valid(&b.payload, b.payload.len()) {
                        return Err(Fail::Crc);
                    }
                    out.extend_from_slice(b.data().unwrap_or_default());
                }
                ResponseKind::ErrorToken if b.token_byte() == Some(token::ERR_OUT_OF_RANGE) => {
                    return Err(Fail::Fatal(HostError::AddressError { lba }));
                }
                _ => return Err(Fail::Fatal(HostError::CardError(format!("{b:?}")))),
            }
        }
        if out.len() != nblk as usize * BLOCK_LEN {
            return Err(Fail::Timeout);
        }
        if !single && self.command(cmd::STOP_TRANSMISSION, 0)?.is_some() {
            self.needs_stop = false;
        }
        Ok(out)
    }

    fn write_once(&mut self, lba: u64, data: &[u8]) -> Result<(), Fail> {
        self.stop_if_needed()?;
        let nblk = data.len() / BLOCK_LEN;
        let single = nblk == 1;
        let index = if single {
            cmd::WRITE_BLOCK
        } else {
            cmd::WRITE_MULTIPLE_BLOCK
        };
        let r = self.command(index, lba as u32)?.ok_or(Fail::Timeout)?;
        Self::check_r1(&r, lba)?;
        self.needs_stop = !single;
        let mut frames = Vec::with_capacity(nblk * (BLOCK_LEN + 2));
        for block in data.chunks(BLOCK_LEN) {
            frames.extend_from_slice(block);
            frames.extend_from_slice(&crc16(block).to_be_bytes());
        }
        let step = self.arbiter.lock().write_data(self.port, frames)?;
        let ack = self.account(step).ok_or(Fail::Timeout)?;
        if !single {
            if self.command(cmd::STOP_TRANSMISSION, 0)?.is_none() {
                return Err(Fail::Timeout);
            }
            self.needs_stop = false;
        }
        if ack.tokens.len() != nblk {
            return Err(Fail::Timeout);
        }
        match ack.tokens.iter().find(|&&t| t != token::DATA_ACCEPTED) {
            None => Ok(()),
            Some(_) if lba + nblk as u64 > self.capacity_blocks => Err(Fail::Fatal(HostError::AddressError { lba })),
            Some(_) => Err(Fail::Crc),
        }
    }

    fn check_request(&self, lba: u64, nblocks: u64, chunk_bytes: usize) -> Result<(), HostError> {
        if chunk_bytes == 0 || chunk_bytes % BLOCK_LEN != 0 {
            return Err(HostError::InvalidChunk(chunk_bytes));
        }
        if self.mode.is_none() {
            return Err(HostError::NotInitialized);
        }
        if lba.checked_add(nblocks).is_none_or(|end| end > self.capacity_blocks) {
            return Err(HostError::AddressError { lba });
        }
        Ok(())
    }

    fn command_blocks(&self, chunk_bytes: usize) -> u64 {
        (chunk_bytes.min(self.config.max_command_bytes.max(BLOCK_LEN)) / BLOCK_LEN) as u64
    }

    /// Reads `nblocks` blocks from `lba`, issuing chunks of `chunk_bytes`.
    pub fn read(&mut self, lba: u64, nblocks: u64, chunk_bytes: usize) -> Result<Vec<u8>, HostError> {
        self.check_request(lba, nblocks, chunk_bytes)?;
        let per_cmd = self.command_blocks(chunk_bytes);
        let mut out = Vec::with_capacity(nblocks as usize * BLOCK_LEN);
        let mut at = lba;
        while at < lba + nblocks {
            let n = per_cmd.min(lba + nblocks - at) as u32;
            let data = self.with_retries(|h| h.read_once(at, n))?;
            self.stats.bytes_ok += data.len() as u64;
            out.extend_from_slice(&data);
            at += u64::from(n);
        }
        Ok(out)
    }

    /// Writes `data` (a whole number of blocks) at `lba`.
    pub fn write(&mut self, lba: u64, data: &[u8], chunk_bytes: usize) -> Result<(), HostError> {
        if data.len() % BLOCK_LEN != 0 {
            return Err(HostError::InvalidChunk(data.len()));
        }
        let nblocks = (data.len() / BLOCK_LEN) as u64;
        self.check_request(lba, nblocks, chunk_bytes)?;
        let per_cmd = self.command_blocks(chunk_bytes) as usize * BLOCK_LEN;
        for (i, piece) in data.chunks(per_cmd).enumerate() {
            let at = lba + (i * per_cmd / BLOCK_LEN) as u64;
            self.with_retries(|h| h.write_once(at, piece))?;
            self.stats.bytes_ok += piece.len() as u64;
        }
        Ok(())
    }

    /// Moves `total_bytes` from block 0 in chunks of `chunk_bytes` and
    /// returns MByte/s over the simulated time this took, retries included.
    pub fn throughput(&mut self, direction: Direction, total_bytes: u64, chunk_bytes: usize) -> Result<f64, HostError> {
        if chunk_bytes == 0 || chunk_bytes % BLOCK_LEN != 0 {
            return Err(HostError::InvalidChunk(chunk_bytes));
        }
        let before = self.stats;
        let chunk = chunk_bytes as u64;
        let mut offset = 0;
        let mut buf = Vec::new();
        while offset < total_bytes {
            let len = chunk.min(total_bytes - offset);
            let lba = offset / BLOCK_LEN as u64;
            match direction {
                Direction::Read => {
                    self.read(lba, len.div_ceil(BLOCK_LEN as u64), chunk_bytes)?;
                }
                Direction::Write => {
                    buf.clear();
                    buf.extend((0..len.div_ceil(BLOCK_LEN as u64) * BLOCK_LEN as u64).map(|i| (i ^ lba) as u8));
                    self.write(lba, &buf, chunk_bytes)?;
                }
            }
            offset += len;
        }
        let bytes = self.stats.bytes_ok - before.bytes_ok;
        let elapsed = self.stats.elapsed_us - before.elapsed_us;
        Ok(if elapsed > 0.0 {
            bytes as f64 / elapsed
        } else {
            f64::INFINITY
        })
    }
}

impl BlockDevice for HostSession {
    fn block_count(&self) -> u64 {
        self.capacity_blocks
    }

    fn read_blocks(&mut self, lba: u64, buf: &mut [u8]) -> Result<(), BlockError> {
        check_access(self.capacity_blocks, lba, buf.len())?;
        let chunk = self.config.max_command_bytes;
        let data = self
            .read(lba, (buf.len() / SECTOR) as u64, chunk)
            .map_err(|e| BlockError::Io(e.to_string()))?;
        buf.copy_from_slice(&data);
        Ok(())
    }

    fn write_blocks(&mut self, lba: u64, data: &[u8]) -> Result<(), BlockError> {
        check_access(self.capacity_blocks, lba, data.len())?;
        let chunk = self.config.max_command_bytes;
        self.write(lba, data, chunk).map_err(|e| BlockError::Io(e.to_string()))
    }

    fn flush(&mut self) -> Result<(), BlockError> {
        self.arbiter.lock().flush().map_err(|e| BlockError::Io(e.to_string()))
    }
}
