//! SPI-mode SD card emulation at the command/response level.
//!
//! The card is a high-capacity (block addressed) card backed by a raw image.
//! Data phases are exposed separately from command handling so the bus layer
//! can sit between them: after a read command the host pulls data blocks with
//! [`SdCard::read_data_block`], after a write command it pushes them with
//! [`SdCard::write_data_block`].

use std::fmt;
use std::io;

use thiserror::Error;

use crate::backing::Backing;
use crate::crc::{crc16, crc7};

pub const BLOCK_LEN: usize = 512;
pub const DEFAULT_CAPACITY: u64 = 64 << 20;
/// The card used in the original evaluation was an 8 GByte SDHC card.
pub const MAX_CAPACITY: u64 = 8 << 30;

/// Command indices of the implemented SPI-mode subset.
pub mod cmd {
    pub const GO_IDLE_STATE: u8 = 0;
    pub const SEND_IF_COND: u8 = 8;
    pub const SEND_CSD: u8 = 9;
    pub const SEND_CID: u8 = 10;
    pub const STOP_TRANSMISSION: u8 = 12;
    pub const SET_BLOCKLEN: u8 = 16;
    pub const READ_SINGLE_BLOCK: u8 = 17;
    pub const READ_MULTIPLE_BLOCK: u8 = 18;
    pub const WRITE_BLOCK: u8 = 24;
    pub const WRITE_MULTIPLE_BLOCK: u8 = 25;
    /// Application command, only valid after `APP_CMD`.
    pub const SD_SEND_OP_COND: u8 = 41;
    pub const APP_CMD: u8 = 55;
    pub const READ_OCR: u8 = 58;
    pub const CRC_ON_OFF: u8 = 59;
}

/// Single-byte tokens of the SPI data phase.
pub mod token {
    pub const START_BLOCK: u8 = 0xFE;
    pub const DATA_ACCEPTED: u8 = 0x05;
    pub const DATA_CRC_ERROR: u8 = 0x0B;
    pub const DATA_WRITE_ERROR: u8 = 0x0D;
    /// Data error token flags.
    pub const ERR_GENERAL: u8 = 0x01;
    pub const ERR_OUT_OF_RANGE: u8 = 0x08;
}

/// ACMD41 argument bit announcing host support for high-capacity cards.
pub const HCS: u32 = 1 << 30;
const OCR_POWER_UP: u32 = 1 << 31;
const OCR_CCS: u32 = 1 << 30;
const OCR_VDD_WINDOW: u32 = 0x00FF_8000;

/// R1 status byte. Bit 7 is always zero.
#[derive(Clone, Copy, PartialEq, Eq, Default)]
pub struct R1(pub u8);

impl R1 {
    pub const IN_IDLE: u8 = 0x01;
    pub const ERASE_RESET: u8 = 0x02;
    pub const ILLEGAL_COMMAND: u8 = 0x04;
    pub const COM_CRC_ERROR: u8 = 0x08;
    pub const ERASE_SEQ_ERROR: u8 = 0x10;
    pub const ADDRESS_ERROR: u8 = 0x20;
    pub const PARAMETER_ERROR: u8 = 0x40;

    pub fn contains(self, flag: u8) -> bool {
        self.0 & flag == flag
    }

    pub fn in_idle(self) -> bool {
        self.contains(Self::IN_IDLE)
    }

    /// Any flag other than the idle bit.
    pub fn is_error(self) -> bool {
        self.0 & !Self::IN_IDLE != 0
    }
}

impl fmt::Debug for R1 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R1({:#04x})", self.0)
    }
}

#[derive(Debug, Error)]
pub enum SdError {
    #[error("card is not powered")]
    NotPowered,
    #[error("card has not completed initialization")]
    NotInitialized,
    #[error("block {lba} is out of range")]
    AddressError { lba: u64 },
    #[error("data CRC mismatch")]
    CrcError,
    #[error("no data phase is pending")]
    NoDataPending,
    #[error("malformed command frame")]
    Framing,
    #[error("capacity {0} is not a positive multiple of 512 within the supported range")]
    InvalidCapacity(u64),
    #[error("backing image: {0}")]
    Io(#[from] io::Error),
}

/// A 48-bit SPI command frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SdCommand {
    pub index: u8,
    pub argument: u32,
    /// 7-bit checksum over the first five frame bytes.
    pub crc7: u8,
    /// Sent as the second half of a CMD55 pair.
    pub is_app_cmd: bool,
}

impl SdCommand {
    pub fn new(index: u8, argument: u32) -> Self {
        let mut cmd = SdCommand {
            index: index & 0x3F,
            argument,
            crc7: 0,
            is_app_cmd: false,
        };
        cmd.crc7 = crc7(&cmd.header());
        cmd
    }

    pub fn app(index: u8, argument: u32) -> Self {
        SdCommand {
            is_app_cmd: true,
            ..Self::new(index, argument)
        }
    }

    /// Replaces the checksum, e.g. to model a corrupted frame.
    pub fn with_crc7(self, crc7: u8) -> Self {
        SdCommand {
            crc7: crc7 & 0x7F,
            ..self
        }
    }

    fn header(&self) -> [u8; 5] {
        let a = self.argument.to_be_bytes();
        [0x40 | (self.index & 0x3F), a[0], a[1], a[2], a[3]]
    }

    pub fn frame(&self) -> [u8; 6] {
        let h = self.header();
        [h[0], h[1], h[2], h[3], h[4], (self.crc7 << 1) | 1]
    }

    /// Parses a frame, checking start, transmission and end bits.
    pub fn parse(frame: &[u8; 6], is_app_cmd: bool) -> Result<Self, SdError> {
        if frame[0] & 0xC0 != 0x40 || frame[5] & 1 != 1 {
            return Err(SdError::Framing);
        }
        Ok(SdCommand {
            index: frame[0] & 0x3F,
            argument: u32::from_be_bytes([frame[1], frame[2], frame[3], frame[4]]),
            crc7: frame[5] >> 1,
            is_app_cmd,
        })
    }

    pub fn crc_valid(&self) -> bool {
        crc7(&self.header()) == self.crc7
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResponseKind {
    R1,
    R1b,
    R3,
    R7,
    DataToken,
    DataBlock,
    ErrorToken,
}

/// Bytes the card returns for one command or data phase.
///
/// R1/R1b carry one status byte; R3/R7 append four register bytes. A data
/// block is the payload followed by its big-endian CRC-16.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SdResponse {
    pub kind: ResponseKind,
    pub payload: Vec<u8>,
}

impl SdResponse {
    fn r1(kind: ResponseKind, r1: u8) -> Self {
        SdResponse {
            kind,
            payload: vec![r1 & 0x7F],
        }
    }

    fn with_word(kind: ResponseKind, r1: u8, word: u32) -> Self {
        let mut payload = vec![r1 & 0x7F];
        payload.extend_from_slice(&word.to_be_bytes());
        SdResponse { kind, payload }
    }

    pub fn data_block(data: &[u8]) -> Self {
        let mut payload = Vec::with_capacity(data.len() + 2);
        payload.extend_from_slice(data);
        payload.extend_from_slice(&crc16(data).to_be_bytes());
        SdResponse {
            kind: ResponseKind::DataBlock,
            payload,
        }
    }

    fn token(kind: ResponseKind, token: u8) -> Self {
        SdResponse {
            kind,
            payload: vec![token],
        }
    }

    /// Status byte for command responses.
    pub fn status(&self) -> Option<R1> {
        match self.kind {
            ResponseKind::R1 | ResponseKind::R1b | ResponseKind::R3 | ResponseKind::R7 => {
                self.payload.first().map(|&b| R1(b))
            }
            _ => None,
        }
    }

    /// Trailing 32-bit register of an R3/R7 response.
    pub fn word(&self) -> Option<u32> {
        match self.kind {
            ResponseKind::R3 | ResponseKind::R7 if self.payload.len() == 5 => Some(u32::from_be_bytes([
                self.payload[1],
                self.payload[2],
                self.payload[3],
                self.payload[4],
            ])),
            _ => None,
        }
    }

    /// Payload of a data block without its CRC trailer.
    pub fn data(&self) -> Option<&[u8]> {
        match self.kind {
            ResponseKind::DataBlock if self.payload.len() >= 2 => Some(&self.payload[..self.payload.len() - 2]),
            _ => None,
        }
    }

    pub fn token_byte(&self) -> Option<u8> {
        match self.kind {
            ResponseKind::DataToken | ResponseKind::ErrorToken => self.payload.first().copied(),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Power {
    Off,
    On,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Uninitialized,
    Idle,
    Ready,
    TransferReady,
    ReadingMulti,
    WritingMulti,
}

impl Phase {
    pub fn is_initialized(self) -> bool {
        matches!(
            self,
            Phase::Ready | Phase::TransferReady | Phase::ReadingMulti | Phase::WritingMulti
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Pending {
    Nothing,
    Register([u8; 16]),
    ReadSingle(u64),
    ReadMulti(u64),
    WriteSingle(u64),
    WriteMulti { next: u64, failed: bool },
}

#[derive(Clone, Copy, Debug)]
pub struct CardConfig {
    pub capacity_bytes: u64,
    /// Number of ACMD41 polls answered "busy" before the card reports ready.
    pub init_polls: u32,
    pub supports_uhs: bool,
}

impl Default for CardConfig {
    fn default() -> Self {
        CardConfig {
            capacity_bytes: DEFAULT_CAPACITY,
            init_polls: 1,
            supports_uhs: true,
        }
    }
}

/// The emulated card.
pub struct SdCard {
    config: CardConfig,
    power: Power,
    phase: Phase,
    block_len: u32,
    cid: [u8; 16],
    csd: [u8; 16],
    ocr: u32,
    crc_checking: bool,
    app_pending: bool,
    seen_if_cond: bool,
    polls_left: u32,
    pending: Pending,
    backing: Box<dyn Backing>,
}

impl fmt::Debug for SdCard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdCard")
            .field("power", &self.power)
            .field("phase", &self.phase)
            .field("capacity_bytes", &self.config.capacity_bytes)
            .field("crc_checking", &self.crc_checking)
            .finish_non_exhaustive()
    }
}

impl SdCard {
    /// Builds a powered-off card over `backing`, which must hold at least
    /// `config.capacity_bytes`.
    pub fn new(config: CardConfig, backing: Box<dyn Backing>) -> Result<Self, SdError> {
        let cap = config.capacity_bytes;
        if cap == 0 || cap % BLOCK_LEN as u64 != 0 || cap > MAX_CAPACITY || backing.len() < cap {
            return Err(SdError::InvalidCapacity(cap));
        }
        Ok(SdCard {
            config,
            power: Power::Off,
            phase: Phase::Uninitialized,
            block_len: BLOCK_LEN as u32,
            cid: build_cid(),
            csd: build_csd(cap),
            ocr: OCR_VDD_WINDOW | OCR_CCS,
            crc_checking: false,
            app_pending: false,
            seen_if_cond: false,
            polls_left: config.init_polls,
            pending: Pending::Nothing,
            backing,
        })
    }

    pub fn power(&self) -> Power {
        self.power
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.config.capacity_bytes
    }

    pub fn block_count(&self) -> u64 {
        self.config.capacity_bytes / BLOCK_LEN as u64
    }

    pub fn block_len(&self) -> u32 {
        self.block_len
    }

    pub fn supports_uhs(&self) -> bool {
        self.config.supports_uhs
    }

    pub fn cid(&self) -> [u8; 16] {
        self.cid
    }

    pub fn csd(&self) -> [u8; 16] {
        self.csd
    }

    pub fn ocr(&self) -> u32 {
        self.ocr
    }

    pub fn crc_checking(&self) -> bool {
        self.crc_checking
    }

    /// Drives the card's supply. Switching off abandons any multi-block
    /// operation and returns the interface to its uninitialized state; the
    /// image is never touched.
    pub fn power_set(&mut self, on: bool) {
        match (on, self.power) {
            (false, _) => {
                self.power = Power::Off;
                self.reset_interface();
                self.phase = Phase::Uninitialized;
            }
            (true, Power::Off) => {
                self.power = Power::On;
                self.reset_interface();
                self.phase = Phase::Uninitialized;
            }
            (true, Power::On) => {}
        }
    }

    fn reset_interface(&mut self) {
        self.crc_checking = false;
        self.app_pending = false;
        self.seen_if_cond = false;
        self.polls_left = self.config.init_polls;
        self.pending = Pending::Nothing;
        self.ocr &= !OCR_POWER_UP;
    }

    pub fn flush(&mut self) -> Result<(), SdError> {
        Ok(self.backing.flush()?)
    }

    /// Executes one command and returns its response.
    pub fn handle_command(&mut self, cmd: &SdCommand) -> Result<SdResponse, SdError> {
        use ResponseKind as K;

        if self.power == Power::Off {
            return Err(SdError::NotPowered);
        }
        let app = std::mem::take(&mut self.app_pending);
        let idle = if self.phase == Phase::Idle { R1::IN_IDLE } else { 0 };

        // CMD0 before SPI selection and CMD8 are always CRC protected.
        let crc_required = self.crc_checking
            || cmd.index == cmd::SEND_IF_COND
            || (cmd.index == cmd::GO_IDLE_STATE && self.phase == Phase::Uninitialized);
        if crc_required && !cmd.crc_valid() {
            return Ok(SdResponse::r1(K::R1, idle | R1::COM_CRC_ERROR));
        }

        if cmd.index == cmd::GO_IDLE_STATE {
            self.reset_interface();
            self.phase = Phase::Idle;
            return Ok(SdResponse::r1(K::R1, R1::IN_IDLE));
        }

        match self.phase {
            Phase::Uninitialized => return Ok(SdResponse::r1(K::R1, R1::ILLEGAL_COMMAND)),
            Phase::ReadingMulti | Phase::WritingMulti => {
                return Ok(if cmd.index == cmd::STOP_TRANSMISSION && !app {
                    self.pending = Pending::Nothing;
                    self.phase = Phase::TransferReady;
                    SdResponse::r1(K::R1b, 0)
                } else {
                    SdResponse::r1(K::R1, R1::ILLEGAL_COMMAND)
                });
            }
            _ => {}
        }

        let resp = match (app, cmd.index) {
            (false, cmd::SEND_IF_COND) if self.phase == Phase::Idle => {
                self.seen_if_cond = true;
                SdResponse::with_word(K::R7, idle, cmd.argument & 0xFFF)
            }
            (false, cmd::APP_CMD) => {
                self.app_pending = true;
                SdResponse::r1(K::R1, idle)
            }
            (true, cmd::SD_SEND_OP_COND) => {
                if self.phase == Phase::Idle {
                    if !self.seen_if_cond || cmd.argument & HCS == 0 {
                        // A high-capacity card never leaves idle for a host without HCS.
                        SdResponse::r1(K::R1, R1::IN_IDLE)
                    } else if self.polls_left > 0 {
                        self.polls_left -= 1;
                        SdResponse::r1(K::R1, R1::IN_IDLE)
                    } else {
                        self.phase = Phase::Ready;
                        self.ocr |= OCR_POWER_UP;
                        SdResponse::r1(K::R1, 0)
                    }
                } else {
                    SdResponse::r1(K::R1, 0)
                }
            }
            (false, cmd::READ_OCR) => SdResponse::with_word(K::R3, idle, self.ocr),
            (false, cmd::CRC_ON_OFF) => {
                self.crc_checking = cmd.argument & 1 == 1;
                SdResponse::r1(K::R1, idle)
            }
            (_, _) if self.phase == Phase::Idle => SdResponse::r1(K::R1, R1::IN_IDLE | R1::ILLEGAL_COMMAND),
            (false, index) => {
                // Ready or TransferReady: SPI mode has no separate stand-by state.
                self.phase = Phase::TransferReady;
                self.transfer_command(index, cmd.argument)
            }
            (true, _) => SdResponse::r1(K::R1, R1::ILLEGAL_COMMAND),
        };
        Ok(resp)
    }

    fn transfer_command(&mut self, index: u8, arg: u32) -> SdResponse {
        let lba = u64::from(arg);
        match index {
            cmd::SEND_CSD => {
                self.pending = Pending::Register(self.csd);
                SdResponse::r1(ResponseKind::R1, 0)
            }
            cmd::SEND_CID => {
                self.pending = Pending::Register(self.cid);
                SdResponse::r1(ResponseKind::R1, 0)
            }
            cmd::SET_BLOCKLEN => {
                if arg as usize == BLOCK_LEN {
                    SdResponse::r1(ResponseKind::R1, 0)
                } else {
                    SdResponse::r1(ResponseKind::R1, R1::PARAMETER_ERROR)
                }
            }
            cmd::READ_SINGLE_BLOCK => {
                self.pending = Pending::ReadSingle(lba);
                SdResponse::r1(ResponseKind::R1, 0)
            }
            cmd::READ_MULTIPLE_BLOCK => {
                self.pending = Pending::ReadMulti(lba);
                self.phase = Phase::ReadingMulti;
                SdResponse::r1(ResponseKind::R1, 0)
            }
            cmd::WRITE_BLOCK => {
                self.pending = Pending::WriteSingle(lba);
                SdResponse::r1(ResponseKind::R1, 0)
            }
            cmd::WRITE_MULTIPLE_BLOCK => {
                self.pending = Pending::WriteMulti {
                    next: lba,
                    failed: false,
                };
                self.phase = Phase::WritingMulti;
                SdResponse::r1(ResponseKind::R1, 0)
            }
            _ => SdResponse::r1(ResponseKind::R1, R1::ILLEGAL_COMMAND),
        }
    }

    /// Produces the next block of a pending read (data block or error token).
    pub fn read_data_block(&mut self) -> Result<SdResponse, SdError> {
        if self.power == Power::Off {
            return Err(SdError::NotPowered);
        }
        let (lba, next) = match self.pending {
            Pending::Register(reg) => {
                self.pending = Pending::Nothing;
                return Ok(SdResponse::data_block(&reg));
            }
            Pending::ReadSingle(lba) => (lba, Pending::Nothing),
            Pending::ReadMulti(lba) => (lba, Pending::ReadMulti(lba + 1)),
            _ => return Err(SdError::NoDataPending),
        };
        match self.read_block(lba) {
            Ok((data, _)) => {
                self.pending = next;
                Ok(SdResponse::data_block(&data))
            }
            Err(SdError::AddressError { .. }) => {
                if let Pending::ReadSingle(_) = self.pending {
                    self.pending = Pending::Nothing;
                }
                Ok(SdResponse::token(ResponseKind::ErrorToken, token::ERR_OUT_OF_RANGE))
            }
            Err(SdError::Io(_)) => {
                self.pending = Pending::Nothing;
                Ok(SdResponse::token(ResponseKind::ErrorToken, token::ERR_GENERAL))
            }
            Err(e) => Err(e),
        }
    }

    /// Accepts one data frame (512 data bytes plus CRC-16) of a pending write
    /// and answers with a data response token.
    pub fn write_data_block(&mut self, frame: &[u8]) -> Result<SdResponse, SdError> {
        if self.power == Power::Off {
            return Err(SdError::NotPowered);
        }
        let tok = match self.pending.clone() {
            Pending::WriteSingle(lba) => {
                self.pending = Pending::Nothing;
                self.accept_frame(lba, frame)
            }
            Pending::WriteMulti { failed: true, .. } => token::DATA_WRITE_ERROR,
            Pending::WriteMulti { next, .. } => {
                let tok = self.accept_frame(next, frame);
                self.pending = if tok == token::DATA_ACCEPTED {
                    Pending::WriteMulti {
                        next: next + 1,
                        failed: false,
                    }
                } else {
                    // Rejects everything until the host stops the transfer.
                    Pending::WriteMulti { next, failed: true }
                };
                tok
            }
            _ => return Err(SdError::NoDataPending),
        };
        Ok(SdResponse::token(ResponseKind::DataToken, tok))
    }

    fn accept_frame(&mut self, lba: u64, frame: &[u8]) -> u8 {
        if frame.len() != BLOCK_LEN + 2 {
            return token::DATA_CRC_ERROR;
        }
        let data: &[u8; BLOCK_LEN] = frame[..BLOCK_LEN].try_into().expect("length checked");
        let crc = u16::from_be_bytes([frame[BLOCK_LEN], frame[BLOCK_LEN + 1]]);
        match self.write_block(lba, data, crc) {
            Ok(()) => token::DATA_ACCEPTED,
            Err(SdError::CrcError) => token::DATA_CRC_ERROR,
            Err(_) => token::DATA_WRITE_ERROR,
        }
    }

    fn check_access(&self, lba: u64) -> Result<(), SdError> {
        if self.power == Power::Off {
            return Err(SdError::NotPowered);
        }
        if !self.phase.is_initialized() {
            return Err(SdError::NotInitialized);
        }
        if lba >= self.block_count() {
            return Err(SdError::AddressError { lba });
        }
        Ok(())
    }

    /// Reads one block and its CRC-16.
    pub fn read_block(&mut self, lba: u64) -> Result<([u8; BLOCK_LEN], u16), SdError> {
        self.check_access(lba)?;
        let mut data = [0u8; BLOCK_LEN];
        self.backing.read_at(lba * BLOCK_LEN as u64, &mut data)?;
        Ok((data, crc16(&data)))
    }

    /// Writes one block. The image is updated before this returns, which is
    /// the point where a real card releases busy.
    pub fn write_block(&mut self, lba: u64, data: &[u8; BLOCK_LEN], crc: u16) -> Result<(), SdError> {
        self.check_access(lba)?;
        if self.crc_checking && crc16(data) != crc {
            return Err(SdError::CrcError);
        }
        self.backing.write_at(lba * BLOCK_LEN as u64, data)?;
        Ok(())
    }
}

fn with_crc7_trailer(mut reg: [u8; 16]) -> [u8; 16] {
    reg[15] = (crc7(&reg[..15]) << 1) | 1;
    reg
}

fn build_cid() -> [u8; 16] {
    let mut cid = [0u8; 16];
    cid[0] = 0x4E; // manufacturer
    cid[1..3].copy_from_slice(b"NS");
    cid[3..8].copy_from_slice(b"NETSD");
    cid[8] = 0x10; // revision 1.0
    cid[9..13].copy_from_slice(&0x2021_0707u32.to_be_bytes());
    cid[13] = 0x01;
    cid[14] = 0x57; // 2021-07
    with_crc7_trailer(cid)
}

/// CSD version 2.0. Capacity is reported in 512 KiB units, rounded down.
fn build_csd(capacity: u64) -> [u8; 16] {
    let c_size = (capacity / (512 * 1024)).saturating_sub(1) as u32 & 0x3F_FFFF;
    let mut csd = [0u8; 16];
    csd[0] = 0x40;
    csd[1] = 0x0E; // TAAC
    csd[2] = 0x00; // NSAC
    csd[3] = 0x5A; // TRAN_SPEED 50 MHz
    csd[4] = 0x5B; // CCC
    csd[5] = 0x59; // CCC | READ_BL_LEN = 9
    csd[6] = 0x00;
    csd[7] = ((c_size >> 16) & 0x3F) as u8;
    csd[8] = (c_size >> 8) as u8;
    csd[9] = c_size as u8;
    csd[10] = 0x7F;
    csd[11] = 0x80;
    csd[12] = 0x0A;
    csd[13] = 0x40;
    csd[14] = 0x00;
    with_crc7_trailer(csd)
}

/// Capacity in bytes encoded in a version 2.0 CSD.
pub fn csd_capacity(csd: &[u8; 16]) -> u64 {
    let c_size = (u64::from(csd[7] & 0x3F) << 16) | (u64::from(csd[8]) << 8) | u64::from(csd[9]);
    (c_size + 1) * 512 * 1024
}
