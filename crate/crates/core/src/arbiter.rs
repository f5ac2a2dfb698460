//! The testbed (card, switch, channel, faults, simulated clock) and the
//! arbiter that serializes every access to it.
//!
//! Host-side code talks to the card in steps: a command, a read data phase
//! or a write data phase. Each step is atomic with respect to grants, line
//! changes and fault activation.

use std::collections::BTreeSet;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backing::Backing;
use crate::bus::{
    BusConfig, BusModel, Caps, Direction, Line, LineSet, LineState, TransferMode, TransferRequest, TransferStatus,
};
use crate::events::{Event, EventKind, EventLog, TxOp};
use crate::faults::{FaultCtx, FaultEngine, FaultError, FaultRequest, FaultSpec, FaultStatus, OmitTarget};
use crate::sd::{CardConfig, ResponseKind, SdCard, SdCommand, SdError, SdResponse, BLOCK_LEN};
use crate::switch::{PortId, Switch, SwitchError, SwitchGrant, WindowToken};

#[derive(Debug, Error)]
pub enum ArbiterError {
    #[error(transparent)]
    Switch(#[from] SwitchError),
    #[error(transparent)]
    Fault(#[from] FaultError),
    #[error(transparent)]
    Card(#[from] SdError),
    #[error("timed out waiting for the card grant")]
    GrantTimeout,
}

#[derive(Clone, Debug)]
pub struct TestbedConfig {
    pub card: CardConfig,
    pub n_ports: usize,
    pub bus: BusModel,
    /// One per port; missing entries default to the switched board without
    /// explicit pull-ups.
    pub port_configs: Vec<BusConfig>,
    pub seed: u64,
    pub faults_enabled: bool,
    pub log_capacity: usize,
    pub record_tx: bool,
}

impl Default for TestbedConfig {
    fn default() -> Self {
        TestbedConfig {
            card: CardConfig::default(),
            n_ports: 2,
            bus: BusModel::default(),
            port_configs: Vec::new(),
            seed: 0,
            faults_enabled: true,
            log_capacity: 1 << 16,
            record_tx: true,
        }
    }
}

/// Result of one step. `value` is `None` when the host saw nothing back
/// before its timeout.
#[derive(Clone, Debug, PartialEq)]
pub struct Step<T> {
    pub elapsed_us: f64,
    pub value: Option<T>,
}

impl<T> Step<T> {
    pub fn timed_out(&self) -> bool {
        self.value.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReadData {
    /// Data blocks as received, possibly followed by an error token.
    pub blocks: Vec<SdResponse>,
    pub status: TransferStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WriteAck {
    pub tokens: Vec<u8>,
    pub status: TransferStatus,
}

pub struct Testbed {
    switch: Switch,
    card: SdCard,
    bus: BusModel,
    port_cfg: Vec<BusConfig>,
    modes: Vec<Option<TransferMode>>,
    faults: Option<FaultEngine>,
    now_us: f64,
    noise_rng: ChaCha8Rng,
    fault_rng: ChaCha8Rng,
    log: EventLog,
    tx_count: u64,
    lease: Option<u64>,
}

impl std::fmt::Debug for Testbed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Testbed")
            .field("grant", &self.switch.current_grant())
            .field("card", &self.card)
            .field("now_us", &self.now_us)
            .field("tx_count", &self.tx_count)
            .finish_non_exhaustive()
    }
}

const FAULT_STREAM: u64 = 0x6661_756c_7473;

impl Testbed {
    /// Builds a testbed over `backing`. No port holds the card until the
    /// first grant or release.
    pub fn new(cfg: TestbedConfig, backing: Box<dyn Backing>) -> Result<Self, ArbiterError> {
        let card = SdCard::new(cfg.card, backing)?;
        let mut port_cfg = cfg.port_configs.clone();
        port_cfg.resize(cfg.n_ports, BusConfig::default());
        let mut log = EventLog::with_capacity(cfg.log_capacity);
        log.set_record_tx(cfg.record_tx);
        Ok(Testbed {
            switch: Switch::new(cfg.n_ports),
            card,
            bus: cfg.bus,
            port_cfg,
            modes: vec![None; cfg.n_ports],
            faults: cfg.faults_enabled.then(FaultEngine::new),
            now_us: 0.0,
            noise_rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            fault_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ FAULT_STREAM),
            log,
            tx_count: 0,
            lease: None,
        })
    }

    pub fn now_us(&self) -> f64 {
        self.now_us
    }

    pub fn tx_count(&self) -> u64 {
        self.tx_count
    }

    pub fn card(&self) -> &SdCard {
        &self.card
    }

    pub fn bus(&self) -> &BusModel {
        &self.bus
    }

    pub fn card_caps(&self) -> Caps {
        Caps {
            uhs: self.card.supports_uhs(),
            high_speed: true,
        }
    }

    pub fn port_config(&self, port: PortId) -> Result<BusConfig, ArbiterError> {
        self.switch.lines(port)?;
        Ok(self.port_cfg[usize::from(port.0)])
    }

    pub fn set_port_config(&mut self, port: PortId, cfg: BusConfig) -> Result<(), ArbiterError> {
        self.switch.lines(port)?;
        self.port_cfg[usize::from(port.0)] = cfg;
        Ok(())
    }

    /// Bus mode in effect for `port`; a freshly powered card runs at default speed.
    pub fn mode(&self, port: PortId) -> TransferMode {
        self.modes
            .get(usize::from(port.0))
            .copied()
            .flatten()
            .unwrap_or(TransferMode::DEFAULT_3V3)
    }

    /// Records the mode a host switched the card to after initialization.
    pub fn set_mode(&mut self, port: PortId, mode: TransferMode) -> Result<(), ArbiterError> {
        self.switch.lines(port)?;
        if self.card.phase().is_initialized() {
            self.modes[usize::from(port.0)] = Some(mode);
        }
        Ok(())
    }

    pub fn current_grant(&self) -> SwitchGrant {
        self.switch.current_grant()
    }

    pub fn lines(&self, port: PortId) -> Result<LineSet, ArbiterError> {
        Ok(*self.switch.lines(port)?)
    }

    pub fn switch(&self) -> &Switch {
        &self.switch
    }

    pub fn log_mut(&mut self) -> &mut EventLog {
        &mut self.log
    }

    pub fn drain_events(&mut self) -> Vec<Event> {
        self.log.drain()
    }

    pub fn faults_enabled(&self) -> bool {
        self.faults.is_some()
    }

    fn sync_modes(&mut self) {
        if !self.card.phase().is_initialized() {
            self.modes.iter_mut().for_each(|m| *m = None);
        }
    }

    fn evaluate_faults(&mut self) {
        if let Some(engine) = self.faults.as_mut() {
            if !engine.is_empty() {
                let mut ctx = FaultCtx {
                    switch: &mut self.switch,
                    card: &mut self.card,
                    log: &mut self.log,
                    now_us: self.now_us,
                    tx_count: self.tx_count,
                };
                engine.evaluate(&mut ctx);
            }
        }
        self.sync_modes();
    }

    /// Lets simulated time pass without bus activity.
    pub fn advance(&mut self, us: f64) {
        self.now_us += us.max(0.0);
        self.evaluate_faults();
    }

    pub fn grant(&mut self, port: PortId) -> Result<SwitchGrant, ArbiterError> {
        self.evaluate_faults();
        let g = self.switch.grant(port, &mut self.card, &mut self.log, self.now_us)?;
        self.sync_modes();
        Ok(g)
    }

    pub fn release(&mut self) -> SwitchGrant {
        self.evaluate_faults();
        let g = self.switch.release(&mut self.card, &mut self.log, self.now_us);
        self.sync_modes();
        g
    }

    pub fn set_line(&mut self, port: PortId, line: Line, state: LineState) -> Result<LineSet, ArbiterError> {
        let r = self
            .switch
            .set_line(port, line, state, &mut self.card, &mut self.log, self.now_us)?;
        self.sync_modes();
        Ok(r)
    }

    pub fn restore_line(&mut self, port: PortId, line: Line) -> Result<LineSet, ArbiterError> {
        let r = self
            .switch
            .restore_line(port, line, &mut self.card, &mut self.log, self.now_us)?;
        self.sync_modes();
        Ok(r)
    }

    pub fn open_fault_window(&mut self) -> WindowToken {
        self.switch.open_fault_window(&mut self.log, self.now_us)
    }

    pub fn close_fault_window(&mut self, token: WindowToken) -> Result<(), ArbiterError> {
        self.switch
            .close_fault_window(token, &mut self.card, &mut self.log, self.now_us)?;
        self.sync_modes();
        Ok(())
    }

    /// Power-cycles the card without changing the grant.
    pub fn power_cycle(&mut self) {
        self.card.power_set(false);
        self.switch.count_power_cycle();
        self.log.push(self.now_us, EventKind::Power { on: false });
        if self.switch.card_powered() {
            self.card.power_set(true);
            self.log.push(self.now_us, EventKind::Power { on: true });
        }
        self.sync_modes();
    }

    pub fn flush(&mut self) -> Result<(), ArbiterError> {
        Ok(self.card.flush()?)
    }

    pub fn schedule_fault(&mut self, req: FaultRequest) -> Result<u64, ArbiterError> {
        let n = self.switch.port_count();
        let engine = self.faults.as_mut().ok_or(FaultError::Disabled)?;
        let id = engine.schedule(req, n)?;
        self.evaluate_faults();
        Ok(id)
    }

    pub fn cancel_fault(&mut self, id: u64) -> Result<FaultStatus, ArbiterError> {
        let engine = self.faults.as_mut().ok_or(FaultError::Disabled)?;
        let mut ctx = FaultCtx {
            switch: &mut self.switch,
            card: &mut self.card,
            log: &mut self.log,
            now_us: self.now_us,
            tx_count: self.tx_count,
        };
        let status = engine.cancel(id, &mut ctx)?;
        self.sync_modes();
        Ok(status)
    }

    pub fn list_faults(&self) -> Vec<FaultSpec> {
        self.faults.as_ref().map(FaultEngine::list).unwrap_or_default()
    }

    fn begin_tx(&mut self, port: PortId) -> Result<u64, ArbiterError> {
        self.switch.lines(port)?;
        self.evaluate_faults();
        let tx = self.tx_count;
        self.tx_count += 1;
        Ok(tx)
    }

    fn reachable(&self, port: PortId, needed: &[Line]) -> bool {
        let lines = self.switch.lines(port).expect("port checked");
        self.switch.card_powered() && needed.iter().all(|&l| lines.is_conductive(l))
    }

    fn finish<T>(&mut self, port: PortId, op: TxOp, elapsed_us: f64, value: Option<T>) -> Step<T> {
        self.now_us += elapsed_us;
        let lease = if port == PortId::RAG { self.lease } else { None };
        self.log.push(
            self.now_us,
            EventKind::Tx {
                port,
                op,
                ok: value.is_some(),
                lease,
            },
        );
        Step { elapsed_us, value }
    }

    fn timeout<T>(&mut self, port: PortId, op: TxOp) -> Step<T> {
        let t = self.bus.timing.timeout_us;
        self.finish(port, op, t, None)
    }

    fn take_omit(&mut self, target: OmitTarget) -> bool {
        match self.faults.as_mut() {
            Some(e) => e.take_omit(target, &mut self.log, self.now_us),
            None => false,
        }
    }

    /// Sends one command frame from `port`.
    pub fn command(&mut self, port: PortId, cmd: &SdCommand) -> Result<Step<SdResponse>, ArbiterError> {
        self.begin_tx(port)?;
        let op = TxOp::Command(cmd.index);
        if !self.reachable(port, &[Line::Clk, Line::Cmd]) {
            return Ok(self.timeout(port, op));
        }
        let resp = match self.card.handle_command(cmd) {
            Ok(r) => r,
            Err(_) => return Ok(self.timeout(port, op)),
        };
        if self.take_omit(OmitTarget::Command(cmd.index)) {
            return Ok(self.timeout(port, op));
        }
        if self.card.phase().is_initialized() && self.switch.current_grant().holder == Some(port) {
            self.switch.clear_repower_pending();
        }
        self.sync_modes();
        Ok(self.finish(port, op, 0.0, Some(resp)))
    }

    /// Receives up to `nblocks` blocks of the pending read.
    pub fn read_data(&mut self, port: PortId, nblocks: u32, host_crc: bool) -> Result<Step<ReadData>, ArbiterError> {
        let tx = self.begin_tx(port)?;
        let op = TxOp::Read { blocks: nblocks };
        if !self.reachable(port, &Line::SIGNALS) || self.take_omit(OmitTarget::Data(Direction::Read)) {
            return Ok(self.timeout(port, op));
        }

        let mut frames = Vec::new();
        let mut frame_len = 0;
        let mut tail = None;
        for _ in 0..nblocks {
            match self.card.read_data_block() {
                Ok(r) if r.kind == ResponseKind::DataBlock => {
                    frame_len = r.payload.len();
                    frames.extend_from_slice(&r.payload);
                }
                Ok(r) => {
                    tail = Some(r);
                    break;
                }
                Err(_) => break,
            }
        }
        if frames.is_empty() && tail.is_none() {
            return Ok(self.timeout(port, op));
        }

        let cfg = self.port_cfg[usize::from(port.0)];
        let mode = self.mode(port);
        let lines = *self.switch.lines(port)?;
        let (mut blocks, status, elapsed) = if frames.is_empty() {
            (
                Vec::new(),
                TransferStatus::Ok,
                self.bus.command_time(&cfg, &mode, 0, Direction::Read),
            )
        } else {
            let effects = match self.faults.as_mut() {
                Some(e) => {
                    e.on_read(tx, &mut frames, &mut self.log, self.now_us);
                    e.effects(Direction::Read)
                }
                None => Default::default(),
            };
            let nframes = frames.len() / frame_len;
            let req = TransferRequest {
                cfg: &cfg,
                mode,
                lines: &lines,
                direction: Direction::Read,
                crc_checking: host_crc,
                frame_len,
                data_bytes: (nframes * (frame_len - 2)) as u64,
                effects,
            };
            let out = match self
                .bus
                .transfer(&mut self.noise_rng, &mut self.fault_rng, &req, frames)
            {
                Ok(o) if o.status != TransferStatus::Timeout => o,
                _ => return Ok(self.timeout(port, op)),
            };
            let blocks = out
                .bytes
                .chunks(frame_len)
                .map(|f| SdResponse {
                    kind: ResponseKind::DataBlock,
                    payload: f.to_vec(),
                })
                .collect();
            (blocks, out.status, out.elapsed_us)
        };
        blocks.extend(tail);
        Ok(self.finish(port, op, elapsed, Some(ReadData { blocks, status })))
    }

    /// Sends data frames (512 bytes plus CRC-16 each) for the pending write.
    pub fn write_data(&mut self, port: PortId, frames: Vec<u8>) -> Result<Step<WriteAck>, ArbiterError> {
        let frame_len = BLOCK_LEN + 2;
        let nframes = frames.len() / frame_len;
        self.begin_tx(port)?;
        let op = TxOp::Write { blocks: nframes as u32 };
        if nframes == 0
            || frames.len() % frame_len != 0
            || !self.reachable(port, &Line::SIGNALS)
            || self.take_omit(OmitTarget::Data(Direction::Write))
        {
            return Ok(self.timeout(port, op));
        }
        let cfg = self.port_cfg[usize::from(port.0)];
        let mode = self.mode(port);
        let lines = *self.switch.lines(port)?;
        let effects = self
            .faults
            .as_ref()
            .map(|e| e.effects(Direction::Write))
            .unwrap_or_default();
        let req = TransferRequest {
            cfg: &cfg,
            mode,
            lines: &lines,
            direction: Direction::Write,
            crc_checking: self.card.crc_checking(),
            frame_len,
            data_bytes: (nframes * BLOCK_LEN) as u64,
            effects,
        };
        let out = match self
            .bus
            .transfer(&mut self.noise_rng, &mut self.fault_rng, &req, frames)
        {
            Ok(o) if o.status != TransferStatus::Timeout => o,
            _ => return Ok(self.timeout(port, op)),
        };
        let mut tokens = Vec::with_capacity(nframes);
        for frame in out.bytes.chunks(frame_len) {
            match self.card.write_data_block(frame) {
                Ok(r) => tokens.extend(r.token_byte()),
                Err(_) => break,
            }
        }
        if tokens.is_empty() {
            return Ok(self.timeout(port, op));
        }
        Ok(self.finish(
            port,
            op,
            out.elapsed_us,
            Some(WriteAck {
                tokens,
                status: out.status,
            }),
        ))
    }
}

#[derive(Debug)]
struct Held {
    id: u64,
    owner: String,
    last_active: Instant,
}

#[derive(Debug, Default)]
struct LeaseQueue {
    next_ticket: u64,
    serving: u64,
    abandoned: BTreeSet<u64>,
    current: Option<Held>,
}

impl LeaseQueue {
    fn skip_abandoned(&mut self) {
        while self.abandoned.remove(&self.serving) {
            self.serving += 1;
        }
    }
}

/// Serializes all access to a [`Testbed`] and hands out the gateway's
/// access to the card in FIFO order.
#[derive(Debug)]
pub struct Arbiter {
    bed: Mutex<Testbed>,
    queue: Mutex<LeaseQueue>,
    turn: Condvar,
    max_hold: Mutex<Duration>,
}

pub const DEFAULT_MAX_HOLD: Duration = Duration::from_secs(30);

impl Arbiter {
    pub fn new(bed: Testbed) -> Arc<Self> {
        Arc::new(Arbiter {
            bed: Mutex::new(bed),
            queue: Mutex::new(LeaseQueue::default()),
            turn: Condvar::new(),
            max_hold: Mutex::new(DEFAULT_MAX_HOLD),
        })
    }

    /// Exclusive access to the testbed for one or more steps.
    pub fn lock(&self) -> MutexGuard<'_, Testbed> {
        self.bed.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn queue(&self) -> MutexGuard<'_, LeaseQueue> {
        self.queue.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn set_max_hold(&self, d: Duration) {
        *self.max_hold.lock().unwrap_or_else(|e| e.into_inner()) = d;
    }

    pub fn max_hold(&self) -> Duration {
        *self.max_hold.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Waits in line for the card, then grants it to the gateway port.
    /// Dropping the lease hands the card back to the DUT.
    pub fn acquire(self: &Arc<Self>, owner: &str, wait: Duration) -> Result<Lease, ArbiterError> {
        let deadline = Instant::now() + wait;
        let mut q = self.queue();
        let ticket = q.next_ticket;
        q.next_ticket += 1;
        loop {
            q.skip_abandoned();
            if q.serving == ticket && q.current.is_none() {
                break;
            }
            let now = Instant::now();
            if now >= deadline {
                q.abandoned.insert(ticket);
                q.skip_abandoned();
                self.turn.notify_all();
                return Err(ArbiterError::GrantTimeout);
            }
            q = self
                .turn
                .wait_timeout(q, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
        q.current = Some(Held {
            id: ticket,
            owner: owner.to_string(),
            last_active: Instant::now(),
        });
        let mut bed = self.lock();
        bed.grant(PortId::RAG)?;
        bed.lease = Some(ticket);
        let now = bed.now_us;
        bed.log.push(
            now,
            EventKind::LeaseAcquired {
                lease: ticket,
                owner: owner.to_string(),
            },
        );
        Ok(Lease {
            arbiter: Arc::clone(self),
            id: ticket,
        })
    }

    fn end_lease(&self, id: u64, expired: bool) -> bool {
        let mut q = self.queue();
        if q.current.as_ref().map(|h| h.id) != Some(id) {
            return false;
        }
        q.current = None;
        q.serving += 1;
        q.skip_abandoned();
        {
            let mut bed = self.lock();
            bed.lease = None;
            bed.release();
            let now = bed.now_us;
            let kind = if expired {
                EventKind::LeaseExpired { lease: id }
            } else {
                EventKind::LeaseReleased { lease: id }
            };
            bed.log.push(now, kind);
        }
        self.turn.notify_all();
        true
    }

    /// Forcibly ends a lease idle for longer than the maximum hold time.
    pub fn reap_expired(&self) -> Option<u64> {
        let max = self.max_hold();
        let id = {
            let q = self.queue();
            let h = q.current.as_ref()?;
            if h.last_active.elapsed() <= max {
                return None;
            }
            h.id
        };
        self.end_lease(id, true).then_some(id)
    }

    /// Owner of the current lease, if any.
    pub fn lease_owner(&self) -> Option<String> {
        self.queue().current.as_ref().map(|h| h.owner.clone())
    }

    /// Number of requests waiting behind the current lease.
    pub fn queue_len(&self) -> u64 {
        let q = self.queue();
        let base = q.serving + u64::from(q.current.is_some());
        let waiting = q.next_ticket.saturating_sub(base);
        waiting.saturating_sub(q.abandoned.len() as u64)
    }
}

/// The gateway's claim on the card. Ends on drop.
#[derive(Debug)]
pub struct Lease {
    arbiter: Arc<Arbiter>,
    id: u64,
}

impl Lease {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn arbiter(&self) -> &Arc<Arbiter> {
        &self.arbiter
    }

    /// Marks the lease as in use, deferring the idle timeout.
    pub fn touch(&self) -> bool {
        let mut q = self.arbiter.queue();
        match q.current.as_mut() {
            Some(h) if h.id == self.id => {
                h.last_active = Instant::now();
                true
            }
            _ => false,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.arbiter.queue().current.as_ref().map(|h| h.id) == Some(self.id)
    }
}

impl Drop for Lease {
    fn drop(&mut self) {
        self.arbiter.end_lease(self.id, false);
    }
}
