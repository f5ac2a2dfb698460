//! Scheduled line-level and transaction-level fault injection.
//!
//! Fault classes in terms of the usual taxonomy: crash is a sustained
//! `LineDisconnect` (or supply loss), omission is `Omit`, timing is `Delay`,
//! computation is `Corrupt` or `Replay`.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{ChannelEffects, CorruptEffect, Direction, Line, LineState};
use crate::events::{EventKind, EventLog};
use crate::sd::SdCard;
use crate::switch::{PortId, Switch, WindowToken};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FaultKind {
    LineDisconnect {
        port: PortId,
        line: Line,
        duration_us: u64,
    },
    Corrupt {
        direction: Direction,
        bit_flip_rate: f64,
        window_us: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_flips_per_block: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        burst_span_bits: Option<u32>,
    },
    Delay {
        added_us: u64,
        window_us: u64,
    },
    Omit {
        target: OmitTarget,
        count: u32,
    },
    /// Records read payloads of transactions `capture_from_tx ..
    /// capture_from_tx + capture_count` and hands them out again, in order,
    /// to reads from transaction `inject_at_tx` on.
    Replay {
        capture_from_tx: u64,
        capture_count: u32,
        inject_at_tx: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmitTarget {
    Command(u8),
    Data(Direction),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    #[default]
    Immediate,
    /// Once this many transactions have been started.
    AtTransactionCount(u64),
    /// Once simulated time reaches this many microseconds.
    AtSimTime(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultStatus {
    Armed,
    Active,
    Expired,
    Cancelled,
}

/// Body of a scheduling request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultRequest {
    pub kind: FaultKind,
    #[serde(default)]
    pub trigger: Trigger,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub id: u64,
    pub kind: FaultKind,
    pub trigger: Trigger,
    pub status: FaultStatus,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FaultError {
    #[error("invalid fault: {0}")]
    InvalidSpec(String),
    #[error("no fault with id {0}")]
    UnknownId(u64),
    #[error("fault injection is disabled")]
    Disabled,
}

/// Mutable pieces of the testbed a fault may act on.
pub struct FaultCtx<'a> {
    pub switch: &'a mut Switch,
    pub card: &'a mut SdCard,
    pub log: &'a mut EventLog,
    pub now_us: f64,
    pub tx_count: u64,
}

#[derive(Debug)]
struct Entry {
    spec: FaultSpec,
    activated_at_us: f64,
    window: Option<WindowToken>,
    remaining: u32,
    captured: VecDeque<Vec<u8>>,
    seen_captures: u32,
    injected: u32,
}

#[derive(Debug, Default)]
pub struct FaultEngine {
    entries: BTreeMap<u64, Entry>,
    next_id: u64,
}

pub fn validate(kind: &FaultKind, n_ports: usize) -> Result<(), FaultError> {
    let bad = |m: &str| Err(FaultError::InvalidSpec(m.to_string()));
    match *kind {
        FaultKind::LineDisconnect { port, .. } if usize::from(port.0) >= n_ports => bad("unknown port"),
        FaultKind::Corrupt {
            bit_flip_rate,
            burst_span_bits,
            ..
        } => {
            if !(0.0..=1.0).contains(&bit_flip_rate) {
                bad("bit_flip_rate must be within [0, 1]")
            } else if burst_span_bits == Some(0) {
                bad("burst_span_bits must be positive")
            } else {
                Ok(())
            }
        }
        FaultKind::Omit { count: 0, .. } => bad("count must be positive"),
        FaultKind::Replay {
            capture_from_tx,
            capture_count,
            inject_at_tx,
        } => {
            if capture_count == 0 {
                bad("capture_count must be positive")
            } else if capture_from_tx.saturating_add(u64::from(capture_count)) > inject_at_tx {
                bad("capture window must end before inject_at_tx")
            } else {
                Ok(())
            }
        }
        _ => Ok(()),
    }
}

impl FaultEngine {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Arms a fault. The caller evaluates triggers afterwards.
    pub fn schedule(&mut self, req: FaultRequest, n_ports: usize) -> Result<u64, FaultError> {
        validate(&req.kind, n_ports)?;
        self.next_id += 1;
        let id = self.next_id;
        let remaining = match req.kind {
            FaultKind::Omit { count, .. } => count,
            _ => 0,
        };
        self.entries.insert(
            id,
            Entry {
                spec: FaultSpec {
                    id,
                    kind: req.kind,
                    trigger: req.trigger,
                    status: FaultStatus::Armed,
                },
                activated_at_us: 0.0,
                window: None,
                remaining,
                captured: VecDeque::new(),
                seen_captures: 0,
                injected: 0,
            },
        );
        Ok(id)
    }

    pub fn list(&self) -> Vec<FaultSpec> {
        self.entries.values().map(|e| e.spec.clone()).collect()
    }

    pub fn get(&self, id: u64) -> Option<&FaultSpec> {
        self.entries.get(&id).map(|e| &e.spec)
    }

    pub fn cancel(&mut self, id: u64, ctx: &mut FaultCtx<'_>) -> Result<FaultStatus, FaultError> {
        let entry = self.entries.get_mut(&id).ok_or(FaultError::UnknownId(id))?;
        match entry.spec.status {
            FaultStatus::Armed => {}
            FaultStatus::Active => undo(entry, ctx),
            done => return Ok(done),
        }
        entry.spec.status = FaultStatus::Cancelled;
        ctx.log.push(ctx.now_us, EventKind::FaultCancelled { id });
        Ok(FaultStatus::Cancelled)
    }

    /// Fires due triggers and retires faults whose time is up.
    pub fn evaluate(&mut self, ctx: &mut FaultCtx<'_>) {
        for entry in self.entries.values_mut() {
            if entry.spec.status == FaultStatus::Armed {
                let due = match entry.spec.trigger {
                    Trigger::Immediate => true,
                    Trigger::AtTransactionCount(n) => ctx.tx_count >= n,
                    Trigger::AtSimTime(t) => ctx.now_us >= t as f64,
                };
                if due {
                    activate(entry, ctx);
                }
            }
            if entry.spec.status == FaultStatus::Active {
                let window = match entry.spec.kind {
                    FaultKind::LineDisconnect { duration_us, .. } => Some(duration_us),
                    FaultKind::Corrupt { window_us, .. } | FaultKind::Delay { window_us, .. } => Some(window_us),
                    _ => None,
                };
                if let Some(w) = window {
                    if ctx.now_us >= entry.activated_at_us + w as f64 {
                        undo(entry, ctx);
                        expire(entry, ctx.log, ctx.now_us);
                    }
                }
            }
        }
    }

    /// Channel effects of active corruption and delay faults.
    pub fn effects(&self, direction: Direction) -> ChannelEffects {
        let mut fx = ChannelEffects::default();
        for e in self.active() {
            match e.spec.kind {
                FaultKind::Delay { added_us, .. } => fx.added_delay_us += added_us as f64,
                FaultKind::Corrupt {
                    direction: d,
                    bit_flip_rate,
                    max_flips_per_block,
                    burst_span_bits,
                    ..
                } if d == direction && fx.corrupt.is_none() && bit_flip_rate > 0.0 => {
                    fx.corrupt = Some(CorruptEffect {
                        bit_flip_rate,
                        max_flips_per_frame: max_flips_per_block,
                        burst_span_bits,
                    })
                }
                _ => {}
            }
        }
        fx
    }

    /// Consumes one omission matching `target`, if any is active.
    pub fn take_omit(&mut self, target: OmitTarget, log: &mut EventLog, now_us: f64) -> bool {
        for entry in self.entries.values_mut() {
            if entry.spec.status != FaultStatus::Active {
                continue;
            }
            if let FaultKind::Omit { target: t, .. } = entry.spec.kind {
                if t == target {
                    entry.remaining -= 1;
                    if entry.remaining == 0 {
                        expire(entry, log, now_us);
                    }
                    return true;
                }
            }
        }
        false
    }

    /// Lets replay faults record or substitute a read payload of transaction `tx`.
    pub fn on_read(&mut self, tx: u64, payload: &mut Vec<u8>, log: &mut EventLog, now_us: f64) {
        for entry in self.entries.values_mut() {
            if entry.spec.status != FaultStatus::Active {
                continue;
            }
            let FaultKind::Replay {
                capture_from_tx,
                capture_count,
                inject_at_tx,
            } = entry.spec.kind
            else {
                continue;
            };
            if (capture_from_tx..capture_from_tx + u64::from(capture_count)).contains(&tx) {
                entry.captured.push_back(payload.clone());
                entry.seen_captures += 1;
            } else if tx >= inject_at_tx {
                if let Some(old) = entry.captured.pop_front() {
                    if old.len() == payload.len() {
                        *payload = old;
                    }
                }
                entry.injected += 1;
                if entry.captured.is_empty() {
                    expire(entry, log, now_us);
                }
            }
        }
    }

    fn active(&self) -> impl Iterator<Item = &Entry> {
        self.entries.values().filter(|e| e.spec.status == FaultStatus::Active)
    }
}

fn activate(entry: &mut Entry, ctx: &mut FaultCtx<'_>) {
    entry.spec.status = FaultStatus::Active;
    entry.activated_at_us = ctx.now_us;
    ctx.log
        .push(ctx.now_us, EventKind::FaultActivated { id: entry.spec.id });
    if let FaultKind::LineDisconnect { port, line, .. } = entry.spec.kind {
        let token = ctx.switch.open_fault_window(ctx.log, ctx.now_us);
        entry.window = Some(token);
        let _ = ctx
            .switch
            .set_line(port, line, LineState::Disconnected, ctx.card, ctx.log, ctx.now_us);
    }
}

fn undo(entry: &mut Entry, ctx: &mut FaultCtx<'_>) {
    if let FaultKind::LineDisconnect { port, line, .. } = entry.spec.kind {
        let _ = ctx.switch.restore_line(port, line, ctx.card, ctx.log, ctx.now_us);
        if let Some(token) = entry.window.take() {
            let _ = ctx.switch.close_fault_window(token, ctx.card, ctx.log, ctx.now_us);
        }
    }
}

fn expire(entry: &mut Entry, log: &mut EventLog, now_us: f64) {
    entry.spec.status = FaultStatus::Expired;
    log.push(now_us, EventKind::FaultExpired { id: entry.spec.id });
}
