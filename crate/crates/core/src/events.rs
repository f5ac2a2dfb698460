//! Structured transition log shared by the switch, fault engine and arbiter.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;

use crate::bus::{Line, LineState};
use crate::switch::PortId;

#[derive(Clone, Debug, PartialEq)]
pub enum EventKind {
    Grant {
        from: Option<PortId>,
        to: PortId,
    },
    /// All lines of a port changed together; `line` is `None`.
    Lines {
        port: PortId,
        line: Option<Line>,
        state: LineState,
    },
    Power {
        on: bool,
    },
    /// Every port is fully disconnected.
    Gap,
    WindowOpen {
        token: u64,
    },
    WindowClose {
        token: u64,
    },
    FaultActivated {
        id: u64,
    },
    FaultExpired {
        id: u64,
    },
    FaultCancelled {
        id: u64,
    },
    Tx {
        port: PortId,
        op: TxOp,
        ok: bool,
        lease: Option<u64>,
    },
    LeaseAcquired {
        lease: u64,
        owner: String,
    },
    LeaseReleased {
        lease: u64,
    },
    LeaseExpired {
        lease: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TxOp {
    Command(u8),
    Read { blocks: u32 },
    Write { blocks: u32 },
}

impl fmt::Display for TxOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TxOp::Command(i) => write!(f, "cmd{i}"),
            TxOp::Read { blocks } => write!(f, "read/{blocks}"),
            TxOp::Write { blocks } => write!(f, "write/{blocks}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub seq: u64,
    pub t_us: u64,
    pub kind: EventKind,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={}us seq={} ", self.t_us, self.seq)?;
        match &self.kind {
            EventKind::Grant { from, to } => {
                let from = from.map_or_else(|| "none".to_string(), |p| p.to_string());
                write!(f, "kind=grant from={from} to={to}")
            }
            EventKind::Lines { port, line, state } => {
                let line = line.map_or("all", |l| l.name());
                let state = match state {
                    LineState::Conductive => "conductive",
                    LineState::Disconnected => "disconnected",
                };
                write!(f, "kind=lines port={port} line={line} state={state}")
            }
            EventKind::Power { on } => write!(f, "kind=power on={on}"),
            EventKind::Gap => write!(f, "kind=gap"),
            EventKind::WindowOpen { token } => write!(f, "kind=window_open token={token}"),
            EventKind::WindowClose { token } => write!(f, "kind=window_close token={token}"),
            EventKind::FaultActivated { id } => write!(f, "kind=fault_activated id={id}"),
            EventKind::FaultExpired { id } => write!(f, "kind=fault_expired id={id}"),
            EventKind::FaultCancelled { id } => write!(f, "kind=fault_cancelled id={id}"),
            EventKind::Tx { port, op, ok, lease } => {
                write!(f, "kind=tx port={port} op={op} ok={ok}")?;
                if let Some(l) = lease {
                    write!(f, " lease={l}")?;
                }
                Ok(())
            }
            EventKind::LeaseAcquired { lease, owner } => {
                write!(f, "kind=lease_acquired lease={lease} owner={owner}")
            }
            EventKind::LeaseReleased { lease } => write!(f, "kind=lease_released lease={lease}"),
            EventKind::LeaseExpired { lease } => write!(f, "kind=lease_expired lease={lease}"),
        }
    }
}

/// Bounded in-memory event buffer with an optional line-oriented sink.
pub struct EventLog {
    buf: VecDeque<Event>,
    capacity: usize,
    next_seq: u64,
    record_tx: bool,
    sink: Option<Box<dyn Write + Send>>,
}

impl fmt::Debug for EventLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EventLog")
            .field("len", &self.buf.len())
            .field("capacity", &self.capacity)
            .field("next_seq", &self.next_seq)
            .finish()
    }
}

impl Default for EventLog {
    fn default() -> Self {
        Self::with_capacity(1 << 16)
    }
}

impl EventLog {
    pub fn with_capacity(capacity: usize) -> Self {
        EventLog {
            buf: VecDeque::new(),
            capacity: capacity.max(1),
            next_seq: 0,
            record_tx: true,
            sink: None,
        }
    }

    pub fn set_sink(&mut self, sink: Box<dyn Write + Send>) {
        self.sink = Some(sink);
    }

    /// Transaction records dominate volume; benchmarks turn them off.
    pub fn set_record_tx(&mut self, on: bool) {
        self.record_tx = on;
    }

    pub fn push(&mut self, t_us: f64, kind: EventKind) {
        if !self.record_tx && matches!(kind, EventKind::Tx { .. }) {
            return;
        }
        let ev = Event {
            seq: self.next_seq,
            t_us: t_us.max(0.0) as u64,
            kind,
        };
        self.next_seq += 1;
        if let Some(sink) = self.sink.as_mut() {
            if writeln!(sink, "{ev}").is_err() {
                self.sink = None;
            }
        }
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(ev);
    }

    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.buf.iter()
    }

    pub fn drain(&mut self) -> Vec<Event> {
        self.buf.drain(..).collect()
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn total_recorded(&self) -> u64 {
        self.next_seq
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formats_and_bounds() {
        let mut log = EventLog::with_capacity(2);
        log.push(1.7, EventKind::Power { on: false });
        log.push(2.0, EventKind::Gap);
        log.push(
            3.0,
            EventKind::Grant {
                from: Some(PortId::DUT),
                to: PortId::RAG,
            },
        );
        let evs: Vec<String> = log.events().map(|e| e.to_string()).collect();
        assert_eq!(evs, ["t=2us seq=1 kind=gap", "t=3us seq=2 kind=grant from=dut to=rag"]);
        assert_eq!(log.total_recorded(), 3);
        assert_eq!(log.drain().len(), 2);
        assert!(log.is_empty());
    }
}
