//! Replays an event stream and checks the switch invariants at every event.

use std::fmt;

use crate::bus::{LineSet, LineState};
use crate::events::{Event, EventKind};
use crate::switch::PortId;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub seq: u64,
    pub what: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "seq={}: {}", self.seq, self.what)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub events: u64,
    pub holder_changes: u64,
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Incremental checker. Feed it every event in order, including those
/// emitted before the first grant.
///
/// A holder change must contain exactly one gap, taken with the card
/// unpowered, followed by exactly one power-on before the grant.
#[derive(Debug)]
pub struct ExclusivityAudit {
    ports: Vec<LineSet>,
    windows: u64,
    holder: Option<PortId>,
    powered: bool,
    gaps: u32,
    on_since_gap: u32,
    report: AuditReport,
}

impl ExclusivityAudit {
    pub fn new(n_ports: usize) -> Self {
        ExclusivityAudit {
            ports: vec![LineSet::disconnected(); n_ports],
            windows: 0,
            holder: None,
            powered: false,
            gaps: 0,
            on_since_gap: 0,
            report: AuditReport::default(),
        }
    }

    fn fail(&mut self, seq: u64, what: String) {
        self.report.violations.push(Violation { seq, what });
    }

    pub fn feed(&mut self, ev: &Event) {
        self.report.events += 1;
        match &ev.kind {
            EventKind::Lines { port, line, state } => {
                let Some(lines) = self.ports.get_mut(usize::from(port.0)) else {
                    return self.fail(ev.seq, format!("unknown port {port}"));
                };
                match (line, state) {
                    (None, LineState::Conductive) => *lines = LineSet::connected(),
                    (None, LineState::Disconnected) => *lines = LineSet::disconnected(),
                    (Some(l), s) => lines.set(*l, *s),
                }
            }
            EventKind::WindowOpen { .. } => self.windows += 1,
            EventKind::WindowClose { .. } => match self.windows.checked_sub(1) {
                Some(n) => self.windows = n,
                None => self.fail(ev.seq, "window closed that was never opened".into()),
            },
            EventKind::Power { on } => {
                self.powered = *on;
                if *on {
                    self.on_since_gap += 1;
                }
            }
            EventKind::Gap => {
                self.gaps += 1;
                self.on_since_gap = 0;
                if let Some(p) = self.ports.iter().position(|l| l.any_conductive()) {
                    self.fail(ev.seq, format!("gap while port {p} is conductive"));
                }
                if self.powered {
                    self.fail(ev.seq, "gap while the card is powered".into());
                }
            }
            EventKind::Grant { from, to } => {
                if *from != self.holder {
                    self.fail(ev.seq, format!("grant from {from:?}, but holder was {:?}", self.holder));
                }
                if (self.gaps, self.on_since_gap) != (1, 1) {
                    let counts = (self.gaps, self.on_since_gap);
                    self.fail(
                        ev.seq,
                        format!("holder change to {to} with (gaps, power-ons after gap) = {counts:?}"),
                    );
                }
                self.holder = Some(*to);
                self.report.holder_changes += 1;
                self.gaps = 0;
                self.on_since_gap = 0;
            }
            _ => {}
        }
        if self.windows == 0 {
            let live = self.ports.iter().filter(|l| l.any_conductive()).count();
            if live > 1 {
                self.fail(ev.seq, format!("{live} ports conductive outside a fault window"));
            }
        }
    }

    pub fn feed_all<'a>(&mut self, events: impl IntoIterator<Item = &'a Event>) {
        for e in events {
            self.feed(e);
        }
    }

    pub fn report(&self) -> &AuditReport {
        &self.report
    }

    pub fn finish(self) -> AuditReport {
        self.report
    }
}
