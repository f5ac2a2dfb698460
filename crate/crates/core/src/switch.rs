//! The SD switch: exclusive, break-before-make access to the card for one of
//! N ports, with a power cycle on every change of holder.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::bus::{Line, LineSet, LineState};
use crate::events::{EventKind, EventLog};
use crate::sd::SdCard;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct PortId(pub u8);

impl PortId {
    pub const DUT: PortId = PortId(0);
    pub const RAG: PortId = PortId(1);
}

impl fmt::Display for PortId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            0 => f.write_str("dut"),
            1 => f.write_str("rag"),
            n => write!(f, "p{n}"),
        }
    }
}

impl FromStr for PortId {
    type Err = SwitchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "dut" => Ok(PortId::DUT),
            "rag" => Ok(PortId::RAG),
            other => other
                .strip_prefix('p')
                .and_then(|n| n.parse::<u8>().ok())
                .filter(|&n| n >= 2)
                .map(PortId)
                .ok_or_else(|| SwitchError::UnknownPortName(s.to_string())),
        }
    }
}

impl Serialize for PortId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PortId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SwitchError {
    #[error("unknown port {0}")]
    UnknownPort(PortId),
    #[error("unknown port name {0:?}")]
    UnknownPortName(String),
    #[error("connecting {line} of {port} would give two ports access outside a fault window")]
    ExclusivityViolation { port: PortId, line: Line },
    #[error("fault window {0} is not open")]
    UnknownWindow(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SwitchGrant {
    pub holder: Option<PortId>,
    pub granted_at_us: u64,
    /// Set on every holder change, cleared once the new holder has
    /// initialized the card.
    pub repower_pending: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct WindowToken(pub u64);

#[derive(Debug)]
pub struct Switch {
    ports: Vec<LineSet>,
    grant: SwitchGrant,
    windows: BTreeSet<u64>,
    next_window: u64,
    power_cycles: u64,
}

impl Switch {
    /// A switch with `n_ports` ports, all disconnected and no holder.
    pub fn new(n_ports: usize) -> Self {
        assert!((2..=255).contains(&n_ports), "a switch needs between 2 and 255 ports");
        Switch {
            ports: vec![LineSet::disconnected(); n_ports],
            grant: SwitchGrant {
                holder: None,
                granted_at_us: 0,
                repower_pending: false,
            },
            windows: BTreeSet::new(),
            next_window: 1,
            power_cycles: 0,
        }
    }

    pub fn port_count(&self) -> usize {
        self.ports.len()
    }

    pub fn ports(&self) -> impl Iterator<Item = PortId> {
        (0..self.ports.len() as u8).map(PortId)
    }

    pub fn current_grant(&self) -> SwitchGrant {
        self.grant
    }

    pub fn power_cycles(&self) -> u64 {
        self.power_cycles
    }

    /// Counts a power cycle done outside a holder change.
    pub(crate) fn count_power_cycle(&mut self) {
        self.power_cycles += 1;
    }

    fn check_port(&self, port: PortId) -> Result<(), SwitchError> {
        if usize::from(port.0) < self.ports.len() {
            Ok(())
        } else {
            Err(SwitchError::UnknownPort(port))
        }
    }

    pub fn lines(&self, port: PortId) -> Result<&LineSet, SwitchError> {
        self.check_port(port)?;
        Ok(&self.ports[usize::from(port.0)])
    }

    /// Whether any port currently powers the card.
    pub fn card_powered(&self) -> bool {
        self.ports.iter().any(|p| p.power_on())
    }

    pub fn in_fault_window(&self) -> bool {
        !self.windows.is_empty()
    }

    /// Number of ports with at least one conductive line.
    pub fn conductive_ports(&self) -> usize {
        self.ports.iter().filter(|p| p.any_conductive()).count()
    }

    /// Outside fault windows only the holder may have conductive lines.
    pub fn exclusivity_holds(&self) -> bool {
        self.in_fault_window()
            || self
                .ports()
                .all(|p| Some(p) == self.grant.holder || self.ports[usize::from(p.0)].all_disconnected())
    }

    fn assert_invariant(&self) {
        assert!(
            self.exclusivity_holds(),
            "switch exclusivity violated: {:?}",
            self.ports
        );
    }

    fn sync_card_power(&self, card: &mut SdCard, log: &mut EventLog, now_us: f64) {
        let want = self.card_powered();
        let is_on = card.power() == crate::sd::Power::On;
        if want != is_on {
            card.power_set(want);
            log.push(now_us, EventKind::Power { on: want });
        }
    }

    /// Hands the card to `port`. Idempotent for the current holder.
    pub fn grant(
        &mut self,
        port: PortId,
        card: &mut SdCard,
        log: &mut EventLog,
        now_us: f64,
    ) -> Result<SwitchGrant, SwitchError> {
        self.check_port(port)?;
        if self.grant.holder == Some(port) {
            return Ok(self.grant);
        }
        let from = self.grant.holder;

        // Break: every port off the card, including anything a fault left behind.
        for (i, lines) in self.ports.iter_mut().enumerate() {
            if lines.any_conductive() {
                *lines = LineSet::disconnected();
                log.push(
                    now_us,
                    EventKind::Lines {
                        port: PortId(i as u8),
                        line: None,
                        state: LineState::Disconnected,
                    },
                );
            }
        }
        card.power_set(false);
        log.push(now_us, EventKind::Power { on: false });
        debug_assert!(self.ports.iter().all(|p| p.all_disconnected()));
        log.push(now_us, EventKind::Gap);

        // Make.
        self.grant = SwitchGrant {
            holder: Some(port),
            granted_at_us: now_us.max(0.0) as u64,
            repower_pending: true,
        };
        self.ports[usize::from(port.0)] = LineSet::connected();
        card.power_set(true);
        self.power_cycles += 1;
        log.push(now_us, EventKind::Power { on: true });
        log.push(
            now_us,
            EventKind::Lines {
                port,
                line: None,
                state: LineState::Conductive,
            },
        );
        log.push(now_us, EventKind::Grant { from, to: port });
        self.assert_invariant();
        Ok(self.grant)
    }

    /// Returns the card to the DUT.
    pub fn release(&mut self, card: &mut SdCard, log: &mut EventLog, now_us: f64) -> SwitchGrant {
        self.grant(PortId::DUT, card, log, now_us)
            .expect("the DUT port always exists")
    }

    /// Sets one line of one port regardless of the grant.
    ///
    /// Connecting a line of a non-holder is refused unless a fault window is
    /// open. The supply line drives the card's power.
    pub fn set_line(
        &mut self,
        port: PortId,
        line: Line,
        state: LineState,
        card: &mut SdCard,
        log: &mut EventLog,
        now_us: f64,
    ) -> Result<LineSet, SwitchError> {
        self.check_port(port)?;
        if state == LineState::Conductive && self.grant.holder != Some(port) && !self.in_fault_window() {
            return Err(SwitchError::ExclusivityViolation { port, line });
        }
        let lines = &mut self.ports[usize::from(port.0)];
        if lines.get(line) != state {
            lines.set(line, state);
            log.push(
                now_us,
                EventKind::Lines {
                    port,
                    line: Some(line),
                    state,
                },
            );
        }
        let result = *lines;
        self.sync_card_power(card, log, now_us);
        self.assert_invariant();
        Ok(result)
    }

    /// Puts a line back to what the grant implies: conductive for the
    /// holder, disconnected for everyone else.
    pub fn restore_line(
        &mut self,
        port: PortId,
        line: Line,
        card: &mut SdCard,
        log: &mut EventLog,
        now_us: f64,
    ) -> Result<LineSet, SwitchError> {
        let state = if self.grant.holder == Some(port) {
            LineState::Conductive
        } else {
            LineState::Disconnected
        };
        self.set_line(port, line, state, card, log, now_us)
    }

    pub fn open_fault_window(&mut self, log: &mut EventLog, now_us: f64) -> WindowToken {
        let token = self.next_window;
        self.next_window += 1;
        self.windows.insert(token);
        log.push(now_us, EventKind::WindowOpen { token });
        WindowToken(token)
    }

    /// Closes a window. When the last one closes, lines of non-holders that
    /// were connected inside it are disconnected again.
    pub fn close_fault_window(
        &mut self,
        token: WindowToken,
        card: &mut SdCard,
        log: &mut EventLog,
        now_us: f64,
    ) -> Result<(), SwitchError> {
        if !self.windows.remove(&token.0) {
            return Err(SwitchError::UnknownWindow(token.0));
        }
        // Strays go before the close is logged so no instant shows them outside a window.
        if self.windows.is_empty() {
            for i in 0..self.ports.len() {
                let port = PortId(i as u8);
                if Some(port) != self.grant.holder && self.ports[i].any_conductive() {
                    self.ports[i] = LineSet::disconnected();
                    log.push(
                        now_us,
                        EventKind::Lines {
                            port,
                            line: None,
                            state: LineState::Disconnected,
                        },
                    );
                }
            }
        }
        log.push(now_us, EventKind::WindowClose { token: token.0 });
        if self.windows.is_empty() {
            self.sync_card_power(card, log, now_us);
        }
        self.assert_invariant();
        Ok(())
    }

    pub(crate) fn clear_repower_pending(&mut self) {
        self.grant.repower_pending = false;
    }
}
