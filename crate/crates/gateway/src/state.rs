//! State shared by the NBD and HTTP front ends.

use std::fs::File;
use std::io::{self, Write};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use netsd_core::bus::BusModel;
use netsd_core::sd::CardConfig;
use netsd_core::{
    Arbiter, ArbiterError, Backing, FileBacking, HostConfig, HostError, HostSession, HostStats, Lease, MemBacking,
    PortId, Testbed, TestbedConfig,
};

use crate::config::GatewayConfig;

/// A gateway-side session on the card, valid while its lease is.
pub struct RagSession {
    pub host: HostSession,
    pub lease: Lease,
    state: Arc<GatewayState>,
}

impl Drop for RagSession {
    fn drop(&mut self) {
        let s = self.host.stats();
        let mut total = self.state.stats();
        total.attempts += s.attempts;
        total.retries += s.retries;
        total.crc_errors += s.crc_errors;
        total.timeouts += s.timeouts;
        total.reinits += s.reinits;
        total.bytes_ok += s.bytes_ok;
        total.elapsed_us += s.elapsed_us;
    }
}

#[derive(Debug)]
pub struct GatewayState {
    pub arbiter: Arc<Arbiter>,
    pub host_config: HostConfig,
    pub grant_wait: Duration,
    pub capacity: u64,
    nbd_session: Mutex<Option<u64>>,
    rag_stats: Mutex<HostStats>,
}

impl GatewayState {
    pub fn new(arbiter: Arc<Arbiter>, host_config: HostConfig, grant_wait: Duration) -> Arc<Self> {
        let capacity = arbiter.lock().card().capacity_bytes();
        Arc::new(GatewayState {
            arbiter,
            host_config,
            grant_wait,
            capacity,
            nbd_session: Mutex::new(None),
            rag_stats: Mutex::new(HostStats::default()),
        })
    }

    /// Builds the card, switch and arbiter described by `cfg`. The DUT holds the grant.
    pub fn from_config(cfg: &GatewayConfig) -> io::Result<Arc<Self>> {
        let backing: Box<dyn Backing> = match &cfg.image {
            Some(path) => Box::new(FileBacking::open_or_create(path, cfg.capacity)?),
            None => Box::new(MemBacking::zeroed(cfg.capacity)),
        };
        let bed_cfg = TestbedConfig {
            card: CardConfig {
                capacity_bytes: cfg.capacity,
                ..Default::default()
            },
            bus: if cfg.noise {
                BusModel::default()
            } else {
                BusModel::noiseless()
            },
            port_configs: vec![cfg.bus; 2],
            seed: cfg.seed,
            faults_enabled: cfg.faults_enabled,
            ..Default::default()
        };
        let mut bed = Testbed::new(bed_cfg, backing).map_err(io::Error::other)?;
        if let Some(path) = &cfg.event_log {
            let sink: Box<dyn Write + Send> = if path.as_os_str() == "-" {
                Box::new(io::stdout())
            } else {
                Box::new(File::create(path)?)
            };
            bed.log_mut().set_sink(sink);
        }
        bed.release();
        let arbiter = Arbiter::new(bed);
        arbiter.set_max_hold(cfg.grant_hold_timeout);
        let host = HostConfig {
            retry_limit: cfg.retry_limit,
            ..Default::default()
        };
        Ok(Self::new(arbiter, host, cfg.grant_wait))
    }

    /// Takes the grant for the gateway and initializes the card on its port.
    pub fn rag_session(self: &Arc<Self>, owner: &str) -> Result<RagSession, HostError> {
        let lease = self.arbiter.acquire(owner, self.grant_wait)?;
        let mut host = HostSession::new(Arc::clone(&self.arbiter), PortId::RAG, self.host_config);
        host.init()?;
        Ok(RagSession {
            host,
            lease,
            state: Arc::clone(self),
        })
    }

    /// Claims the single NBD transmission slot for connection `conn`.
    pub fn claim_nbd(&self, conn: u64) -> bool {
        let mut slot = self.nbd_session.lock().unwrap_or_else(|e| e.into_inner());
        if slot.is_some() {
            return false;
        }
        *slot = Some(conn);
        true
    }

    pub fn release_nbd(&self, conn: u64) {
        let mut slot = self.nbd_session.lock().unwrap_or_else(|e| e.into_inner());
        if *slot == Some(conn) {
            *slot = None;
        }
    }

    pub fn nbd_connection(&self) -> Option<u64> {
        *self.nbd_session.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn stats(&self) -> MutexGuard<'_, HostStats> {
        self.rag_stats.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Flushes the backing image.
    pub fn flush(&self) -> Result<(), ArbiterError> {
        self.arbiter.lock().flush()
    }
}
