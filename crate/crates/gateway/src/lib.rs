//! Network gateway for the switched SD card: an NBD export of the raw card
//! and an HTTP API for files, blocks, the switch and fault injection.

pub mod config;
pub mod nbd;
pub mod rest;
pub mod state;

use std::io;
use std::net::{SocketAddr, TcpListener};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{error, info};
use tokio::sync::oneshot;

pub use config::{ConfigError, GatewayConfig};
pub use state::{GatewayState, RagSession};

/// A running gateway. Stops on [`Gateway::shutdown`] or drop.
pub struct Gateway {
    state: Arc<GatewayState>,
    nbd_addr: SocketAddr,
    http_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    http_stop: Option<oneshot::Sender<()>>,
    threads: Vec<JoinHandle<()>>,
}

impl Gateway {
    /// Builds the testbed from `cfg`, binds both listeners and starts serving.
    pub fn start(cfg: &GatewayConfig) -> io::Result<Gateway> {
        cfg.validate().map_err(io::Error::other)?;
        let state = GatewayState::from_config(cfg)?;
        Self::start_with(state, cfg.nbd_listen, cfg.http_listen)
    }

    /// Serves an existing state on the given addresses. Port 0 picks a free port.
    pub fn start_with(state: Arc<GatewayState>, nbd: SocketAddr, http: SocketAddr) -> io::Result<Gateway> {
        let nbd_listener = TcpListener::bind(nbd)?;
        let http_listener = TcpListener::bind(http)?;
        http_listener.set_nonblocking(true)?;
        let nbd_addr = nbd_listener.local_addr()?;
        let http_addr = http_listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let mut threads = Vec::new();

        let server = nbd::NbdServer::new(Arc::clone(&state), Arc::clone(&stop));
        threads.push(thread::Builder::new().name("nbd".into()).spawn(move || {
            if let Err(e) = server.serve(nbd_listener) {
                error!("nbd server stopped: {e}");
            }
        })?);

        let (arb, flag) = (Arc::clone(&state.arbiter), Arc::clone(&stop));
        threads.push(thread::Builder::new().name("watchdog".into()).spawn(move || {
            while !flag.load(Ordering::SeqCst) {
                let tick = (arb.max_hold() / 4).clamp(Duration::from_millis(5), Duration::from_millis(100));
                thread::sleep(tick);
                if let Some(id) = arb.reap_expired() {
                    info!("lease {id} idle too long; card returned to the DUT");
                }
            }
        })?);

        let (tx, rx) = oneshot::channel::<()>();
        let app = rest::router(Arc::clone(&state));
        threads.push(thread::Builder::new().name("http".into()).spawn(move || {
            let rt = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
                Ok(rt) => rt,
                Err(e) => return error!("http runtime: {e}"),
            };
            rt.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(http_listener) {
                    Ok(l) => l,
                    Err(e) => return error!("http listener: {e}"),
                };
                let shutdown = async {
                    let _ = rx.await;
                };
                if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
                    error!("http server stopped: {e}");
                }
            });
        })?);

        info!("serving NBD on {nbd_addr}, HTTP on {http_addr}");
        Ok(Gateway {
            state,
            nbd_addr,
            http_addr,
            stop,
            http_stop: Some(tx),
            threads,
        })
    }

    pub fn nbd_addr(&self) -> SocketAddr {
        self.nbd_addr
    }

    pub fn http_addr(&self) -> SocketAddr {
        self.http_addr
    }

    pub fn state(&self) -> &Arc<GatewayState> {
        &self.state
    }

    /// Blocks until Ctrl-C, then shuts down.
    pub fn run_until_interrupted(self) -> io::Result<()> {
        tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()?
            .block_on(tokio::signal::ctrl_c())?;
        info!("interrupted; shutting down");
        self.shutdown()
    }

    /// Stops both servers, waits for their threads and flushes the image.
    pub fn shutdown(mut self) -> io::Result<()> {
        self.stop_threads();
        self.state.flush().map_err(io::Error::other)
    }

    fn stop_threads(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(tx) = self.http_stop.take() {
            let _ = tx.send(());
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.stop_threads();
    }
}
