//! Gateway settings from a `key = value` file, overridable per key.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use netsd_core::bus::BusConfig;
use netsd_core::sd::{BLOCK_LEN, DEFAULT_CAPACITY, MAX_CAPACITY};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {value:?}")]
    BadValue { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatewayConfig {
    pub nbd_listen: SocketAddr,
    pub http_listen: SocketAddr,
    /// Raw image file; `None` keeps the card in memory.
    pub image: Option<PathBuf>,
    pub capacity: u64,
    pub bus: BusConfig,
    /// Use the calibrated error model; otherwise the channel is noiseless.
    pub noise: bool,
    /// Idle time after which a held grant is taken back for the DUT.
    pub grant_hold_timeout: Duration,
    /// How long a request waits for the grant before giving up.
    pub grant_wait: Duration,
    pub retry_limit: u32,
    pub seed: u64,
    pub faults_enabled: bool,
    /// Event log destination; `-` is standard output.
    pub event_log: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            nbd_listen: SocketAddr::from(([0, 0, 0, 0], 10809)),
            http_listen: SocketAddr::from(([0, 0, 0, 0], 8080)),
            image: None,
            capacity: DEFAULT_CAPACITY,
            bus: BusConfig::switched(false),
            noise: true,
            grant_hold_timeout: Duration::from_secs(30),
            grant_wait: Duration::from_secs(10),
            retry_limit: 64,
            seed: 0,
            faults_enabled: true,
            event_log: None,
        }
    }
}

/// Parses sizes such as `512`, `64MiB`, `4k` or `1G` (binary units).
pub fn parse_size(s: &str) -> Option<u64> {
    let s = s.trim();
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let n: u64 = num.parse().ok()?;
    let shift = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 0,
        "k" | "kb" | "kib" => 10,
        "m" | "mb" | "mib" => 20,
        "g" | "gb" | "gib" => 30,
        _ => return None,
    };
    n.checked_mul(1 << shift)
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Some(true),
        "0" | "false" | "no" | "off" => Some(false),
        _ => None,
    }
}

fn parse_secs(s: &str) -> Option<Duration> {
    let v: f64 = s.trim_end_matches('s').parse().ok()?;
    Duration::try_from_secs_f64(v).ok()
}

impl GatewayConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        let v = value.trim();
        match key.trim() {
            "nbd_listen" => self.nbd_listen = v.parse().map_err(|_| bad())?,
            "http_listen" => self.http_listen = v.parse().map_err(|_| bad())?,
            "nbd_port" => self.nbd_listen.set_port(v.parse().map_err(|_| bad())?),
            "http_port" => self.http_listen.set_port(v.parse().map_err(|_| bad())?),
            "image" => self.image = (!v.is_empty()).then(|| PathBuf::from(v)),
            "capacity" => self.capacity = parse_size(v).ok_or_else(bad)?,
            "explicit_pullups" => self.bus.explicit_pullups = parse_bool(v).ok_or_else(bad)?,
            "cable_length_cm" => self.bus.cable_length_cm = v.parse().map_err(|_| bad())?,
            "crosstalk_safe_layout" => self.bus.crosstalk_safe_layout = parse_bool(v).ok_or_else(bad)?,
            "host_supports_uhs" => self.bus.host_supports_uhs = parse_bool(v).ok_or_else(bad)?,
            "switched" => self.bus.switched = parse_bool(v).ok_or_else(bad)?,
            "noise" => self.noise = parse_bool(v).ok_or_else(bad)?,
            "grant_hold_timeout" => self.grant_hold_timeout = parse_secs(v).ok_or_else(bad)?,
            "grant_wait" => self.grant_wait = parse_secs(v).ok_or_else(bad)?,
            "retry_limit" => self.retry_limit = v.parse().map_err(|_| bad())?,
            "seed" => self.seed = v.parse().map_err(|_| bad())?,
            "faults" => self.faults_enabled = parse_bool(v).ok_or_else(bad)?,
            "event_log" => self.event_log = (!v.is_empty()).then(|| PathBuf::from(v)),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`. `#` starts a comment.
    pub fn apply_str(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = GatewayConfig::default();
        cfg.apply_str(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.nbd_listen.port() != 0 && self.nbd_listen.port() == self.http_listen.port() {
            return invalid(format!("NBD and HTTP ports are both {}", self.nbd_listen.port()));
        }
        if self.capacity == 0 || self.capacity % BLOCK_LEN as u64 != 0 || self.capacity > MAX_CAPACITY {
            return invalid(format!(
                "capacity {} must be a positive multiple of 512 up to {MAX_CAPACITY}",
                self.capacity
            ));
        }
        if self.bus.cable_length_cm.is_nan() || self.bus.cable_length_cm < 0.0 {
            return invalid("cable_length_cm must be non-negative".into());
        }
        if let Some(img) = &self.image {
            if let Some(dir) = img.parent().filter(|d| !d.as_os_str().is_empty()) {
                if !dir.is_dir() {
                    return invalid(format!("directory of image {} does not exist", img.display()));
                }
            }
        }
        Ok(())
    }
}
