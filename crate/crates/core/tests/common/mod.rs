#![allow(dead_code)]

use std::io;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use netsd_core::bus::BusModel;
use netsd_core::{Arbiter, Backing, CardConfig, MemBacking, Testbed, TestbedConfig};

/// Memory backing that can be inspected from outside the card and counts accesses.
#[derive(Clone, Default)]
pub struct Probe {
    pub image: Arc<Mutex<Vec<u8>>>,
    pub reads: Arc<AtomicU64>,
    pub writes: Arc<AtomicU64>,
}

impl Probe {
    pub fn new(len: usize) -> Self {
        Probe {
            image: Arc::new(Mutex::new(vec![0; len])),
            ..Default::default()
        }
    }

    pub fn snapshot(&self) -> Vec<u8> {
        self.image.lock().unwrap().clone()
    }

    pub fn accesses(&self) -> u64 {
        self.reads.load(Ordering::SeqCst) + self.writes.load(Ordering::SeqCst)
    }
}

impl Backing for Probe {
    fn len(&self) -> u64 {
        self.image.lock().unwrap().len() as u64
    }

    fn read_at(&mut self, offset: u64, buf: &mut [u8]) -> io::Result<()> {
        self.reads.fetch_add(1, Ordering::SeqCst);
        let img = self.image.lock().unwrap();
        let at = offset as usize;
        buf.copy_from_slice(&img[at..at + buf.len()]);
        Ok(())
    }

    fn write_at(&mut self, offset: u64, data: &[u8]) -> io::Result<()> {
        self.writes.fetch_add(1, Ordering::SeqCst);
        let mut img = self.image.lock().unwrap();
        let at = offset as usize;
        img[at..at + data.len()].copy_from_slice(data);
        Ok(())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

pub fn config(capacity: u64, n_ports: usize, bus: BusModel, seed: u64) -> TestbedConfig {
    TestbedConfig {
        card: CardConfig {
            capacity_bytes: capacity,
            ..Default::default()
        },
        n_ports,
        bus,
        seed,
        ..Default::default()
    }
}

/// A noiseless 4 MiB card with the DUT holding the grant.
pub fn quiet_bed() -> Arc<Arbiter> {
    let cfg = config(4 << 20, 2, BusModel::noiseless(), 1);
    let mut bed = Testbed::new(cfg, Box::new(MemBacking::zeroed(4 << 20))).unwrap();
    bed.release();
    Arbiter::new(bed)
}

pub fn probed_bed(capacity: usize) -> (Arc<Arbiter>, Probe) {
    let probe = Probe::new(capacity);
    let cfg = config(capacity as u64, 2, BusModel::noiseless(), 1);
    let bed = Testbed::new(cfg, Box::new(probe.clone())).unwrap();
    (Arbiter::new(bed), probe)
}

pub fn pattern(len: usize, seed: u64) -> Vec<u8> {
    use rand::{RngCore, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut v = vec![0; len];
    rng.fill_bytes(&mut v);
    v
}
