mod common;

use netsd_core::bus::{BusModel, Direction, Line, LineState, TransferStatus};
use netsd_core::crc::crc16;
use netsd_core::events::EventKind;
use netsd_core::faults::OmitTarget;
use netsd_core::sd::{cmd, SdCommand};
use netsd_core::{
    Arbiter, FaultKind, FaultRequest, FaultStatus, HostConfig, HostError, HostSession, MemBacking, PortId, Testbed,
    Trigger,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MIB: usize = 1 << 20;

fn schedule(arb: &Arbiter, kind: FaultKind) -> u64 {
    arb.lock()
        .schedule_fault(FaultRequest {
            kind,
            trigger: Trigger::Immediate,
        })
        .unwrap()
}

/// A DUT session on a fresh card whose first `len` bytes hold a known pattern.
fn loaded(bus: BusModel, seed: u64, len: usize) -> (std::sync::Arc<Arbiter>, HostSession, Vec<u8>) {
    let data = common::pattern(len, seed);
    let mut image = data.clone();
    image.resize(4 * MIB, 0);
    let mut bed = Testbed::new(
        common::config(4 * MIB as u64, 2, bus, seed),
        Box::new(MemBacking::from_vec(image)),
    )
    .unwrap();
    bed.release();
    let arb = Arbiter::new(bed);
    let mut dut = HostSession::new(arb.clone(), PortId::DUT, HostConfig::default());
    dut.init().unwrap();
    (arb, dut, data)
}

fn workload(faults_enabled: bool) -> (Vec<u8>, String, Vec<String>) {
    let mut cfg = common::config(4 * MIB as u64, 2, BusModel::default(), 99);
    cfg.faults_enabled = faults_enabled;
    let mut bed = Testbed::new(cfg, Box::new(MemBacking::zeroed(4 * MIB as u64))).unwrap();
    bed.release();
    let arb = Arbiter::new(bed);
    let host = HostConfig {
        retry_limit: 64,
        ..Default::default()
    };
    let mut dut = HostSession::new(arb.clone(), PortId::DUT, host);
    dut.init().unwrap();
    dut.write(0, &common::pattern(2 * MIB, 5), 65536).unwrap();
    let back = dut.read(0, 4096, 32768).unwrap();
    let events = arb.lock().drain_events().iter().map(|e| e.to_string()).collect();
    (back, format!("{:?}", dut.stats()), events)
}

#[test]
fn zero_faults_match_disabled_engine() {
    let on = workload(true);
    let off = workload(false);
    assert!(on.1.contains("retries"));
    assert_eq!(on, off);
}

#[test]
fn short_disconnects_are_survived() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for round in 0..40 {
        let (arb, mut dut, data) = loaded(BusModel::noiseless(), round, 64 * 512);
        let budget = dut.retry_budget_us() as u64;
        let line = Line::ALL[round as usize % Line::ALL.len()];
        let duration_us = rng.random_range(1..budget);
        let id = schedule(
            &arb,
            FaultKind::LineDisconnect {
                port: PortId::DUT,
                line,
                duration_us,
            },
        );
        let got = dut.read(0, 64, 8192);
        let got = got.unwrap_or_else(|e| panic!("{line:?} for {duration_us}us: {e}"));
        assert_eq!(got, data, "{line:?}");
        assert!(dut.stats().timeouts >= 1, "{line:?}");
        assert_eq!(arb.lock().list_faults()[0].status, FaultStatus::Expired);
        let events = arb.lock().drain_events();
        let activated = events
            .iter()
            .filter(|e| e.kind == EventKind::FaultActivated { id })
            .count();
        let expired = events
            .iter()
            .filter(|e| e.kind == EventKind::FaultExpired { id })
            .count();
        assert_eq!((activated, expired), (1, 1));
        assert!(arb.lock().switch().exclusivity_holds());
        assert!(!arb.lock().switch().in_fault_window());
    }
}

#[test]
fn disconnect_longer_than_budget_fails_cleanly() {
    let (arb, mut dut, _) = loaded(BusModel::noiseless(), 1, 4096);
    let budget = dut.retry_budget_us() as u64;
    schedule(
        &arb,
        FaultKind::LineDisconnect {
            port: PortId::DUT,
            line: Line::Dat0,
            duration_us: budget * 3,
        },
    );
    assert!(dut.read(0, 8, 4096).is_err());
}

/// Reads through an active corruption fault and checks every altered frame is flagged.
fn corrupt_reads(max_flips: u32, burst_span: Option<u32>, rounds: usize) -> (u64, u64) {
    let (arb, _dut, data) = loaded(BusModel::noiseless(), 3, 16 * 512);
    schedule(
        &arb,
        FaultKind::Corrupt {
            direction: Direction::Read,
            bit_flip_rate: 1.0,
            window_us: u64::MAX / 2,
            max_flips_per_block: Some(max_flips),
            burst_span_bits: burst_span,
        },
    );
    let (mut altered, mut flagged) = (0, 0);
    let mut bed = arb.lock();
    for _ in 0..rounds {
        bed.command(PortId::DUT, &SdCommand::new(cmd::READ_MULTIPLE_BLOCK, 0))
            .unwrap();
        let rd = bed.read_data(PortId::DUT, 16, true).unwrap().value.unwrap();
        bed.command(PortId::DUT, &SdCommand::new(cmd::STOP_TRANSMISSION, 0))
            .unwrap();
        let mut any = false;
        for (i, b) in rd.blocks.iter().enumerate() {
            let frame = &b.payload;
            let mut clean = data[i * 512..(i + 1) * 512].to_vec();
            clean.extend_from_slice(&crc16(&clean).to_be_bytes());
            if frame != &clean {
                altered += 1;
                any = true;
                let (body, crc) = frame.split_at(512);
                if crc16(body) != u16::from_be_bytes([crc[0], crc[1]]) {
                    flagged += 1;
                }
            }
        }
        assert_eq!(rd.status == TransferStatus::CrcDetectedError, any);
    }
    (altered, flagged)
}

#[test]
fn short_bursts_are_always_detected() {
    for span in [1, 8, 16] {
        let (altered, flagged) = corrupt_reads(15, Some(span), 200);
        assert!(altered > 1000);
        assert_eq!(altered, flagged, "span {span}");
    }
}

#[test]
fn up_to_three_scattered_flips_are_always_detected() {
    let (altered, flagged) = corrupt_reads(3, None, 200);
    assert!(altered > 1000);
    assert_eq!(altered, flagged);
}

#[test]
fn host_never_returns_corrupted_data() {
    let (arb, mut dut, data) = loaded(BusModel::noiseless(), 4, 32 * 512);
    schedule(
        &arb,
        FaultKind::Corrupt {
            direction: Direction::Read,
            bit_flip_rate: 2e-4,
            window_us: u64::MAX / 2,
            max_flips_per_block: Some(15),
            burst_span_bits: Some(16),
        },
    );
    for _ in 0..20 {
        match dut.read(0, 32, 16384) {
            Ok(got) => assert_eq!(got, data),
            Err(HostError::RetriesExhausted { .. }) => {}
            Err(e) => panic!("{e}"),
        }
    }
    assert!(dut.stats().crc_errors > 0);
}

/// Raw command outcomes and host results as seen from the DUT.
fn observe(arb: &Arbiter, dut: &mut HostSession) -> Vec<String> {
    let mut seen = Vec::new();
    for index in [cmd::GO_IDLE_STATE, cmd::SEND_IF_COND, cmd::READ_SINGLE_BLOCK] {
        let s = arb.lock().command(PortId::DUT, &SdCommand::new(index, 0)).unwrap();
        seen.push(format!("{index}:{:?}:{}", s.value, s.elapsed_us));
    }
    let s = arb.lock().read_data(PortId::DUT, 1, true).unwrap();
    seen.push(format!("data:{:?}:{}", s.value, s.elapsed_us));
    let before = dut.stats();
    seen.push(format!("{:?}", dut.read(0, 4, 2048).map_err(|e| e.to_string())));
    seen.push(format!("{:?}", dut.init().map_err(|e| e.to_string())));
    let after = dut.stats();
    seen.push(format!(
        "timeouts+{} elapsed+{}",
        after.timeouts - before.timeouts,
        after.elapsed_us - before.elapsed_us
    ));
    seen
}

#[test]
fn clock_loss_looks_like_power_loss() {
    let (arb_clk, mut dut_clk, _) = loaded(BusModel::noiseless(), 6, 4096);
    schedule(
        &arb_clk,
        FaultKind::LineDisconnect {
            port: PortId::DUT,
            line: Line::Clk,
            duration_us: u64::MAX / 2,
        },
    );
    let (arb_off, mut dut_off, _) = loaded(BusModel::noiseless(), 6, 4096);
    arb_off
        .lock()
        .set_line(PortId::DUT, Line::Power, LineState::Disconnected)
        .unwrap();
    assert!(!arb_off.lock().switch().card_powered());
    assert_eq!(observe(&arb_clk, &mut dut_clk), observe(&arb_off, &mut dut_off));
}

#[test]
fn omitted_read_is_retried() {
    let (arb, mut dut, data) = loaded(BusModel::noiseless(), 7, 512);
    let id = schedule(
        &arb,
        FaultKind::Omit {
            target: OmitTarget::Command(cmd::READ_SINGLE_BLOCK),
            count: 1,
        },
    );
    assert_eq!(dut.read(0, 1, 512).unwrap(), data);
    assert_eq!(dut.stats().timeouts, 1);
    assert_eq!(arb.lock().list_faults()[0].status, FaultStatus::Expired);
    let events = arb.lock().drain_events();
    assert!(events.iter().any(|e| e.kind == EventKind::FaultExpired { id }));
}

#[test]
fn replay_serves_stale_data_silently() {
    let (arb, mut dut, old) = loaded(BusModel::noiseless(), 8, 512);
    // A single-block read is a command transaction followed by a data transaction.
    let t0 = arb.lock().tx_count();
    let id = schedule(
        &arb,
        FaultKind::Replay {
            capture_from_tx: t0 + 1,
            capture_count: 1,
            inject_at_tx: t0 + 2,
        },
    );
    assert_eq!(dut.read(0, 1, 512).unwrap(), old);
    let fresh = vec![0x5Au8; 512];
    dut.write(0, &fresh, 512).unwrap();
    assert_eq!(dut.read(0, 1, 512).unwrap(), old, "replayed frame carries a valid CRC");
    assert_eq!(dut.stats().crc_errors, 0);
    assert_eq!(arb.lock().list_faults()[0].status, FaultStatus::Expired);
    assert_eq!(dut.read(0, 1, 512).unwrap(), fresh);
    let events = arb.lock().drain_events();
    assert!(events.iter().any(|e| e.kind == EventKind::FaultExpired { id }));
}

#[test]
fn cancel_restores_lines() {
    let (arb, mut dut, data) = loaded(BusModel::noiseless(), 9, 512);
    let id = schedule(
        &arb,
        FaultKind::LineDisconnect {
            port: PortId::DUT,
            line: Line::Cmd,
            duration_us: u64::MAX / 2,
        },
    );
    assert!(!arb.lock().lines(PortId::DUT).unwrap().is_conductive(Line::Cmd));
    assert_eq!(arb.lock().cancel_fault(id).unwrap(), FaultStatus::Cancelled);
    assert!(arb.lock().lines(PortId::DUT).unwrap().is_conductive(Line::Cmd));
    assert!(!arb.lock().switch().in_fault_window());
    assert_eq!(dut.read(0, 1, 512).unwrap(), data);
    assert_eq!(arb.lock().cancel_fault(id).unwrap(), FaultStatus::Cancelled);
}

#[test]
fn triggers_fire_on_count_and_time() {
    let (arb, mut dut, _) = loaded(BusModel::noiseless(), 10, 512);
    let tx = arb.lock().tx_count();
    let now = arb.lock().now_us() as u64;
    let delay = FaultKind::Delay {
        added_us: 10,
        window_us: 1_000_000,
    };
    let by_count = arb
        .lock()
        .schedule_fault(FaultRequest {
            kind: delay.clone(),
            trigger: Trigger::AtTransactionCount(tx + 5),
        })
        .unwrap();
    let by_time = arb
        .lock()
        .schedule_fault(FaultRequest {
            kind: delay,
            trigger: Trigger::AtSimTime(now + 1_000_000),
        })
        .unwrap();
    let status = |id| {
        arb.lock()
            .list_faults()
            .into_iter()
            .find(|f| f.id == id)
            .unwrap()
            .status
    };
    assert_eq!(status(by_count), FaultStatus::Armed);
    dut.read(0, 1, 512).unwrap();
    dut.read(0, 1, 512).unwrap();
    dut.read(0, 1, 512).unwrap();
    assert_eq!(status(by_count), FaultStatus::Active);
    assert_eq!(status(by_time), FaultStatus::Armed);
    arb.lock().advance(1_000_000.0);
    assert_eq!(status(by_time), FaultStatus::Active);
    assert_eq!(status(by_count), FaultStatus::Expired);
}
