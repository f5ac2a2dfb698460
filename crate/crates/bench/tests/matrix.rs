use netsd_bench::calibrate::evaluate;
use netsd_bench::matrix::find;
use netsd_bench::*;
use netsd_core::bus::{BusModel, Direction};
use proptest::prelude::*;

const KIB: usize = 1024;

/// Expected MB/s from first principles: 4-bit bus at 100 MHz (UHS) or
/// 25 MHz (3.3 V default speed), fixed per-command costs, and commands of at
/// most 64 KiB repeated until they pass.
fn oracle(p: &Params, config: BenchConfig, dir: Direction, block: usize) -> f64 {
    let (c, t, ok) = oracle_parts(p, config, dir, block);
    c * ok / t
}

/// (command bytes, command time in us, probability a command passes)
fn oracle_parts(p: &Params, config: BenchConfig, dir: Direction, block: usize) -> (f64, f64, f64) {
    let c = block.min(64 * KIB) as f64;
    let (bytes_per_us, p_bit, switched) = match config {
        BenchConfig::Baseline => (50.0, 0.0, false),
        BenchConfig::SwitchNoPullups => (
            50.0,
            match dir {
                Direction::Read => p.p_bit_uhs_read,
                Direction::Write => p.p_bit_uhs_write,
            },
            true,
        ),
        BenchConfig::SwitchWithPullups => (12.5, 1e-13, true),
    };
    let mut t = p.per_command_overhead_us + c / bytes_per_us;
    if switched {
        t += p.switch_insertion_us;
    }
    if dir == Direction::Write {
        t += p.write_busy_us;
    }
    (c, t, (1.0 - p_bit).powf(8.0 * c))
}

#[test]
fn analytic_model_matches_first_principles() {
    let p = Params::shipped();
    let bus = p.bus_model();
    for config in BenchConfig::ALL {
        for dir in [Direction::Read, Direction::Write] {
            for shift in 12..=20 {
                let b = 1 << shift;
                let got = expected_mbps(&bus, config, dir, b, 64 * KIB);
                let want = oracle(&p, config, dir, b);
                assert!((got - want).abs() <= 1e-9 * want, "{config} {dir} {b}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn simulation_agrees_with_the_analytic_model() {
    let m = MatrixConfig::default();
    let cells = [
        (Direction::Read, 4 * KIB, BenchConfig::SwitchNoPullups),
        (Direction::Read, 64 * KIB, BenchConfig::SwitchNoPullups),
        (Direction::Write, 32 * KIB, BenchConfig::SwitchNoPullups),
        (Direction::Write, 64 * KIB, BenchConfig::SwitchNoPullups),
        (Direction::Read, 64 * KIB, BenchConfig::Baseline),
        (Direction::Write, 16 * KIB, BenchConfig::SwitchWithPullups),
    ];
    for (dir, b, config) in cells {
        let s = run_cell(&m, dir, b, config).unwrap();
        let want = oracle(&Params::shipped(), config, dir, b);
        let (c, _, ok) = oracle_parts(&Params::shipped(), config, dir, b);
        let n = m.total_bytes as f64 / c;
        let p_fail = 1.0 - ok;
        // Attempts per command are geometric; relative spread of the total is
        // sqrt(p / n). A run that sees no error at all is off by p.
        let tol = 5.0 * (p_fail / n).sqrt() + p_fail + 1e-9;
        let rel = (s.mbps - want).abs() / want;
        assert!(
            rel <= tol,
            "{dir} {b} {config}: {} vs {want} ({rel:.4} > {tol:.4})",
            s.mbps
        );
        if p_fail < 1e-9 {
            assert_eq!(s.retries, 0);
        }
    }
}

fn small() -> MatrixConfig {
    MatrixConfig {
        block_sizes: vec![4 * KIB, 64 * KIB, 256 * KIB],
        total_bytes: 1 << 20,
        ..Default::default()
    }
}

#[test]
fn csv_is_deterministic_and_parallel_runs_match() {
    let m = small();
    let a = run_matrix(&m).unwrap();
    let b = run_matrix(&m).unwrap();
    let c = run_matrix(&MatrixConfig {
        parallel: true,
        ..m.clone()
    })
    .unwrap();
    let csv = |s: &[ThroughputSample]| {
        let mut out = Vec::new();
        write_csv(&mut out, s).unwrap();
        String::from_utf8(out).unwrap()
    };
    assert_eq!(csv(&a), csv(&b));
    assert_eq!(csv(&a), csv(&c));
    let text = csv(&a);
    assert_eq!(text.lines().next(), Some(CSV_HEADER));
    assert_eq!(text.lines().count(), 1 + 2 * 3 * 3);
    assert!(text.lines().nth(1).unwrap().starts_with("read,4096,Baseline,"));
    assert!(a.iter().all(|s| s.mbps > 0.0 && !s.exhausted));

    let other = run_matrix(&MatrixConfig { seed: 99, ..m }).unwrap();
    assert_ne!(csv(&a), csv(&other), "the seed should matter for noisy cells");
}

#[test]
fn commands_above_the_cap_are_identical_cells() {
    let m = small();
    let s = run_matrix(&m).unwrap();
    for dir in [Direction::Read, Direction::Write] {
        for config in BenchConfig::ALL {
            let at64 = find(&s, dir, 64 * KIB, config).unwrap();
            let at256 = find(&s, dir, 256 * KIB, config).unwrap();
            assert_eq!(at64.mbps, at256.mbps);
            assert_eq!(at64.retries, at256.retries);
        }
    }
}

#[test]
fn exhausted_cell_is_recorded_as_zero() {
    let bus = BusModel {
        p_bit_uhs_write: 1e-3,
        ..Default::default()
    };
    let m = MatrixConfig {
        bus,
        retry_limit: 2,
        total_bytes: 256 * KIB as u64,
        ..Default::default()
    };
    let s = run_cell(&m, Direction::Write, 64 * KIB, BenchConfig::SwitchNoPullups).unwrap();
    assert!(s.exhausted);
    assert_eq!(s.mbps, 0.0);
    let ok = run_cell(&m, Direction::Write, 64 * KIB, BenchConfig::SwitchWithPullups).unwrap();
    assert!(!ok.exhausted && ok.mbps > 0.0);
}

#[test]
fn calibration_recovers_the_shipped_constants() {
    let cal = calibrate(&Anchors::default(), &SearchSpace::default()).unwrap();
    assert!(cal.feasible(), "{}", cal.report());
    let shipped = Calibration::at(Params::shipped(), &Anchors::default());
    assert!(shipped.feasible(), "{}", shipped.report());
    assert!((cal.min_margin - shipped.min_margin).abs() < 1e-3);
    let (a, b) = (cal.params, Params::shipped());
    for (x, y) in [
        (a.p_bit_uhs_read, b.p_bit_uhs_read),
        (a.p_bit_uhs_write, b.p_bit_uhs_write),
        (a.per_command_overhead_us, b.per_command_overhead_us),
        (a.switch_insertion_us, b.switch_insertion_us),
        (a.write_busy_us, b.write_busy_us),
    ] {
        assert!((x - y).abs() <= 1e-3 * y, "{x} vs {y}");
    }
    let report = cal.report();
    assert!(report.contains("feasible                = true"));
    assert!(report.contains("sum_squared_error"));
}

#[test]
fn calibration_without_noise_is_infeasible() {
    match calibrate(&Anchors::default(), &SearchSpace::noiseless()) {
        Err(CalibrationError::CalibrationInfeasible(best)) => {
            let failing: Vec<_> = best
                .checks
                .iter()
                .filter(|c| c.margin <= 0.0)
                .map(|c| &c.name)
                .collect();
            assert!(failing.iter().any(|n| n.contains("peak at 32K")), "{failing:?}");
            assert_eq!(best.params.p_bit_uhs_read, 0.0);
        }
        Ok(c) => panic!("noiseless model fitted:\n{}", c.report()),
    }
}

#[test]
fn class_ten_floors_hold_for_baseline() {
    let bus = BusModel::default();
    assert!(expected_mbps(&bus, BenchConfig::Baseline, Direction::Read, 64 * KIB, 64 * KIB) >= 20.0);
    assert!(expected_mbps(&bus, BenchConfig::Baseline, Direction::Write, 64 * KIB, 64 * KIB) >= 12.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Without bit errors a larger command always amortizes the fixed cost better.
    #[test]
    fn noiseless_throughput_rises_with_block_size(
        o in 1.0f64..2000.0, s in 0.0f64..500.0, w in 0.0f64..5000.0, shift in 12u32..20,
    ) {
        let p = Params { p_bit_uhs_read: 0.0, p_bit_uhs_write: 0.0, per_command_overhead_us: o,
            switch_insertion_us: s, write_busy_us: w };
        let bus = p.bus_model();
        for config in BenchConfig::ALL {
            for dir in [Direction::Read, Direction::Write] {
                let a = expected_mbps(&bus, config, dir, 1 << shift, 1 << 20);
                let b = expected_mbps(&bus, config, dir, 1 << (shift + 1), 1 << 20);
                prop_assert!(b > a);
            }
        }
    }

    /// More bit errors never help.
    #[test]
    fn throughput_falls_with_error_rate(p1 in 1e-9f64..1e-5, k in 1.0f64..10.0, shift in 12u32..21) {
        let lo = Params { p_bit_uhs_read: p1, p_bit_uhs_write: p1, ..Params::shipped() };
        let hi = Params { p_bit_uhs_read: p1 * k, p_bit_uhs_write: p1 * k, ..Params::shipped() };
        for dir in [Direction::Read, Direction::Write] {
            let a = expected_mbps(&lo.bus_model(), BenchConfig::SwitchNoPullups, dir, 1 << shift, 64 * KIB);
            let b = expected_mbps(&hi.bus_model(), BenchConfig::SwitchNoPullups, dir, 1 << shift, 64 * KIB);
            prop_assert!(b <= a);
        }
    }

    /// Every reported margin is consistent with its pass/fail reading.
    #[test]
    fn margins_are_finite_or_unbounded(p in 1e-8f64..1e-5, o in 10.0f64..1000.0) {
        let params = Params { p_bit_uhs_read: p, p_bit_uhs_write: p * 6.0, per_command_overhead_us: o, ..Params::shipped() };
        for c in evaluate(&params, &Anchors::default()) {
            prop_assert!(!c.margin.is_nan(), "{}", c.name);
        }
    }
}
