//! Fit of the bus model constants to the published throughput relations.
//!
//! Every anchor is an inequality. The search maximizes the smallest margin
//! over all of them (grid, then pattern search), so the result sits as far
//! inside the feasible region as the model allows. Margins are log factors:
//! a margin of 0.05 means the quantity can move by about 5% before the anchor
//! breaks, which is the scale on which simulation noise acts. Squared errors
//! against the point targets are reported alongside.

use std::fmt::{self, Write as _};

use netsd_core::bus::{calibrated, BusModel, Direction};
use thiserror::Error;

use crate::matrix::BenchConfig;
use crate::model::expected_mbps;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Params {
    pub p_bit_uhs_read: f64,
    pub p_bit_uhs_write: f64,
    pub per_command_overhead_us: f64,
    pub switch_insertion_us: f64,
    pub write_busy_us: f64,
}

impl Params {
    /// The constants the crate ships with.
    pub fn shipped() -> Self {
        Params {
            p_bit_uhs_read: calibrated::P_BIT_UHS_READ,
            p_bit_uhs_write: calibrated::P_BIT_UHS_WRITE,
            per_command_overhead_us: calibrated::PER_COMMAND_OVERHEAD_US,
            switch_insertion_us: calibrated::SWITCH_INSERTION_US,
            write_busy_us: calibrated::WRITE_BUSY_US,
        }
    }

    pub fn bus_model(&self) -> BusModel {
        let mut m = BusModel {
            p_bit_uhs_read: self.p_bit_uhs_read,
            p_bit_uhs_write: self.p_bit_uhs_write,
            ..Default::default()
        };
        m.timing.per_command_overhead_us = self.per_command_overhead_us;
        m.timing.switch_insertion_us = self.switch_insertion_us;
        m.timing.write_busy_us = self.write_busy_us;
        m
    }

    fn from_vec(v: [f64; 5]) -> Self {
        Params {
            p_bit_uhs_read: v[0],
            p_bit_uhs_write: v[1],
            per_command_overhead_us: v[2],
            switch_insertion_us: v[3],
            write_busy_us: v[4],
        }
    }
}

/// Closed interval searched for one constant. Error rates are searched on a
/// log scale when the lower bound is positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Range { lo: v, hi: v }
    }

    fn log(&self) -> bool {
        self.lo > 0.0
    }

    #[cfg(test)]
    fn unit_of(&self, v: f64) -> f64 {
        if self.hi <= self.lo {
            0.0
        } else if self.log() {
            (v.ln() - self.lo.ln()) / (self.hi.ln() - self.lo.ln())
        } else {
            (v - self.lo) / (self.hi - self.lo)
        }
    }

    fn value_at(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        if self.hi <= self.lo {
            self.lo
        } else if self.log() {
            (self.lo.ln() + u * (self.hi.ln() - self.lo.ln()))
                .exp()
                .clamp(self.lo, self.hi)
        } else {
            self.lo + u * (self.hi - self.lo)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    /// In the order of [`Params`] fields.
    pub ranges: [Range; 5],
    pub grid_points: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            ranges: [
                Range::new(5e-8, 5e-6),
                Range::new(2e-7, 3e-5),
                Range::new(50.0, 1000.0),
                Range::new(0.0, 100.0),
                Range::new(0.0, 2000.0),
            ],
            grid_points: 7,
        }
    }
}

impl SearchSpace {
    /// The default space with the error rates pinned to zero.
    pub fn noiseless() -> Self {
        let mut s = Self::default();
        s.ranges[0] = Range::fixed(0.0);
        s.ranges[1] = Range::fixed(0.0);
        s
    }
}

/// The relations the fitted model has to reproduce.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchors {
    pub block_sizes: Vec<usize>,
    pub anchor_block: usize,
    pub max_command_bytes: usize,
    /// Read NoPullups / WithPullups at the anchor block: (lo, hi, target).
    pub read_np_over_wp: (f64, f64, f64),
    pub read_np_over_base: (f64, f64, f64),
    /// 1 - WithPullups / NoPullups on reads, at every block size.
    pub read_degradation: (f64, f64),
    pub write_wp_over_np: (f64, f64, f64),
    pub write_wp_over_base: (f64, f64, f64),
    /// Block size at which write NoPullups peaks.
    pub write_peak_block: usize,
    pub read_floor_mbps: f64,
    pub write_floor_mbps: f64,
}

impl Default for Anchors {
    fn default() -> Self {
        Anchors {
            block_sizes: (12..=20).map(|s| 1usize << s).collect(),
            anchor_block: 64 << 10,
            max_command_bytes: 64 << 10,
            read_np_over_wp: (2.5, 3.5, 3.0),
            read_np_over_base: (0.65, 0.79, 0.72),
            read_degradation: (0.30, 0.65),
            write_wp_over_np: (1.6, 2.4, 2.0),
            write_wp_over_base: (0.35, 0.45, 0.40),
            write_peak_block: 32 << 10,
            read_floor_mbps: 20.0,
            write_floor_mbps: 12.0,
        }
    }
}

/// One anchor evaluated at a parameter set. `margin` is positive when the
/// anchor holds: the log of the factor by which it holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub margin: f64,
}

fn band(name: String, v: f64, lo: f64, hi: f64) -> Check {
    Check {
        name,
        value: v,
        margin: (v / lo).ln().min((hi / v).ln()),
    }
}

fn floor(name: String, v: f64, min: f64) -> Check {
    Check {
        name,
        value: v,
        margin: (v / min).ln(),
    }
}

/// Series of expected throughputs over the anchor block sizes.
fn series(bus: &BusModel, a: &Anchors, c: BenchConfig, d: Direction) -> Vec<f64> {
    a.block_sizes
        .iter()
        .map(|&b| expected_mbps(bus, c, d, b, a.max_command_bytes))
        .collect()
}

/// Evaluates every anchor for `p`.
pub fn evaluate(p: &Params, a: &Anchors) -> Vec<Check> {
    use BenchConfig::*;
    use Direction::*;
    let bus = p.bus_model();
    let at = |c, d| expected_mbps(&bus, c, d, a.anchor_block, a.max_command_bytes);
    let kib = a.anchor_block >> 10;
    let mut out = Vec::new();

    let (r_np, r_wp, r_base) = (
        at(SwitchNoPullups, Read),
        at(SwitchWithPullups, Read),
        at(Baseline, Read),
    );
    let (w_np, w_wp, w_base) = (
        at(SwitchNoPullups, Write),
        at(SwitchWithPullups, Write),
        at(Baseline, Write),
    );
    let (lo, hi, _) = a.read_np_over_wp;
    out.push(band(format!("read {kib}K NoPullups/WithPullups"), r_np / r_wp, lo, hi));
    let (lo, hi, _) = a.read_np_over_base;
    out.push(band(format!("read {kib}K NoPullups/Baseline"), r_np / r_base, lo, hi));
    let (lo, hi, _) = a.write_wp_over_np;
    out.push(band(format!("write {kib}K WithPullups/NoPullups"), w_wp / w_np, lo, hi));
    let (lo, hi, _) = a.write_wp_over_base;
    out.push(band(
        format!("write {kib}K WithPullups/Baseline"),
        w_wp / w_base,
        lo,
        hi,
    ));
    out.push(floor(format!("read {kib}K Baseline MB/s"), r_base, a.read_floor_mbps));
    out.push(floor(format!("write {kib}K Baseline MB/s"), w_base, a.write_floor_mbps));

    let rn = series(&bus, a, SwitchNoPullups, Read);
    let rw = series(&bus, a, SwitchWithPullups, Read);
    let (lo, hi) = a.read_degradation;
    for (i, &b) in a.block_sizes.iter().enumerate() {
        // Degradation d = 1 - WP/NP; the band on d is a band on NP/WP.
        let r = rn[i] / rw[i];
        let margin = band(String::new(), r, 1.0 / (1.0 - lo), 1.0 / (1.0 - hi)).margin;
        out.push(Check {
            name: format!("read {}K degradation", b >> 10),
            value: 1.0 - rw[i] / rn[i],
            margin,
        });
    }

    for c in BenchConfig::ALL {
        let s = series(&bus, a, c, Read);
        let upto = a.block_sizes.iter().take_while(|&&b| b <= a.anchor_block).count();
        let rise = s[..upto]
            .windows(2)
            .map(|w| (w[1] / w[0]).ln())
            .fold(f64::INFINITY, f64::min);
        out.push(Check {
            name: format!("read {c} rising to {kib}K"),
            value: rise,
            margin: rise,
        });
    }

    let wn = series(&bus, a, SwitchNoPullups, Write);
    let peak = a.block_sizes.iter().position(|&b| b == a.write_peak_block).unwrap_or(0);
    let best_other = wn
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != peak)
        .map(|(_, &v)| v)
        .fold(0.0, f64::max);
    let lead = (wn[peak] / best_other).ln();
    out.push(Check {
        name: format!("write NoPullups peak at {}K", a.write_peak_block >> 10),
        value: lead,
        margin: lead,
    });
    // Steps away from the peak may be flat (commands are capped), never uphill.
    let mut shape = f64::INFINITY;
    for i in 1..wn.len() {
        let step = (wn[i] / wn[i - 1]).ln();
        let uphill = if i <= peak { -step } else { step };
        if uphill > 1e-12 {
            shape = shape.min(-uphill);
        }
    }
    out.push(Check {
        name: "write NoPullups unimodal".into(),
        value: shape.min(0.0),
        margin: shape,
    });

    let wp = series(&bus, a, SwitchWithPullups, Write);
    let above = a
        .block_sizes
        .iter()
        .zip(wp.iter().zip(&wn))
        .filter(|(&b, _)| b > a.write_peak_block);
    let gain = above.map(|(_, (w, n))| (w / n).ln()).fold(f64::INFINITY, f64::min);
    out.push(Check {
        name: format!("write WithPullups > NoPullups above {}K", a.write_peak_block >> 10),
        value: gain,
        margin: gain,
    });
    out
}

fn min_margin(checks: &[Check]) -> f64 {
    checks.iter().map(|c| c.margin).fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Residual {
    pub name: String,
    pub value: f64,
    pub target: f64,
}

impl Residual {
    pub fn squared(&self) -> f64 {
        (self.value - self.target).powi(2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub params: Params,
    pub checks: Vec<Check>,
    pub min_margin: f64,
    pub residuals: Vec<Residual>,
    pub evaluations: u64,
}

impl Calibration {
    pub fn at(params: Params, anchors: &Anchors) -> Self {
        let checks = evaluate(&params, anchors);
        let min_margin = min_margin(&checks);
        let targets = [
            anchors.read_np_over_wp.2,
            anchors.read_np_over_base.2,
            anchors.write_wp_over_np.2,
            anchors.write_wp_over_base.2,
        ];
        let residuals = checks
            .iter()
            .zip(targets)
            .map(|(c, t)| Residual {
                name: c.name.clone(),
                value: c.value,
                target: t,
            })
            .collect();
        Calibration {
            params,
            checks,
            min_margin,
            residuals,
            evaluations: 1,
        }
    }

    pub fn feasible(&self) -> bool {
        self.min_margin > 0.0
    }

    pub fn sum_squared_error(&self) -> f64 {
        self.residuals.iter().map(Residual::squared).sum()
    }

    /// Plain-text report: constants, every anchor with its margin, residuals.
    pub fn report(&self) -> String {
        let mut s = String::new();
        let p = &self.params;
        let _ = writeln!(s, "# bus model calibration");
        let _ = writeln!(s, "p_bit_uhs_read          = {:.4e}", p.p_bit_uhs_read);
        let _ = writeln!(s, "p_bit_uhs_write         = {:.4e}", p.p_bit_uhs_write);
        let _ = writeln!(s, "per_command_overhead_us = {:.2}", p.per_command_overhead_us);
        let _ = writeln!(s, "switch_insertion_us     = {:.2}", p.switch_insertion_us);
        let _ = writeln!(s, "write_busy_us           = {:.2}", p.write_busy_us);
        let _ = writeln!(s, "evaluations             = {}", self.evaluations);
        let _ = writeln!(s, "min_margin              = {:.4}", self.min_margin);
        let _ = writeln!(s, "feasible                = {}", self.feasible());
        let _ = writeln!(s, "\n# anchors (value, normalized margin)");
        for c in &self.checks {
            let flag = if c.margin > 0.0 { "ok  " } else { "FAIL" };
            let _ = writeln!(s, "{flag} {:<44} {:>10.4} {:>9.4}", c.name, c.value, c.margin);
        }
        let _ = writeln!(s, "\n# residuals against point targets");
        for r in &self.residuals {
            let _ = writeln!(
                s,
                "{:<44} value {:.4} target {:.4} sq {:.5}",
                r.name,
                r.value,
                r.target,
                r.squared()
            );
        }
        let _ = writeln!(s, "sum_squared_error = {:.5}", self.sum_squared_error());
        s
    }
}

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("calibration infeasible: no constants satisfy every anchor (best min margin {:.4}, failing: {})", .0.min_margin, failing(.0))]
    CalibrationInfeasible(Box<Calibration>),
}

fn failing(c: &Calibration) -> Failing<'_> {
    Failing(c)
}

struct Failing<'a>(&'a Calibration);

impl fmt::Display for Failing<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self
            .0
            .checks
            .iter()
            .filter(|c| c.margin <= 0.0)
            .map(|c| c.name.as_str())
            .collect();
        f.write_str(&names.join("; "))
    }
}

/// Searches `space` for the constants that satisfy `anchors` with the
/// largest worst-case margin.
pub fn calibrate(anchors: &Anchors, space: &SearchSpace) -> Result<Calibration, CalibrationError> {
    let r = &space.ranges;
    let score = |u: &[f64; 5]| -> f64 {
        let v = std::array::from_fn(|i| r[i].value_at(u[i]));
        min_margin(&evaluate(&Params::from_vec(v), anchors))
    };
    let mut evals = 0u64;
    let n = space.grid_points.max(2);
    let free: Vec<usize> = (0..5).filter(|&i| r[i].hi > r[i].lo).collect();

    let mut best_u = [0.0; 5];
    let mut best = f64::NEG_INFINITY;
    let total = n.pow(free.len() as u32);
    for k in 0..total {
        let mut u = [0.0; 5];
        let mut rest = k;
        for &i in &free {
            u[i] = (rest % n) as f64 / (n - 1) as f64;
            rest /= n;
        }
        let s = score(&u);
        evals += 1;
        if s > best {
            best = s;
            best_u = u;
        }
    }

    // Hooke-Jeeves style coordinate search in the unit cube.
    let mut step = 0.5 / (n - 1) as f64;
    while step > 1e-7 {
        let mut improved = false;
        for &i in &free {
            for dir in [1.0, -1.0] {
                let mut u = best_u;
                u[i] = (u[i] + dir * step).clamp(0.0, 1.0);
                let s = score(&u);
                evals += 1;
                if s > best {
                    best = s;
                    best_u = u;
                    improved = true;
                }
            }
        }
        if !improved {
            step /= 2.0;
        }
    }

    let params = Params::from_vec(std::array::from_fn(|i| r[i].value_at(best_u[i])));
    let mut cal = Calibration::at(params, anchors);
    cal.evaluations = evals;
    if cal.feasible() {
        Ok(cal)
    } else {
        Err(CalibrationError::CalibrationInfeasible(Box::new(cal)))
    }
}
