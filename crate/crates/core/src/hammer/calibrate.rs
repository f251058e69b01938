//! Fits the cell-threshold distribution and per-technique cadence to target
//! templating statistics.
//!
//! With random content, a victim row that accumulates disturbance `D` per
//! refresh window flips `row_bits / 2 * d * Phi((ln D - mu) / sigma)` cells on
//! average. A flipped cell holds its new value, so hammering the same rows for
//! longer than a couple of windows adds nothing: each attempt yields its
//! victims' flips once. After `N` uniformly spread flips a fraction
//! `1 - exp(-N / 32768)` of the page offsets has flipped at least once, which
//! fixes the flips per attempt each technique needs. The two techniques with a
//! fixed access interval pin down `mu` and `sigma`; the remaining one gets its
//! interval solved. The attempt duration then sets the flip rate.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{run_attempt, pick_addresses, AddressKnowledge, AddressPool, HammerError, HammerTechnique, TechniqueKind, FLUSH_RELOAD_NS};
use crate::dram::{CellMapParams, ControllerPolicy, DramGeometry, DramState, ROW_CYCLE_NS};
use crate::memory::{Fill, PhysMemory, PAGE_BITS};
use crate::rng::{indexed_substream, substream};

/// Desired statistics for one technique.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TechniqueTarget {
    pub kind: TechniqueKind,
    /// Fraction of page bit offsets flipped at least once over the run.
    pub flippable_fraction: f64,
    /// Flips per simulated second.
    pub flip_rate: f64,
    /// Fraction of flips going from 0 to 1.
    pub zero_to_one_fraction: f64,
    /// Whether the access interval is fixed at the Flush+Reload cost or solved for.
    pub fixed_interval: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationTargets {
    pub techniques: Vec<TechniqueTarget>,
}

impl Default for CalibrationTargets {
    /// Skylake desktop statistics: eight-hour templating runs and the
    /// minutes per target flip with 29 exploitable offsets.
    fn default() -> Self {
        let rate = |minutes| super::flip_rate_from_minutes(minutes, 29.0);
        Self {
            techniques: vec![
                TechniqueTarget {
                    kind: TechniqueKind::DoubleSided,
                    flippable_fraction: 0.770,
                    flip_rate: rate(17.0),
                    zero_to_one_fraction: 0.517,
                    fixed_interval: true,
                },
                TechniqueTarget {
                    kind: TechniqueKind::SingleSided { k: 8 },
                    flippable_fraction: 0.785,
                    flip_rate: rate(19.0),
                    zero_to_one_fraction: 0.541,
                    fixed_interval: true,
                },
                TechniqueTarget {
                    kind: TechniqueKind::OneLocation,
                    flippable_fraction: 0.365,
                    flip_rate: rate(56.0),
                    zero_to_one_fraction: 0.516,
                    fixed_interval: false,
                },
            ],
        }
    }
}

/// Everything a calibration run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSetup {
    pub targets: CalibrationTargets,
    pub geometry: DramGeometry,
    pub policy: ControllerPolicy,
    pub density: f64,
    /// Attempts over which the flippable fractions are to be reached.
    pub attempts: u64,
    pub access_interval_ns: u64,
    /// Attempts simulated per technique to check the fitted rates; 0 skips.
    pub verify_attempts: u64,
    pub seed: u64,
    pub rate_tolerance: f64,
}

impl Default for CalibrationSetup {
    fn default() -> Self {
        Self {
            targets: CalibrationTargets::default(),
            geometry: DramGeometry::ddr4_16gib(),
            policy: ControllerPolicy::default(),
            density: 0.8,
            attempts: 10_000,
            access_interval_ns: FLUSH_RELOAD_NS,
            verify_attempts: 1000,
            seed: 0x5eed,
            rate_tolerance: 0.10,
        }
    }
}

/// Fitted cadence of one technique.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TechniqueCalibration {
    pub technique: HammerTechnique,
    pub target: TechniqueTarget,
    /// Flips per attempt needed for the flippable-fraction target.
    pub flips_per_attempt: f64,
    pub predicted_rate: f64,
    pub verified_rate: Option<f64>,
    pub verified_flips_per_attempt: Option<f64>,
}

/// Calibrated cell map and technique cadences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub cells: CellMapParams,
    pub techniques: Vec<TechniqueCalibration>,
    pub attempts: u64,
}

impl CalibrationRecord {
    pub fn technique(&self, kind: TechniqueKind) -> Option<&HammerTechnique> {
        self.techniques
            .iter()
            .find(|t| t.technique.kind == kind)
            .map(|t| &t.technique)
    }

    /// Largest relative deviation of a verified rate from its target.
    pub fn worst_rate_residual(&self) -> f64 {
        self.techniques
            .iter()
            .filter_map(|t| t.verified_rate.map(|r| (r / t.target.flip_rate - 1.0).abs()))
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("calibration failed: {reason} (best residual {residual:.4})")]
pub struct CalibrationFailure {
    pub reason: String,
    pub residual: f64,
    pub best: Option<CalibrationRecord>,
}

impl From<HammerError> for CalibrationFailure {
    fn from(e: HammerError) -> Self {
        Self {
            reason: e.to_string(),
            residual: f64::INFINITY,
            best: None,
        }
    }
}

/// `(victim count, disturbance per refresh window)` for a technique.
pub fn victim_profile(kind: TechniqueKind, interval_ns: f64, window_ns: f64) -> Vec<(f64, f64)> {
    match kind {
        TechniqueKind::DoubleSided => {
            let a = window_ns / (2.0 * interval_ns);
            vec![(1.0, 2.0 * a), (2.0, a)]
        }
        TechniqueKind::SingleSided { k } => {
            let k = f64::from(k);
            vec![(2.0 * k, window_ns / (k * interval_ns))]
        }
        TechniqueKind::OneLocation => vec![(2.0, window_ns / interval_ns)],
    }
}

struct Model {
    row_bits: f64,
    density: f64,
    cap: f64,
    window_ns: f64,
}

impl Model {
    /// Expected flips of one attempt that spans at least two refresh windows.
    fn flips(&self, kind: TechniqueKind, interval_ns: f64, mu: f64, sigma: f64) -> f64 {
        let normal = Normal::standard();
        victim_profile(kind, interval_ns, self.window_ns)
            .into_iter()
            .map(|(m, d)| {
                let d = d.min(self.cap);
                m * self.row_bits / 2.0 * self.density * normal.cdf((d.ln() - mu) / sigma)
            })
            .sum()
    }
}

/// Expected flips of one attempt of `technique` on `geometry` with cell
/// parameters `cells`, for attempts spanning at least two refresh windows.
pub fn expected_flips_per_attempt(cells: &CellMapParams, technique: &HammerTechnique, geometry: &DramGeometry) -> f64 {
    let model = Model {
        row_bits: f64::from(geometry.row_bits()),
        density: cells.density,
        cap: cells.threshold_cap as f64,
        window_ns: geometry.effective_refresh_window_ns() as f64,
    };
    model.flips(technique.kind, technique.access_interval_ns as f64, cells.mu, cells.sigma)
}

/// Bisection for a decreasing function `f` crossing `target` in `[lo, hi]`.
fn solve_decreasing(f: impl Fn(f64) -> f64, target: f64, mut lo: f64, mut hi: f64) -> Option<f64> {
    if f(lo) < target || f(hi) > target {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Longest attempt a fitted technique may need.
pub const MAX_ATTEMPT_NS: f64 = 600e9;

/// Fits cell parameters and technique cadences, then checks the fitted rates
/// by simulation.
pub fn calibrate(setup: &CalibrationSetup) -> Result<CalibrationRecord, CalibrationFailure> {
    let fail = |reason: &str, residual: f64| CalibrationFailure {
        reason: reason.to_string(),
        residual,
        best: None,
    };
    let targets = &setup.targets.techniques;
    for t in targets {
        let ok = t.flippable_fraction > 0.0
            && t.flippable_fraction < 1.0
            && t.flip_rate > 0.0
            && (0.0..=1.0).contains(&t.zero_to_one_fraction);
        if !ok {
            return Err(fail("malformed target", f64::INFINITY));
        }
    }
    let fixed: Vec<&TechniqueTarget> = targets.iter().filter(|t| t.fixed_interval).collect();
    if fixed.len() != 2 {
        return Err(fail("exactly two fixed-interval targets are required", f64::INFINITY));
    }
    let window_ns = setup.geometry.effective_refresh_window_ns() as f64;
    let cap = 2.0 * window_ns / ROW_CYCLE_NS as f64;
    let model = Model {
        row_bits: f64::from(setup.geometry.row_bits()),
        density: setup.density,
        cap,
        window_ns,
    };
    let interval = setup.access_interval_ns as f64;
    let per_attempt = |t: &TechniqueTarget| {
        -f64::from(PAGE_BITS) * (1.0 - t.flippable_fraction).ln() / setup.attempts as f64
    };
    let (a, b) = (fixed[0], fixed[1]);
    let (phi_a, phi_b) = (per_attempt(a), per_attempt(b));

    // For each sigma, mu matches the first target exactly; sigma is chosen so
    // the second target matches too.
    let mu_for = |sigma: f64| solve_decreasing(|mu| model.flips(a.kind, interval, mu, sigma), phi_a, -50.0, 200.0);
    let residual = |sigma: f64| {
        mu_for(sigma).map(|mu| model.flips(b.kind, interval, mu, sigma) / phi_b - 1.0)
    };
    let grid: Vec<(f64, f64)> = (1..=400)
        .map(|i| f64::from(i) * 0.05)
        .filter_map(|s| residual(s).map(|r| (s, r)))
        .collect();
    let best = grid
        .iter()
        .copied()
        .min_by(|x, y| x.1.abs().total_cmp(&y.1.abs()))
        .ok_or_else(|| fail("no feasible sigma", f64::INFINITY))?;
    let bracket = grid.windows(2).find(|w| w[0].1.signum() != w[1].1.signum());
    let sigma = match bracket {
        Some(w) => {
            let (mut lo, mut hi) = (w[0].0, w[1].0);
            let lo_sign = w[0].1.signum();
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                match residual(mid) {
                    Some(r) if r.signum() == lo_sign => lo = mid,
                    _ => hi = mid,
                }
            }
            0.5 * (lo + hi)
        }
        None if best.1.abs() <= setup.rate_tolerance => best.0,
        None => return Err(fail("flippable fractions are not jointly reachable", best.1.abs())),
    };
    let mu = mu_for(sigma).ok_or_else(|| fail("mu solve failed", f64::INFINITY))?;

    let anti_fraction =
        targets.iter().map(|t| t.zero_to_one_fraction).sum::<f64>() / targets.len() as f64;
    let cells = CellMapParams {
        seed: setup.seed,
        density: setup.density,
        mu,
        sigma,
        anti_fraction,
        threshold_cap: cap.round() as u64,
    };

    let mut techniques = Vec::new();
    for t in targets {
        let flips_per_attempt = per_attempt(t);
        let interval_ns = if t.fixed_interval {
            setup.access_interval_ns
        } else {
            let t_ns = solve_decreasing(
                |x| model.flips(t.kind, x, mu, sigma),
                flips_per_attempt,
                ROW_CYCLE_NS as f64,
                1e7,
            )
            .ok_or_else(|| fail("no access interval reaches the flippable fraction", f64::INFINITY))?;
            t_ns.round().max(1.0) as u64
        };
        let predicted_flips = model.flips(t.kind, interval_ns as f64, mu, sigma);
        let round_ns = f64::from(t.kind.address_count()) * interval_ns as f64;
        let duration_ns = predicted_flips / t.flip_rate * 1e9;
        if duration_ns < 2.0 * window_ns {
            let fastest = predicted_flips / (2.0 * window_ns * 1e-9);
            return Err(fail(
                "flip rate needs attempts shorter than two refresh windows",
                t.flip_rate / fastest - 1.0,
            ));
        }
        if duration_ns > MAX_ATTEMPT_NS {
            return Err(fail(
                "flip rate needs attempts longer than the simulation bound",
                duration_ns / MAX_ATTEMPT_NS - 1.0,
            ));
        }
        let rounds = (duration_ns / round_ns).round().max(1.0) as u64;
        let technique = HammerTechnique {
            kind: t.kind,
            rounds_per_attempt: rounds,
            access_interval_ns: interval_ns,
        };
        techniques.push(TechniqueCalibration {
            technique,
            target: *t,
            flips_per_attempt: predicted_flips,
            predicted_rate: predicted_flips / (technique.attempt_duration_ns() as f64 * 1e-9),
            verified_rate: None,
            verified_flips_per_attempt: None,
        });
    }
    let mut record = CalibrationRecord {
        cells,
        techniques,
        attempts: setup.attempts,
    };
    if setup.verify_attempts > 0 {
        verify(setup, &mut record)?;
        let worst = record.worst_rate_residual();
        if worst > setup.rate_tolerance {
            return Err(CalibrationFailure {
                reason: "simulated flip rate outside tolerance".into(),
                residual: worst,
                best: Some(record),
            });
        }
    }
    Ok(record)
}

/// Simulates `verify_attempts` attempts per technique and records the
/// measured flip rate.
fn verify(setup: &CalibrationSetup, record: &mut CalibrationRecord) -> Result<(), HammerError> {
    let pool = AddressPool::whole();
    for (i, tc) in record.techniques.iter_mut().enumerate() {
        let mut cells = record.cells.clone();
        cells.seed = setup.seed ^ 0x9e37_79b9 ^ i as u64;
        let mut dram = DramState::new(
            setup.geometry.clone(),
            setup.policy.clone(),
            cells,
            PhysMemory::new(Fill::Random { seed: setup.seed }),
            substream(setup.seed, "calibrate/para"),
        )?;
        let mut rng = indexed_substream(setup.seed, "calibrate/addresses", i as u64);
        let technique = tc.technique;
        let start = dram.clock_ns();
        let mut flips = 0usize;
        for _ in 0..setup.verify_attempts {
            let addrs = pick_addresses(technique.kind, dram.geometry(), &pool, AddressKnowledge::Full, &mut rng)?;
            flips += run_attempt(
                &mut dram,
                technique.tag(),
                &addrs,
                technique.rounds_per_attempt,
                technique.access_interval_ns,
            )?
            .len();
        }
        let seconds = (dram.clock_ns() - start) as f64 * 1e-9;
        let per_attempt = flips as f64 / setup.verify_attempts as f64;
        tc.verified_rate = Some(flips as f64 / seconds);
        tc.verified_flips_per_attempt = Some(per_attempt);
    }
    Ok(())
}
