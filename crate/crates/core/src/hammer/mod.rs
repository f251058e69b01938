//! Hammering techniques, templating and flip statistics.

mod calibrate;

use std::collections::{BTreeSet, HashSet};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::dram::{DramError, DramGeometry, DramState, FlipRecord, RowId, TechniqueTag};
use crate::memory::{PAGE_BITS, PAGE_SIZE};
use crate::num::Scalar;
use crate::rng::SimRng;

pub use calibrate::{
    calibrate, expected_flips_per_attempt, victim_profile, CalibrationFailure, CalibrationRecord, CalibrationSetup,
    CalibrationTargets, TechniqueCalibration, TechniqueTarget,
};

/// Simulated duration of one Flush+Reload iteration.
pub const FLUSH_RELOAD_NS: u64 = 300;
/// Rounds per hammering attempt unless calibrated otherwise.
pub const DEFAULT_ROUNDS_PER_ATTEMPT: u64 = 5_000_000;
/// Addresses hammered by single-sided hammering unless configured otherwise.
pub const DEFAULT_SINGLE_SIDED_K: u32 = 8;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum HammerError {
    #[error("double-sided hammering needs physical address knowledge")]
    NeedsAddressKnowledge,
    #[error("invalid technique: {0}")]
    InvalidTechnique(String),
    #[error("no addresses to hammer")]
    NoAddresses,
    #[error("address pool cannot host a {0} pattern")]
    PoolTooSmall(&'static str),
    #[error(transparent)]
    Dram(#[from] DramError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TechniqueKind {
    DoubleSided,
    SingleSided { k: u32 },
    OneLocation,
}

impl TechniqueKind {
    pub fn tag(self) -> TechniqueTag {
        match self {
            TechniqueKind::DoubleSided => TechniqueTag::DoubleSided,
            TechniqueKind::SingleSided { .. } => TechniqueTag::SingleSided,
            TechniqueKind::OneLocation => TechniqueTag::OneLocation,
        }
    }

    /// Addresses accessed per round.
    pub fn address_count(self) -> u32 {
        match self {
            TechniqueKind::DoubleSided => 2,
            TechniqueKind::SingleSided { k } => k,
            TechniqueKind::OneLocation => 1,
        }
    }
}

/// A hammering technique with its attempt length and access cadence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HammerTechnique {
    pub kind: TechniqueKind,
    pub rounds_per_attempt: u64,
    /// Simulated time between two consecutive accesses.
    pub access_interval_ns: u64,
}

impl HammerTechnique {
    pub fn new(kind: TechniqueKind) -> Self {
        Self {
            kind,
            rounds_per_attempt: DEFAULT_ROUNDS_PER_ATTEMPT,
            access_interval_ns: FLUSH_RELOAD_NS,
        }
    }

    pub fn double_sided() -> Self {
        Self::new(TechniqueKind::DoubleSided)
    }

    pub fn single_sided(k: u32) -> Self {
        Self::new(TechniqueKind::SingleSided { k })
    }

    pub fn one_location() -> Self {
        Self::new(TechniqueKind::OneLocation)
    }

    pub fn tag(&self) -> TechniqueTag {
        self.kind.tag()
    }

    pub fn validate(&self) -> Result<(), HammerError> {
        if let TechniqueKind::SingleSided { k } = self.kind {
            if k == 0 {
                return Err(HammerError::InvalidTechnique("k must be >= 1".into()));
            }
        }
        if self.rounds_per_attempt == 0 {
            return Err(HammerError::InvalidTechnique(
                "rounds_per_attempt must be >= 1".into(),
            ));
        }
        if self.access_interval_ns == 0 {
            return Err(HammerError::InvalidTechnique(
                "access_interval_ns must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Simulated length of one attempt.
    pub fn attempt_duration_ns(&self) -> u64 {
        self.rounds_per_attempt * u64::from(self.kind.address_count()) * self.access_interval_ns
    }
}

/// Whether the attacker can translate to physical addresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AddressKnowledge {
    None,
    Full,
}

/// Frames the attacker may place aggressors in.
#[derive(Clone, Debug, Default)]
pub struct AddressPool {
    frames: Option<(Vec<u64>, HashSet<u64>)>,
}

impl AddressPool {
    /// All of DRAM.
    pub fn whole() -> Self {
        Self { frames: None }
    }

    pub fn frames(frames: Vec<u64>) -> Self {
        let set = frames.iter().copied().collect();
        Self {
            frames: Some((frames, set)),
        }
    }

    pub fn contains(&self, frame: u64) -> bool {
        self.frames.as_ref().is_none_or(|(_, set)| set.contains(&frame))
    }

    fn random_address(&self, geometry: &DramGeometry, rng: &mut SimRng) -> Result<u64, HammerError> {
        match &self.frames {
            None => Ok(rng.random_range(0..geometry.capacity() / 64) * 64),
            Some((frames, _)) => {
                let frame = *frames.choose(rng).ok_or(HammerError::NoAddresses)?;
                Ok(frame * PAGE_SIZE as u64 + rng.random_range(0..PAGE_SIZE as u64 / 64) * 64)
            }
        }
    }
}

/// Chooses aggressor addresses for one attempt.
pub fn pick_addresses(
    kind: TechniqueKind,
    geometry: &DramGeometry,
    pool: &AddressPool,
    knowledge: AddressKnowledge,
    rng: &mut SimRng,
) -> Result<Vec<u64>, HammerError> {
    match kind {
        TechniqueKind::OneLocation => Ok(vec![pool.random_address(geometry, rng)?]),
        TechniqueKind::SingleSided { k } => {
            if k == 0 {
                return Err(HammerError::InvalidTechnique("k must be >= 1".into()));
            }
            (0..k).map(|_| pool.random_address(geometry, rng)).collect()
        }
        TechniqueKind::DoubleSided => {
            if knowledge != AddressKnowledge::Full {
                return Err(HammerError::NeedsAddressKnowledge);
            }
            if geometry.rows_per_bank < 3 {
                return Err(HammerError::PoolTooSmall("double-sided"));
            }
            for _ in 0..10_000 {
                let first = pool.random_address(geometry, rng)?;
                let loc = geometry.map_address(first)?;
                let victim = if loc.row + 2 < geometry.rows_per_bank {
                    loc.row + 1
                } else {
                    loc.row - 1
                };
                let (lo, hi) = (victim - 1, victim + 1);
                let column = loc.column;
                let a = geometry.phys_addr(loc.bank, lo, column);
                let b = geometry.phys_addr(loc.bank, hi, column);
                let page = PAGE_SIZE as u64;
                if pool.contains(a / page) && pool.contains(b / page) {
                    return Ok(vec![a, b]);
                }
            }
            Err(HammerError::PoolTooSmall("double-sided"))
        }
    }
}

/// Probability that at least two of `k` uniformly placed addresses share one
/// of `banks` banks.
pub fn same_bank_probability<T: Scalar>(k: u32, banks: u32) -> T {
    if k > banks {
        return T::one();
    }
    let n = T::count(u64::from(banks));
    let distinct = (1..k).fold(T::one(), |acc, i| acc * (T::one() - T::count(u64::from(i)) / n));
    T::one() - distinct
}

/// Fraction of `draws` single-sided address sets with a bank collision.
pub fn simulate_same_bank(
    k: u32,
    geometry: &DramGeometry,
    draws: u64,
    rng: &mut SimRng,
) -> Result<f64, HammerError> {
    let pool = AddressPool::whole();
    let mut hits = 0u64;
    let mut banks = Vec::with_capacity(k as usize);
    for _ in 0..draws {
        banks.clear();
        for a in pick_addresses(TechniqueKind::SingleSided { k }, geometry, &pool, AddressKnowledge::None, rng)? {
            banks.push(geometry.row_of(a).bank);
        }
        banks.sort_unstable();
        if banks.windows(2).any(|w| w[0] == w[1]) {
            hits += 1;
        }
    }
    Ok(hits as f64 / draws as f64)
}

/// Rows whose cells an attempt on `addresses` can disturb.
pub fn victim_rows(geometry: &DramGeometry, addresses: &[u64]) -> Vec<RowId> {
    let rows: BTreeSet<RowId> = addresses
        .iter()
        .flat_map(|&a| geometry.neighbors(geometry.row_of(a)).collect::<Vec<_>>())
        .collect();
    rows.into_iter().collect()
}

/// Hammers `addresses` for `rounds` rounds, then reads back the victim rows.
/// Returns every flip committed during the attempt. Reading a row restores
/// its charge, so the read-back acts as a refresh of the victims.
pub fn run_attempt(
    dram: &mut DramState,
    tag: TechniqueTag,
    addresses: &[u64],
    rounds: u64,
    access_interval_ns: u64,
) -> Result<Vec<FlipRecord>, HammerError> {
    if addresses.is_empty() {
        return Err(HammerError::NoAddresses);
    }
    let start = dram.flips().len();
    dram.set_technique(Some(tag));
    dram.hammer(addresses, rounds, access_interval_ns);
    let victims = victim_rows(dram.geometry(), addresses);
    dram.refresh_rows(&victims);
    dram.set_technique(None);
    Ok(dram.flips()[start..].to_vec())
}

/// How long templating runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateBudget {
    Attempts(u64),
    SimulatedSeconds(f64),
    /// Stops at `count` flips or after `max_attempts` attempts.
    Flips { count: u64, max_attempts: u64 },
}

/// One attempt that produced flips, kept so it can be replayed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateAttempt {
    pub addresses: Vec<u64>,
    pub flips: Vec<FlipRecord>,
}

/// Aggregated templating result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateReport {
    pub technique: HammerTechnique,
    pub attempts: u64,
    pub flips: Vec<FlipRecord>,
    /// `histogram[offset][direction]`, direction index 0 = 0->1, 1 = 1->0.
    #[serde(skip)]
    pub histogram: Vec<[u64; 2]>,
    pub duration_s: f64,
    pub productive_attempts: Vec<TemplateAttempt>,
}

/// Scalar summary of a [`TemplateReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateSummary {
    pub technique: TechniqueTag,
    pub attempts: u64,
    pub flips: usize,
    pub duration_s: f64,
    pub flip_rate: f64,
    pub flippable_offsets: usize,
    pub flippable_fraction: f64,
    pub zero_to_one_fraction: f64,
    pub chi_square: f64,
    pub chi_square_p: f64,
}

/// Offset groups used by the uniformity test.
pub const UNIFORMITY_BINS: usize = 512;

impl TemplateReport {
    fn empty(technique: HammerTechnique) -> Self {
        Self {
            technique,
            attempts: 0,
            flips: Vec::new(),
            histogram: vec![[0; 2]; PAGE_BITS as usize],
            duration_s: 0.0,
            productive_attempts: Vec::new(),
        }
    }

    fn record(&mut self, flip: &FlipRecord) {
        self.histogram[flip.page_bit as usize][flip.direction.index()] += 1;
        self.flips.push(*flip);
    }

    /// Flips per simulated second.
    pub fn flip_rate(&self) -> f64 {
        if self.duration_s > 0.0 {
            self.flips.len() as f64 / self.duration_s
        } else {
            0.0
        }
    }

    pub fn flippable_offsets(&self) -> usize {
        self.histogram.iter().filter(|h| h[0] + h[1] > 0).count()
    }

    pub fn flippable_fraction(&self) -> f64 {
        self.flippable_offsets() as f64 / f64::from(PAGE_BITS)
    }

    pub fn zero_to_one_fraction(&self) -> f64 {
        if self.flips.is_empty() {
            return 0.0;
        }
        let up: u64 = self.histogram.iter().map(|h| h[0]).sum();
        up as f64 / self.flips.len() as f64
    }

    /// Pearson statistic and p-value of the flip offsets against a uniform
    /// distribution over [`UNIFORMITY_BINS`] equal offset groups.
    pub fn uniformity(&self) -> (f64, f64) {
        let n = self.flips.len() as f64;
        if n == 0.0 {
            return (0.0, 1.0);
        }
        let width = PAGE_BITS as usize / UNIFORMITY_BINS;
        let expected = n / UNIFORMITY_BINS as f64;
        let stat: f64 = self
            .histogram
            .chunks(width)
            .map(|c| {
                let observed = c.iter().map(|h| h[0] + h[1]).sum::<u64>() as f64;
                (observed - expected).powi(2) / expected
            })
            .sum();
        let dist = ChiSquared::new((UNIFORMITY_BINS - 1) as f64).expect("positive df");
        (stat, dist.sf(stat))
    }

    pub fn summary(&self) -> TemplateSummary {
        let (chi_square, chi_square_p) = self.uniformity();
        TemplateSummary {
            technique: self.technique.tag(),
            attempts: self.attempts,
            flips: self.flips.len(),
            duration_s: self.duration_s,
            flip_rate: self.flip_rate(),
            flippable_offsets: self.flippable_offsets(),
            flippable_fraction: self.flippable_fraction(),
            zero_to_one_fraction: self.zero_to_one_fraction(),
            chi_square,
            chi_square_p,
        }
    }

    /// Non-zero histogram cells as `offset,direction,count` lines.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("offset,direction,count\n");
        for (offset, counts) in self.histogram.iter().enumerate() {
            for (dir, label) in ["0to1", "1to0"].iter().enumerate() {
                if counts[dir] > 0 {
                    out.push_str(&format!("{offset},{label},{}\n", counts[dir]));
                }
            }
        }
        out
    }
}

/// Repeats attempts at random aggressor positions until `budget` is spent.
/// Victim frames inside the pool are rewritten with their pattern after each
/// attempt, as the attacker would before the next one.
pub fn template_memory(
    dram: &mut DramState,
    technique: &HammerTechnique,
    pool: &AddressPool,
    knowledge: AddressKnowledge,
    budget: TemplateBudget,
    rng: &mut SimRng,
) -> Result<TemplateReport, HammerError> {
    technique.validate()?;
    let mut report = TemplateReport::empty(*technique);
    let start_ns = dram.clock_ns();
    loop {
        let done = match budget {
            TemplateBudget::Attempts(n) => report.attempts >= n,
            TemplateBudget::SimulatedSeconds(s) => report.duration_s >= s,
            TemplateBudget::Flips {
                count,
                max_attempts,
            } => report.flips.len() as u64 >= count || report.attempts >= max_attempts,
        };
        if done {
            break;
        }
        let addresses = pick_addresses(technique.kind, dram.geometry(), pool, knowledge, rng)?;
        let flips = run_attempt(
            dram,
            technique.tag(),
            &addresses,
            technique.rounds_per_attempt,
            technique.access_interval_ns,
        )?;
        for f in &flips {
            report.record(f);
        }
        let victims: Vec<RowId> = victim_rows(dram.geometry(), &addresses);
        for id in victims {
            for frame in dram.geometry().row_frames(id) {
                if pool.contains(frame) {
                    dram.memory_mut().reset_frame(frame);
                }
            }
        }
        if !flips.is_empty() {
            report.productive_attempts.push(TemplateAttempt { addresses, flips });
        }
        report.attempts += 1;
        report.duration_s = (dram.clock_ns() - start_ns) as f64 * 1e-9;
    }
    Ok(report)
}

/// Expected flips per second for `E` exploitable offsets out of `2^16`
/// (offset, direction) pairs when a target flip takes `minutes`.
pub fn flip_rate_from_minutes(minutes: f64, exploitable: f64) -> f64 {
    65536.0 / (exploitable * minutes * 60.0)
}
