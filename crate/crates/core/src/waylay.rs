//! Page-cache eviction and the two relocation primitives built on it.
//!
//! Waylaying evicts a binary page and lets the next access fault it into a
//! fresh frame until the frame is one the attacker wants. Chasing moves a
//! private copy by fork and copy-on-write instead, and hands the final frame
//! to the page cache once.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::memory::{PhysMemory, PAGE_SIZE};
use crate::oracle::{self, OracleConfig, OracleError};
use crate::osmodel::{FileContent, FilePageId, OsError, OsModel, Pid};
use crate::rng::SimRng;

/// Simulated cost of one fork, copy-on-write and kill cycle.
pub const CHASE_ITERATION_NS: u64 = 36_700;

/// Resident-set bound the stealthy attacker stays under.
pub const DEFAULT_FOOTPRINT_BOUND: u64 = 64 << 20;

/// Chance the OOM killer hits the process that drives the machine near OOM.
pub const DEFAULT_OOM_KILL_PROBABILITY: f64 = 0.0078;

/// Mean eviction time without a residency query.
pub const WINDOWS_EVICTION_S: f64 = 10.10;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum WaylayError {
    #[error("target page {0:?} is not cached")]
    NotCached(FilePageId),
    #[error("empty target frame set")]
    NoTargets,
    #[error(transparent)]
    Os(#[from] OsError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvictionConfig {
    /// Stop as soon as the target is no longer resident.
    pub abort_via_mincore: bool,
    /// Overrides the elapsed time of a blind eviction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_elapsed_s: Option<f64>,
    pub oom_kill_probability: f64,
    pub footprint_bound: u64,
    /// Anonymous pages the attacker keeps as its working buffer.
    pub working_buffer_pages: u64,
}

impl EvictionConfig {
    pub fn linux() -> Self {
        Self {
            abort_via_mincore: true,
            fixed_elapsed_s: None,
            oom_kill_probability: DEFAULT_OOM_KILL_PROBABILITY,
            footprint_bound: DEFAULT_FOOTPRINT_BOUND,
            working_buffer_pages: 256,
        }
    }

    pub fn windows() -> Self {
        Self {
            abort_via_mincore: false,
            fixed_elapsed_s: Some(WINDOWS_EVICTION_S),
            ..Self::linux()
        }
    }
}

impl Default for EvictionConfig {
    fn default() -> Self {
        Self::linux()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvictionRun {
    pub data_accessed_bytes: u64,
    pub elapsed_s: f64,
    pub target_evicted: bool,
    pub peak_resident_bytes: u64,
    pub peak_system_usage: f64,
    pub killed: bool,
}

impl EvictionRun {
    pub fn data_accessed_mib(&self) -> f64 {
        self.data_accessed_bytes as f64 / f64::from(1u32 << 20)
    }
}

/// The OOM-kill model: one draw when the machine first goes near OOM.
#[derive(Clone, Copy, Debug)]
struct OomWatch {
    probability: f64,
    entered: bool,
}

impl OomWatch {
    fn new(probability: f64) -> Self {
        Self {
            probability,
            entered: false,
        }
    }

    fn killed(&mut self, os: &OsModel, rng: &mut SimRng) -> bool {
        if self.entered || !os.near_oom() {
            return false;
        }
        self.entered = true;
        rng.random_bool(self.probability)
    }
}

/// The attacker side of eviction: a read-only executable filler file that is
/// streamed through the page cache.
#[derive(Clone, Debug)]
pub struct Evictor {
    pub config: EvictionConfig,
    filler: u32,
    filler_pages: u32,
    cursor: u32,
}

impl Evictor {
    /// Registers a synthetic filler file as large as physical memory.
    pub fn new(os: &mut OsModel, config: EvictionConfig) -> Self {
        let filler_pages = os.config().frames as u32;
        let filler = os.register_file("filler", filler_pages, true, FileContent::Synthetic);
        Self {
            config,
            filler,
            filler_pages,
            cursor: 0,
        }
    }

    pub fn filler_file(&self) -> u32 {
        self.filler
    }

    /// Frames the page cache can grow to when nothing else changes.
    fn cache_capacity(os: &OsModel) -> u64 {
        let c = os.frames().census();
        c.free + c.page_cache
    }

    /// Replacement-aware eviction of `target`. `attacker` is the process whose
    /// resident set is reported.
    pub fn evict_target(
        &mut self,
        os: &mut OsModel,
        attacker: Pid,
        target: FilePageId,
        rng: &mut SimRng,
    ) -> Result<EvictionRun, WaylayError> {
        if !os.mincore(target) {
            return Err(WaylayError::NotCached(target));
        }
        let budget = Self::cache_capacity(os) + 1;
        let resident = os.resident_bytes(attacker);
        let mut oom = OomWatch::new(self.config.oom_kill_probability);
        let mut peak_usage = os.system_usage();
        let mut accessed = 0u64;
        let mut killed = false;
        while accessed < budget {
            if self.config.abort_via_mincore && !os.mincore(target) {
                break;
            }
            let page = FilePageId {
                file: self.filler,
                index: self.cursor,
            };
            self.cursor = (self.cursor + 1) % self.filler_pages;
            os.fault_in(page, None)?;
            accessed += 1;
            peak_usage = peak_usage.max(os.system_usage());
            if oom.killed(os, rng) {
                killed = true;
                break;
            }
        }
        let cost = os.config().filler_cost_ns as f64 * 1e-9;
        let elapsed_s = match (self.config.abort_via_mincore, self.config.fixed_elapsed_s) {
            (false, Some(s)) => s,
            _ => accessed as f64 * cost,
        };
        Ok(EvictionRun {
            data_accessed_bytes: accessed * PAGE_SIZE as u64,
            elapsed_s,
            target_evicted: !os.mincore(target),
            peak_resident_bytes: resident,
            peak_system_usage: peak_usage,
            killed,
        })
    }
}

/// Eviction by allocating anonymous memory until the target drops out. The
/// attacker's memory is returned afterwards unless it was killed.
pub fn exhaustion_evict(
    os: &mut OsModel,
    attacker: Pid,
    target: FilePageId,
    config: &EvictionConfig,
    rng: &mut SimRng,
) -> Result<EvictionRun, WaylayError> {
    if !os.mincore(target) {
        return Err(WaylayError::NotCached(target));
    }
    const BASE: u64 = 1 << 32;
    let start = os.resident_bytes(attacker);
    let mut oom = OomWatch::new(config.oom_kill_probability);
    let mut peak_usage = os.system_usage();
    let mut pages = 0u64;
    let mut killed = false;
    while os.mincore(target) {
        match os.alloc_anon(attacker, BASE + pages, 1) {
            Ok(()) => pages += 1,
            Err(OsError::OutOfMemory) => {
                killed = true;
                break;
            }
            Err(e) => return Err(e.into()),
        }
        peak_usage = peak_usage.max(os.system_usage());
        if oom.killed(os, rng) {
            killed = true;
            break;
        }
    }
    let peak = start + pages * PAGE_SIZE as u64;
    if killed {
        os.kill(attacker)?;
    } else {
        let v: Vec<u64> = (BASE..BASE + pages).collect();
        os.free_user_pages(attacker, &v)?;
    }
    Ok(EvictionRun {
        data_accessed_bytes: pages * PAGE_SIZE as u64,
        elapsed_s: pages as f64 * os.config().filler_cost_ns as f64 * 1e-9,
        target_evicted: !os.mincore(target),
        peak_resident_bytes: peak,
        peak_system_usage: peak_usage,
        killed,
    })
}

/// A binary page mapped into the attacker at `vpage`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaylayTarget {
    pub pid: Pid,
    pub vpage: u64,
    pub page: FilePageId,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaylayStep {
    pub iteration: u64,
    pub frame: u64,
    pub elapsed_s: f64,
    pub resident_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaylayResult {
    pub iterations: u64,
    pub final_frame: Option<u64>,
    pub elapsed_s: f64,
    pub oracle_trials: u64,
    pub success: bool,
    pub peak_resident_bytes: u64,
    pub oom_killed: bool,
    pub steps: Vec<WaylayStep>,
}

impl WaylayResult {
    /// One line per iteration.
    pub fn csv(&self) -> String {
        let mut out = String::from("iteration,frame,elapsed_s,resident_bytes\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{:.6},{}\n", s.iteration, s.frame, s.elapsed_s, s.resident_bytes));
        }
        out
    }
}

/// Maps `page` read-only into a fresh attacker process together with its
/// working buffer.
pub fn spawn_attacker(
    os: &mut OsModel,
    page: FilePageId,
    enclave: bool,
    config: &EvictionConfig,
) -> Result<WaylayTarget, WaylayError> {
    let pid = os.spawn(enclave);
    os.alloc_anon(pid, 0x1000, config.working_buffer_pages)?;
    let vpage = 0x40_0000;
    os.map_file(pid, vpage, page, false)?;
    Ok(WaylayTarget { pid, vpage, page })
}

/// Evicts and re-faults the target until the oracle places it in one of
/// `targets`.
#[allow(clippy::too_many_arguments)]
pub fn waylay_until(
    os: &mut OsModel,
    evictor: &mut Evictor,
    oracle_config: &OracleConfig,
    target: WaylayTarget,
    targets: &BTreeSet<u64>,
    max_iterations: u64,
    mut memory: Option<&mut PhysMemory>,
    rng: &mut SimRng,
) -> Result<WaylayResult, WaylayError> {
    if targets.is_empty() {
        return Err(WaylayError::NoTargets);
    }
    let fault_s = os.config().fault_cost_ns as f64 * 1e-9;
    let mut result = WaylayResult {
        iterations: 0,
        final_frame: None,
        elapsed_s: 0.0,
        oracle_trials: 0,
        success: false,
        peak_resident_bytes: os.resident_bytes(target.pid),
        oom_killed: false,
        steps: Vec::new(),
    };
    while result.iterations < max_iterations {
        result.iterations += 1;
        if os.mincore(target.page) {
            let run = evictor.evict_target(os, target.pid, target.page, rng)?;
            result.elapsed_s += run.elapsed_s;
            result.peak_resident_bytes = result.peak_resident_bytes.max(run.peak_resident_bytes);
            if run.killed {
                result.oom_killed = true;
                break;
            }
        }
        let frame = os.touch(target.pid, target.vpage, memory.as_deref_mut())?;
        result.elapsed_s += fault_s;
        let scan = oracle::scan_sorted(os, target.pid, target.vpage, targets, oracle_config, rng)?;
        result.oracle_trials += 1;
        result.elapsed_s += scan.elapsed_s;
        let resident = os.resident_bytes(target.pid);
        result.peak_resident_bytes = result.peak_resident_bytes.max(resident);
        result.steps.push(WaylayStep {
            iteration: result.iterations,
            frame,
            elapsed_s: result.elapsed_s,
            resident_bytes: resident,
        });
        result.final_frame = Some(frame);
        if scan.frame.is_some() {
            result.success = true;
            break;
        }
    }
    Ok(result)
}

/// Moves a private copy of `page` by fork, write and kill until the oracle
/// places it in `targets`, then evicts the cached original and remaps the
/// page so the cache adopts the positioned frame. Returns the result and the
/// pid that finally holds the mapping.
#[allow(clippy::too_many_arguments)]
pub fn chase_until(
    os: &mut OsModel,
    evictor: &mut Evictor,
    oracle_config: &OracleConfig,
    page: FilePageId,
    targets: &BTreeSet<u64>,
    max_iterations: u64,
    memory: &mut PhysMemory,
    rng: &mut SimRng,
) -> Result<(WaylayResult, Pid), WaylayError> {
    if targets.is_empty() {
        return Err(WaylayError::NoTargets);
    }
    const VPAGE: u64 = 0x40_0000;
    let mut current = os.spawn(false);
    os.map_file(current, VPAGE, page, true)?;
    os.write_private(current, VPAGE, memory)?;
    let step_s = CHASE_ITERATION_NS as f64 * 1e-9;
    let mut result = WaylayResult {
        iterations: 0,
        final_frame: None,
        elapsed_s: 0.0,
        oracle_trials: 0,
        success: false,
        peak_resident_bytes: os.resident_bytes(current),
        oom_killed: false,
        steps: Vec::new(),
    };
    while result.iterations < max_iterations {
        result.iterations += 1;
        let child = os.fork(current)?;
        let frame = os.write_private(child, VPAGE, memory)?;
        os.kill(current)?;
        current = child;
        result.elapsed_s += step_s;
        let scan = oracle::scan_sorted(os, current, VPAGE, targets, oracle_config, rng)?;
        result.oracle_trials += 1;
        result.elapsed_s += scan.elapsed_s;
        let resident = os.resident_bytes(current);
        result.peak_resident_bytes = result.peak_resident_bytes.max(resident);
        result.steps.push(WaylayStep {
            iteration: result.iterations,
            frame,
            elapsed_s: result.elapsed_s,
            resident_bytes: resident,
        });
        result.final_frame = Some(frame);
        if scan.frame.is_some() {
            result.success = true;
            break;
        }
    }
    if result.success {
        if os.mincore(page) {
            let run = evictor.evict_target(os, current, page, rng)?;
            result.elapsed_s += run.elapsed_s;
        }
        let cached = os.remap_exec(current, VPAGE, memory)?;
        debug_assert_eq!(Some(cached), result.final_frame);
        result.final_frame = Some(cached);
    }
    Ok((result, current))
}

/// Unique frames hit by `n` evict-and-refault relocations of `page`.
pub fn relocate(os: &mut OsModel, page: FilePageId, n: u64) -> Result<usize, WaylayError> {
    let mut seen = BTreeSet::new();
    for _ in 0..n {
        seen.insert(os.fault_in(page, None)?);
        os.evict(page);
    }
    Ok(seen.len())
}

/// Expected unique frames after `n` uniform draws from `m`.
pub fn expected_unique_frames(m: f64, n: f64) -> f64 {
    m * (1.0 - (1.0 - 1.0 / m).powf(n))
}

/// Expected iterations until a uniform draw from `pool` lands in `t` target
/// frames and the oracle confirms it.
pub fn expected_iterations(pool: f64, t: f64, tp_probability: f64) -> f64 {
    pool / (t * tp_probability)
}
