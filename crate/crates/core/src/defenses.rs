//! Software Rowhammer defenses as monitors over what a scenario left behind:
//! static code signatures (D1), per-process cache-miss counters (D2),
//! row-level access-pattern analysis (D3), kernel/user row isolation (D4) and
//! memory-footprint limits (D5).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dram::{DramGeometry, FlipRecord, RowId};
use crate::osmodel::{Allocator, FrameOwner, Pid};
use crate::rng::indexed_substream;

pub const DEFAULT_WINDOW_NS: u64 = 6_000_000;

/// Fixed seed of the stage-2 sampler, so verdicts depend on the trace only.
const ANVIL_SEED: u64 = 0xa4_1117;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DefenseId {
    D1,
    D2,
    D3,
    D4,
    D5,
}

impl DefenseId {
    pub const ALL: [DefenseId; 5] = [Self::D1, Self::D2, Self::D3, Self::D4, Self::D5];

    pub fn class_name(self) -> &'static str {
        match self {
            Self::D1 => "static analysis",
            Self::D2 => "performance counters",
            Self::D3 => "memory access pattern",
            Self::D4 => "physical proximity",
            Self::D5 => "memory footprint",
        }
    }
}

impl fmt::Display for DefenseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictOutcome {
    Detected,
    Clean,
    Prevented,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseVerdict {
    pub defense: DefenseId,
    pub outcome: VerdictOutcome,
    pub evidence: Vec<String>,
    /// Rows D3 refreshed on detection.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub refreshed_rows: Vec<RowId>,
}

impl DefenseVerdict {
    fn new(defense: DefenseId, outcome: VerdictOutcome, evidence: Vec<String>) -> Self {
        debug_assert!(outcome == VerdictOutcome::Clean || !evidence.is_empty());
        Self {
            defense,
            outcome,
            evidence,
            refreshed_rows: Vec::new(),
        }
    }

    /// Whether the defense stopped or flagged the attack.
    pub fn fired(&self) -> bool {
        self.outcome != VerdictOutcome::Clean
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheOutcome {
    Hit,
    Miss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub time_ns: u64,
    pub pid: Pid,
    pub enclave: bool,
    pub addr: u64,
    pub cache: CacheOutcome,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TraceError {
    #[error("record at {time} ns precedes the previous one at {last} ns")]
    OutOfOrder { time: u64, last: u64 },
}

/// Time-ordered memory accesses of a scenario.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccessTrace {
    records: Vec<AccessRecord>,
}

impl AccessTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: AccessRecord) -> Result<(), TraceError> {
        if let Some(last) = self.records.last() {
            if r.time_ns < last.time_ns {
                return Err(TraceError::OutOfOrder {
                    time: r.time_ns,
                    last: last.time_ns,
                });
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[AccessRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn end_ns(&self) -> u64 {
        self.records.last().map_or(0, |r| r.time_ns)
    }

    /// Flush+reload hammering: every access misses.
    pub fn hammering(pid: Pid, enclave: bool, addrs: &[u64], interval_ns: u64, start_ns: u64, duration_ns: u64) -> Self {
        let mut t = Self::new();
        t.append_hammering(pid, enclave, addrs, interval_ns, start_ns, duration_ns);
        t
    }

    pub fn append_hammering(&mut self, pid: Pid, enclave: bool, addrs: &[u64], interval_ns: u64, start_ns: u64, duration_ns: u64) {
        if addrs.is_empty() || interval_ns == 0 {
            return;
        }
        let n = duration_ns / interval_ns;
        self.records.reserve(n as usize);
        for i in 0..n {
            self.push(AccessRecord {
                time_ns: start_ns + i * interval_ns,
                pid,
                enclave,
                addr: addrs[(i % addrs.len() as u64) as usize],
                cache: CacheOutcome::Miss,
            })
            .expect("hammering appended after the trace end");
        }
    }

    /// A streaming read of `bytes` from `base`, one miss per cache line.
    pub fn sequential_scan(pid: Pid, base: u64, bytes: u64, interval_ns: u64) -> Self {
        let mut t = Self::new();
        for (i, addr) in (base..base + bytes).step_by(64).enumerate() {
            t.records.push(AccessRecord {
                time_ns: i as u64 * interval_ns,
                pid,
                enclave: false,
                addr,
                cache: CacheOutcome::Miss,
            });
        }
        t
    }

    /// Copy with the enclave flag set on every record of `pid`.
    pub fn with_enclave(&self, pid: Pid, enclave: bool) -> Self {
        let mut t = self.clone();
        for r in t.records.iter_mut().filter(|r| r.pid == pid) {
            r.enclave = enclave;
        }
        t
    }

    /// Misses per window index.
    pub fn window_misses(&self, window_ns: u64) -> BTreeMap<u64, u64> {
        let mut out = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.cache == CacheOutcome::Miss) {
            *out.entry(r.time_ns / window_ns).or_default() += 1;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionClass {
    Arithmetic,
    Memory,
    Branch,
    CacheFlush,
    HammerLoop,
    Syscall,
    EnclaveEntry,
}

/// What a static scanner can see of a program. Code inside an enclave is
/// encrypted and therefore missing from `visible`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramDescriptor {
    pub name: String,
    pub visible: BTreeSet<InstructionClass>,
}

impl ProgramDescriptor {
    /// The attack program, with its hammering code either in plain sight or
    /// inside an enclave.
    pub fn attacker(enclave: bool) -> Self {
        use InstructionClass::*;
        let mut visible: BTreeSet<_> = [Arithmetic, Memory, Branch, Syscall].into();
        if enclave {
            visible.insert(EnclaveEntry);
        } else {
            visible.extend([CacheFlush, HammerLoop]);
        }
        Self {
            name: "attacker".into(),
            visible,
        }
    }

    pub fn benign() -> Self {
        use InstructionClass::*;
        Self {
            name: "benign".into(),
            visible: [Arithmetic, Memory, Branch, Syscall].into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnvilConfig {
    pub window_ns: u64,
    /// Stage-1 misses per window.
    pub miss_threshold: u64,
    pub sample_size: usize,
    pub same_bank_rows: usize,
    /// Estimated accesses per window that make a row hot.
    pub access_floor: u64,
}

impl Default for AnvilConfig {
    fn default() -> Self {
        Self {
            window_ns: DEFAULT_WINDOW_NS,
            miss_threshold: 2_000,
            sample_size: 128,
            same_bank_rows: 2,
            access_floor: 1_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    pub d2_window_ns: u64,
    /// Misses per window of one non-enclave process.
    pub d2_miss_threshold: u64,
    pub anvil: AnvilConfig,
    /// Resident-set fraction of total memory that D5 tolerates.
    pub d5_bound_fraction: f64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            d2_window_ns: DEFAULT_WINDOW_NS,
            d2_miss_threshold: 2_000,
            anvil: AnvilConfig::default(),
            d5_bound_fraction: 0.5,
        }
    }
}

pub fn d1_static_scan(program: &ProgramDescriptor) -> DefenseVerdict {
    let hits: Vec<String> = program
        .visible
        .iter()
        .filter(|c| matches!(c, InstructionClass::CacheFlush | InstructionClass::HammerLoop))
        .map(|c| format!("{}: {c:?} signature", program.name))
        .collect();
    if hits.is_empty() {
        DefenseVerdict::new(DefenseId::D1, VerdictOutcome::Clean, Vec::new())
    } else {
        DefenseVerdict::new(DefenseId::D1, VerdictOutcome::Detected, hits)
    }
}

pub fn d2_perf_counters(trace: &AccessTrace, window_ns: u64, threshold: u64) -> DefenseVerdict {
    assert!(window_ns > 0, "window must be positive");
    let mut counts: BTreeMap<(Pid, u64), u64> = BTreeMap::new();
    for r in trace.records() {
        if !r.enclave && r.cache == CacheOutcome::Miss {
            *counts.entry((r.pid, r.time_ns / window_ns)).or_default() += 1;
        }
    }
    let mut worst: BTreeMap<Pid, u64> = BTreeMap::new();
    for ((pid, _), n) in counts {
        let w = worst.entry(pid).or_default();
        *w = (*w).max(n);
    }
    let evidence: Vec<String> = worst
        .iter()
        .filter(|(_, &n)| n > threshold)
        .map(|(pid, n)| format!("pid {pid}: {n} misses per window > {threshold}"))
        .collect();
    if evidence.is_empty() {
        DefenseVerdict::new(DefenseId::D2, VerdictOutcome::Clean, Vec::new())
    } else {
        DefenseVerdict::new(DefenseId::D2, VerdictOutcome::Detected, evidence)
    }
}

/// Two-stage access-pattern analysis. Stage 1 flags windows with many misses;
/// stage 2 samples the misses of a flagged window, estimates per-row access
/// counts and detects when one bank has several hot rows. The neighbours of
/// the hot rows are refreshed on detection.
pub fn d3_anvil(trace: &AccessTrace, geometry: &DramGeometry, config: &AnvilConfig) -> DefenseVerdict {
    assert!(config.window_ns > 0 && config.miss_threshold > 0 && config.sample_size > 0 && config.same_bank_rows > 0);
    let mut windows: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for r in trace.records().iter().filter(|r| r.cache == CacheOutcome::Miss) {
        windows.entry(r.time_ns / config.window_ns).or_default().push(r.addr);
    }
    let mut evidence = Vec::new();
    let mut refreshed = BTreeSet::new();
    let mut flagged = 0usize;
    for (w, misses) in &windows {
        if (misses.len() as u64) <= config.miss_threshold {
            continue;
        }
        flagged += 1;
        let mut rng = indexed_substream(ANVIL_SEED, "anvil", *w);
        let n = config.sample_size.min(misses.len());
        let sample = rand::seq::index::sample(&mut rng, misses.len(), n);
        let mut per_row: BTreeMap<RowId, u64> = BTreeMap::new();
        for i in sample.iter() {
            *per_row.entry(geometry.row_of(misses[i])).or_default() += 1;
        }
        let scale = misses.len() as f64 / n as f64;
        let mut hot: BTreeMap<u32, Vec<RowId>> = BTreeMap::new();
        for (row, c) in per_row {
            if c as f64 * scale >= config.access_floor as f64 {
                hot.entry(row.bank).or_default().push(row);
            }
        }
        for (bank, rows) in hot {
            if rows.len() >= config.same_bank_rows {
                evidence.push(format!(
                    "window {w}: bank {bank} rows {:?} hot ({} misses)",
                    rows.iter().map(|r| r.row).collect::<Vec<_>>(),
                    misses.len()
                ));
                for r in rows {
                    for v in [r.row.checked_sub(1), r.row.checked_add(1)].into_iter().flatten() {
                        if v < geometry.rows_per_bank {
                            refreshed.insert(RowId { bank, row: v });
                        }
                    }
                }
            }
        }
    }
    if evidence.is_empty() {
        let mut v = DefenseVerdict::new(DefenseId::D3, VerdictOutcome::Clean, Vec::new());
        if flagged > 0 {
            v.evidence.push(format!("{flagged} windows over the miss threshold, no same-bank hot rows"));
        }
        v
    } else {
        let mut v = DefenseVerdict::new(DefenseId::D3, VerdictOutcome::Detected, evidence);
        v.refreshed_rows = refreshed.into_iter().collect();
        v
    }
}

/// What the attack tries to corrupt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetClass {
    /// Kernel data such as page tables.
    Kernel,
    /// A user or page-cache page, such as a binary.
    User,
}

/// A flip together with the owner of its frame at flip time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OwnedFlip {
    pub flip: FlipRecord,
    pub owner: FrameOwner,
}

/// Whether any flip reached kernel memory.
pub fn kernel_flips(flips: &[OwnedFlip]) -> Vec<&OwnedFlip> {
    flips.iter().filter(|f| matches!(f.owner, FrameOwner::Kernel(_))).collect()
}

/// Physical isolation audit. Under the partitioning allocator an attack on
/// kernel memory is prevented; an attack on user memory is out of scope and
/// goes through.
pub fn d4_catt_audit(allocator: Allocator, flips: &[OwnedFlip], target: TargetClass) -> DefenseVerdict {
    let violations: Vec<String> = kernel_flips(flips)
        .iter()
        .map(|f| format!("flip in {} frame {} bit {}", f.owner, f.flip.frame, f.flip.page_bit))
        .collect();
    let Allocator::Catt { kernel_rows, gap_rows } = allocator else {
        let mut v = DefenseVerdict::new(DefenseId::D4, VerdictOutcome::Clean, Vec::new());
        v.evidence.push("no partitioning allocator".into());
        v.evidence.extend(violations);
        return v;
    };
    let boundary = format!("kernel rows < {kernel_rows}, user rows >= {}", kernel_rows + gap_rows);
    if !violations.is_empty() {
        let mut v = DefenseVerdict::new(DefenseId::D4, VerdictOutcome::Clean, vec![boundary]);
        v.evidence.extend(violations);
        return v;
    }
    match target {
        TargetClass::Kernel => DefenseVerdict::new(
            DefenseId::D4,
            VerdictOutcome::Prevented,
            vec![boundary, "kernel target unreachable from user rows".into()],
        ),
        TargetClass::User => {
            let mut v = DefenseVerdict::new(DefenseId::D4, VerdictOutcome::Clean, Vec::new());
            v.evidence.push(boundary);
            v.evidence.push(format!("{} flips in user partition", flips.len()));
            v
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FootprintSample {
    pub time_s: f64,
    pub resident_bytes: u64,
    pub system_usage: f64,
}

pub fn d5_footprint(timeline: &[FootprintSample], total_bytes: u64, bound_fraction: f64, near_oom_fraction: f64) -> DefenseVerdict {
    assert!(bound_fraction > 0.0 && bound_fraction < 1.0, "bound must be in (0,1)");
    let bound = bound_fraction * total_bytes as f64;
    let mut evidence = Vec::new();
    if let Some(s) = timeline.iter().find(|s| s.resident_bytes as f64 > bound) {
        evidence.push(format!("resident set {} B at {:.3} s exceeds {:.0} B", s.resident_bytes, s.time_s, bound));
    }
    if let Some(s) = timeline.iter().find(|s| s.system_usage > near_oom_fraction) {
        evidence.push(format!("near out of memory at {:.3} s (usage {:.3})", s.time_s, s.system_usage));
    }
    if evidence.is_empty() {
        DefenseVerdict::new(DefenseId::D5, VerdictOutcome::Clean, Vec::new())
    } else {
        DefenseVerdict::new(DefenseId::D5, VerdictOutcome::Detected, evidence)
    }
}

/// Relocation primitive used to place the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    None,
    Waylaying,
    Chasing,
    Exhaustion,
}

/// Everything the defenses look at after a scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseInputs {
    pub program: ProgramDescriptor,
    pub trace: AccessTrace,
    pub geometry: DramGeometry,
    pub allocator: Allocator,
    pub flips: Vec<OwnedFlip>,
    pub target: TargetClass,
    pub timeline: Vec<FootprintSample>,
    pub total_bytes: u64,
    pub near_oom_fraction: f64,
    pub enclave: bool,
    pub one_location: bool,
    pub placement: Placement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BypassRow {
    pub bypass: String,
    pub defeats: Vec<bool>,
}

/// Which attack primitive bypassed which defense class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BypassMatrix {
    pub classes: Vec<String>,
    pub rows: Vec<BypassRow>,
    pub defeated: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub verdicts: Vec<DefenseVerdict>,
    pub matrix: BypassMatrix,
}

impl SuiteReport {
    pub fn verdict(&self, id: DefenseId) -> &DefenseVerdict {
        self.verdicts.iter().find(|v| v.defense == id).expect("all defenses run")
    }

    pub fn all_clean(&self) -> bool {
        self.verdicts.iter().all(|v| !v.fired())
    }

    pub fn all_fired(&self) -> bool {
        self.verdicts.iter().all(|v| v.fired())
    }
}

pub fn run_defense_suite(inputs: &DefenseInputs, config: &DefenseConfig) -> SuiteReport {
    let verdicts = vec![
        d1_static_scan(&inputs.program),
        d2_perf_counters(&inputs.trace, config.d2_window_ns, config.d2_miss_threshold),
        d3_anvil(&inputs.trace, &inputs.geometry, &config.anvil),
        d4_catt_audit(inputs.allocator, &inputs.flips, inputs.target),
        d5_footprint(&inputs.timeline, inputs.total_bytes, config.d5_bound_fraction, inputs.near_oom_fraction),
    ];
    let clean = |id: DefenseId| !verdicts[id as usize].fired();
    let opcode = inputs.target == TargetClass::User && !inputs.flips.is_empty();
    let relocation = matches!(inputs.placement, Placement::Waylaying | Placement::Chasing);
    let primitives: [(&str, bool, &[DefenseId]); 4] = [
        ("Intel SGX", inputs.enclave, &[DefenseId::D1, DefenseId::D2]),
        ("One-location hammering", inputs.one_location, &[DefenseId::D3]),
        ("Opcode flipping", opcode, &[DefenseId::D4]),
        ("Memory waylaying", relocation, &[DefenseId::D5]),
    ];
    let rows: Vec<BypassRow> = primitives
        .iter()
        .map(|(name, used, ids)| BypassRow {
            bypass: (*name).into(),
            defeats: DefenseId::ALL.iter().map(|d| *used && ids.contains(d) && clean(*d)).collect(),
        })
        .collect();
    let defeated = DefenseId::ALL
        .iter()
        .enumerate()
        .map(|(i, _)| rows.iter().any(|r| r.defeats[i]))
        .collect();
    SuiteReport {
        matrix: BypassMatrix {
            classes: DefenseId::ALL.iter().map(|d| d.class_name().to_string()).collect(),
            rows,
            defeated,
        },
        verdicts,
    }
}

/// Trace span recorded per hammering attempt.
pub const TRACE_SPAN_NS: u64 = 12_000_000;

/// Hammering trace of `attempts` consecutive attempts of `technique`, each
/// recorded for its first [`TRACE_SPAN_NS`] with freshly picked addresses.
pub fn technique_trace(
    technique: &crate::hammer::HammerTechnique,
    geometry: &DramGeometry,
    pid: Pid,
    enclave: bool,
    attempts: u32,
    rng: &mut crate::rng::SimRng,
) -> Result<AccessTrace, crate::hammer::HammerError> {
    use crate::hammer::{pick_addresses, AddressKnowledge, AddressPool};
    let span = TRACE_SPAN_NS.min(technique.attempt_duration_ns());
    let mut trace = AccessTrace::new();
    for a in 0..u64::from(attempts) {
        let addrs = pick_addresses(technique.kind, geometry, &AddressPool::whole(), AddressKnowledge::Full, rng)?;
        trace.append_hammering(pid, enclave, &addrs, technique.access_interval_ns, a * span, span);
    }
    Ok(trace)
}
