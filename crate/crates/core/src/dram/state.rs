use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use super::cells::{CellMap, CellMapParams};
use super::geometry::{DramGeometry, RowId};
use super::policy::{ControllerPolicy, PagePolicy, ROW_CONFLICT_NS, ROW_HIT_NS, ROW_OPEN_NS};
use super::DramError;
use crate::memory::PhysMemory;
use crate::rng::SimRng;

/// Row-buffer outcome of one access.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    RowHit,
    RowConflict,
    /// The bank was precharged; the row was opened without a conflict.
    RowOpen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AccessResult {
    pub kind: AccessKind,
    pub latency_ns: u64,
    /// The access opened a row.
    pub activated: bool,
    /// The access was merged into an earlier request of the combining window.
    pub combined: bool,
}

/// Direction of a committed bit flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipDirection {
    ZeroToOne,
    OneToZero,
}

impl FlipDirection {
    /// Value before the flip.
    pub fn source_value(self) -> bool {
        matches!(self, FlipDirection::OneToZero)
    }

    pub fn index(self) -> usize {
        match self {
            FlipDirection::ZeroToOne => 0,
            FlipDirection::OneToZero => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FlipDirection::ZeroToOne => "0to1",
            FlipDirection::OneToZero => "1to0",
        }
    }
}

/// Hammering technique that was active when a flip committed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TechniqueTag {
    DoubleSided,
    SingleSided,
    OneLocation,
}

impl TechniqueTag {
    pub const ALL: [TechniqueTag; 3] = [
        TechniqueTag::DoubleSided,
        TechniqueTag::SingleSided,
        TechniqueTag::OneLocation,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TechniqueTag::DoubleSided => "double_sided",
            TechniqueTag::SingleSided => "single_sided",
            TechniqueTag::OneLocation => "one_location",
        }
    }
}

/// A bit flip committed to memory contents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlipRecord {
    pub frame: u64,
    /// Bit offset within the 4 KiB frame, `0..32768`.
    pub page_bit: u32,
    pub direction: FlipDirection,
    pub technique: Option<TechniqueTag>,
    pub time_ns: u64,
    pub row: RowId,
    /// Bit index within the row.
    pub row_bit: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct BankState {
    open_row: Option<u32>,
    last_access_ns: u64,
}

#[derive(Clone, Copy, Debug, Default)]
struct RowActivity {
    activations: u64,
    disturbance: u64,
    scheduled: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Combiner {
    window: u32,
    filled: u32,
    rows: Vec<RowId>,
}

/// Per-row increments observed over one hammer-loop period.
#[derive(Clone, Debug, Default)]
struct PeriodDelta {
    activations: BTreeMap<RowId, u64>,
    disturbance: BTreeMap<RowId, u64>,
    total_activations: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct LoopSnapshot {
    banks: Vec<(Option<u32>, u64)>,
    combiner: Option<(u32, Vec<RowId>)>,
}

/// DRAM device plus controller: row buffers, activation ledger, refresh and
/// the disturbance fault model.
#[derive(Debug)]
pub struct DramState {
    geometry: DramGeometry,
    policy: ControllerPolicy,
    cells: CellMap,
    memory: PhysMemory,
    clock_ns: u64,
    banks: Vec<BankState>,
    rows: HashMap<RowId, RowActivity>,
    refresh_queue: BinaryHeap<Reverse<(u64, RowId)>>,
    combiner: Option<Combiner>,
    para_rng: SimRng,
    para_countdown: u64,
    flips: Vec<FlipRecord>,
    technique: Option<TechniqueTag>,
    total_activations: u64,
    events: u64,
    recorder: Option<PeriodDelta>,
}

impl DramState {
    /// `rng` drives the probabilistic mitigations (PARA).
    pub fn new(
        geometry: DramGeometry,
        policy: ControllerPolicy,
        cells: CellMapParams,
        memory: PhysMemory,
        rng: SimRng,
    ) -> Result<Self, DramError> {
        geometry.validate()?;
        policy.validate()?;
        let cells = CellMap::new(cells, geometry.row_bits())?;
        let combiner = policy.reorder_combine.map(|window| Combiner {
            window,
            filled: 0,
            rows: Vec::new(),
        });
        let mut state = Self {
            banks: vec![BankState::default(); geometry.banks_total as usize],
            geometry,
            policy,
            cells,
            memory,
            clock_ns: 0,
            rows: HashMap::new(),
            refresh_queue: BinaryHeap::new(),
            combiner,
            para_rng: rng,
            para_countdown: u64::MAX,
            flips: Vec::new(),
            technique: None,
            total_activations: 0,
            events: 0,
            recorder: None,
        };
        state.para_countdown = state.draw_para_countdown();
        Ok(state)
    }

    pub fn geometry(&self) -> &DramGeometry {
        &self.geometry
    }

    pub fn policy(&self) -> &ControllerPolicy {
        &self.policy
    }

    pub fn cell_params(&self) -> &CellMapParams {
        self.cells.params()
    }

    pub fn cells_mut(&mut self) -> &mut CellMap {
        &mut self.cells
    }

    pub fn memory(&self) -> &PhysMemory {
        &self.memory
    }

    pub fn memory_mut(&mut self) -> &mut PhysMemory {
        &mut self.memory
    }

    pub fn clock_ns(&self) -> u64 {
        self.clock_ns
    }

    /// Every flip committed so far, in commit order.
    pub fn flips(&self) -> &[FlipRecord] {
        &self.flips
    }

    pub fn set_technique(&mut self, technique: Option<TechniqueTag>) {
        self.technique = technique;
    }

    pub fn total_activations(&self) -> u64 {
        self.total_activations
    }

    /// Activations of `id` since its last refresh.
    pub fn activations(&self, id: RowId) -> u64 {
        self.rows.get(&id).map_or(0, |a| a.activations)
    }

    /// Neighbor activations seen by `id` since its last refresh.
    pub fn disturbance(&self, id: RowId) -> u64 {
        self.rows.get(&id).map_or(0, |a| a.disturbance)
    }

    pub fn open_row(&self, bank: u32) -> Option<u32> {
        self.banks[bank as usize].open_row
    }

    fn draw_para_countdown(&mut self) -> u64 {
        match self.policy.para {
            Some(p) if p > 0.0 => {
                if p >= 1.0 {
                    1
                } else {
                    Geometric::new(p)
                        .expect("validated probability")
                        .sample(&mut self.para_rng)
                        .saturating_add(1)
                }
            }
            _ => u64::MAX,
        }
    }

    /// Performs one uncached access at the current clock.
    pub fn access(&mut self, addr: u64) -> AccessResult {
        assert!(
            addr < self.geometry.capacity(),
            "address {addr:#x} outside DRAM"
        );
        let loc = self.geometry.map_unchecked(addr);
        let id = loc.row_id();
        if let Some(c) = self.combiner.as_mut() {
            if c.filled == c.window {
                c.filled = 0;
                c.rows.clear();
            }
            c.filled += 1;
            if c.rows.contains(&id) {
                return AccessResult {
                    kind: AccessKind::RowHit,
                    latency_ns: ROW_HIT_NS,
                    activated: false,
                    combined: true,
                };
            }
            c.rows.push(id);
        }
        let now = self.clock_ns;
        let policy = self.policy.page_policy;
        let bank = &mut self.banks[loc.bank as usize];
        if let PagePolicy::Adaptive { close_timeout_ns } = policy {
            if bank.open_row.is_some() && now - bank.last_access_ns >= close_timeout_ns {
                bank.open_row = None;
            }
        }
        let kind = match bank.open_row {
            Some(r) if r == loc.row => AccessKind::RowHit,
            Some(_) => AccessKind::RowConflict,
            None => AccessKind::RowOpen,
        };
        bank.last_access_ns = now;
        bank.open_row = match policy {
            PagePolicy::ClosedPage => None,
            _ => Some(loc.row),
        };
        let activated = kind != AccessKind::RowHit;
        if activated {
            self.activate(id);
        }
        let latency_ns = match kind {
            AccessKind::RowHit => ROW_HIT_NS,
            AccessKind::RowConflict => ROW_CONFLICT_NS,
            AccessKind::RowOpen => ROW_OPEN_NS,
        };
        AccessResult {
            kind,
            latency_ns,
            activated,
            combined: false,
        }
    }

    fn touch(&mut self, id: RowId) -> &mut RowActivity {
        let clock = self.clock_ns;
        let geometry = &self.geometry;
        let queue = &mut self.refresh_queue;
        self.rows.entry(id).or_insert_with(|| {
            let scheduled = geometry.next_refresh_after(id.row, clock);
            queue.push(Reverse((scheduled, id)));
            RowActivity {
                scheduled,
                ..RowActivity::default()
            }
        })
    }

    fn activate(&mut self, id: RowId) {
        self.total_activations += 1;
        let count = {
            let a = self.touch(id);
            a.activations += 1;
            a.activations
        };
        if let Some(rec) = self.recorder.as_mut() {
            *rec.activations.entry(id).or_default() += 1;
            rec.total_activations += 1;
        }
        let throttled = self.policy.mac.is_some_and(|max| count > max);
        if !throttled {
            let neighbors: Vec<RowId> = self.geometry.neighbors(id).collect();
            for n in neighbors {
                self.touch(n).disturbance += 1;
                if let Some(rec) = self.recorder.as_mut() {
                    *rec.disturbance.entry(n).or_default() += 1;
                }
            }
        }
        if let Some(trr) = self.policy.trr {
            if count % trr.threshold == 0 {
                self.events += 1;
                let lo = id.row.saturating_sub(trr.radius);
                let hi = (id.row + trr.radius).min(self.geometry.rows_per_bank - 1);
                for row in lo..=hi {
                    if row != id.row {
                        self.refresh_row(RowId { bank: id.bank, row });
                    }
                }
            }
        }
        if self.policy.para.is_some() && self.para_countdown != u64::MAX {
            self.para_countdown -= 1;
            if self.para_countdown == 0 {
                self.events += 1;
                let neighbors: Vec<RowId> = self.geometry.neighbors(id).collect();
                for n in neighbors {
                    self.refresh_row(n);
                }
                self.para_countdown = self.draw_para_countdown();
            }
        }
    }

    /// Refreshes one row now: cells reached by the accumulated disturbance
    /// flip if their value matches their orientation, then the row's ledger
    /// resets.
    fn refresh_row(&mut self, id: RowId) {
        self.events += 1;
        if self.banks[id.bank as usize].open_row == Some(id.row) {
            self.banks[id.bank as usize].open_row = None;
        }
        let Some(activity) = self.rows.remove(&id) else {
            return;
        };
        if activity.disturbance == 0 {
            return;
        }
        let cells = self.cells.row(id);
        for cell in cells.reached_by(activity.disturbance) {
            let (frame, page_bit) = self.geometry.cell_frame_bit(id, cell.bit);
            let value = self.memory.read_bit(frame, page_bit);
            if value != cell.orientation.source_value() {
                continue;
            }
            self.memory.toggle_bit(frame, page_bit);
            let direction = if value {
                FlipDirection::OneToZero
            } else {
                FlipDirection::ZeroToOne
            };
            self.flips.push(FlipRecord {
                frame,
                page_bit,
                direction,
                technique: self.technique,
                time_ns: self.clock_ns,
                row: id,
                row_bit: cell.bit,
            });
        }
    }

    /// Refreshes `rows` immediately (mitigation-triggered refresh).
    pub fn refresh_rows(&mut self, rows: &[RowId]) -> Vec<FlipRecord> {
        let start = self.flips.len();
        for &id in rows {
            self.refresh_row(id);
        }
        self.flips[start..].to_vec()
    }

    fn process_refreshes(&mut self, until: u64) {
        while let Some(&Reverse((t, id))) = self.refresh_queue.peek() {
            if t > until {
                break;
            }
            self.refresh_queue.pop();
            if self.rows.get(&id).is_some_and(|a| a.scheduled == t) {
                self.clock_ns = self.clock_ns.max(t);
                self.refresh_row(id);
            }
        }
    }

    fn advance(&mut self, elapsed_ns: u64) {
        let target = self.clock_ns + elapsed_ns;
        self.process_refreshes(target);
        self.clock_ns = target;
    }

    /// Advances the clock, firing every refresh that falls due.
    pub fn tick(&mut self, elapsed_ns: u64) -> Vec<FlipRecord> {
        let start = self.flips.len();
        self.advance(elapsed_ns);
        self.flips[start..].to_vec()
    }

    /// Issues `rounds` rounds of accesses to `addresses`, one access every
    /// `interval_ns`. Access by access; see [`hammer`](Self::hammer).
    pub fn hammer_exact(&mut self, addresses: &[u64], rounds: u64, interval_ns: u64) {
        for _ in 0..rounds {
            for &a in addresses {
                self.access(a);
                self.advance(interval_ns);
            }
        }
    }

    /// Same outcome as [`hammer_exact`](Self::hammer_exact), but once the loop
    /// reaches a steady state (controller state identical at period
    /// boundaries, no refresh or mitigation in between) whole periods are
    /// applied in bulk up to the next scheduled event.
    pub fn hammer(&mut self, addresses: &[u64], rounds: u64, interval_ns: u64) {
        assert!(interval_ns > 0, "interval must be positive");
        if addresses.is_empty() || rounds == 0 {
            return;
        }
        let fast = self.policy.trr.is_none() && self.policy.mac.is_none();
        let k = addresses.len() as u64;
        let window = u64::from(self.policy.reorder_combine.unwrap_or(1));
        let period_accesses = lcm(k, window);
        let rounds_per_period = period_accesses / k;
        let period_ns = period_accesses * interval_ns;
        let mut banks: Vec<u32> = addresses
            .iter()
            .map(|&a| self.geometry.row_of(a).bank)
            .collect();
        banks.sort_unstable();
        banks.dedup();

        let mut remaining = rounds;
        let mut steady: Option<PeriodDelta> = None;
        while remaining > 0 {
            if let Some(delta) = steady.take() {
                let m = self.skippable_periods(&delta, period_ns, remaining / rounds_per_period);
                if m > 0 {
                    self.apply_periods(&delta, m, period_ns, &banks);
                    remaining -= m * rounds_per_period;
                    continue;
                }
            }
            let now_rounds = rounds_per_period.min(remaining);
            let record = fast && now_rounds == rounds_per_period;
            let before = record.then(|| self.snapshot(&banks));
            let events = self.events;
            if record {
                self.recorder = Some(PeriodDelta::default());
            }
            self.hammer_exact(addresses, now_rounds, interval_ns);
            let delta = self.recorder.take();
            remaining -= now_rounds;
            if let (Some(delta), Some(before)) = (delta, before) {
                if self.events == events && self.snapshot(&banks) == before {
                    steady = Some(delta);
                }
            }
        }
    }

    fn snapshot(&self, banks: &[u32]) -> LoopSnapshot {
        LoopSnapshot {
            banks: banks
                .iter()
                .map(|&b| {
                    let s = self.banks[b as usize];
                    (s.open_row, self.clock_ns - s.last_access_ns)
                })
                .collect(),
            combiner: self.combiner.as_ref().map(|c| (c.filled, c.rows.clone())),
        }
    }

    fn skippable_periods(&self, delta: &PeriodDelta, period_ns: u64, max_periods: u64) -> u64 {
        let mut m = max_periods;
        if let Some(&Reverse((t, _))) = self.refresh_queue.peek() {
            m = m.min(t.saturating_sub(self.clock_ns) / period_ns);
        }
        if self.policy.para.is_some() && self.para_countdown != u64::MAX && delta.total_activations > 0 {
            m = m.min((self.para_countdown - 1) / delta.total_activations);
        }
        m
    }

    fn apply_periods(&mut self, delta: &PeriodDelta, m: u64, period_ns: u64, banks: &[u32]) {
        for (id, n) in &delta.activations {
            self.rows.get_mut(id).expect("row touched in steady period").activations += m * n;
        }
        for (id, n) in &delta.disturbance {
            self.rows.get_mut(id).expect("row touched in steady period").disturbance += m * n;
        }
        self.total_activations += m * delta.total_activations;
        if self.policy.para.is_some() && self.para_countdown != u64::MAX {
            self.para_countdown -= m * delta.total_activations;
        }
        let span = m * period_ns;
        for &b in banks {
            self.banks[b as usize].last_access_ns += span;
        }
        self.clock_ns += span;
        self.process_refreshes(self.clock_ns);
    }

    /// Restores the fill pattern of every frame in `rows`.
    pub fn reset_row_contents(&mut self, rows: &[RowId]) {
        for &id in rows {
            for frame in self.geometry.row_frames(id) {
                self.memory.reset_frame(frame);
            }
        }
    }

    /// Draws a uniformly random cache-line-aligned physical address.
    pub fn random_address(&self, rng: &mut SimRng) -> u64 {
        let lines = self.geometry.capacity() / 64;
        rng.random_range(0..lines) * 64
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: u64, b: u64) -> u64 {
    a / gcd(a, b) * b
}
