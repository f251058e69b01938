use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dram::{CellMapParams, ControllerPolicy, DramGeometry, DramState, FlipRecord, RefreshMode, RowId};
use crate::hammer::{
    expected_flips_per_attempt, pick_addresses, run_attempt, victim_rows, AddressKnowledge, AddressPool,
    CalibrationRecord, HammerTechnique, TechniqueKind,
};
use crate::memory::{Fill, PhysMemory, PAGE_SIZE};
use crate::osmodel::EpcRegion;
use crate::rng::{indexed_substream, mix64, SimRng};

use super::{MachineState, OrchestratorError, Phase, PhaseRecord, ScenarioOutcome};

/// Flips per second the server profile shows while templating.
pub const SERVER_FLIP_RATE: f64 = 3.0 / (8.0 * 3600.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MachineProfile {
    Desktop,
    Server,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineSpec {
    pub name: String,
    pub profile: MachineProfile,
    pub geometry: DramGeometry,
    pub policy: ControllerPolicy,
    pub cells: CellMapParams,
    pub technique: HammerTechnique,
    pub epc: EpcRegion,
}

impl MachineSpec {
    pub fn desktop(record: &CalibrationRecord) -> Result<Self, OrchestratorError> {
        Ok(Self {
            name: "desktop".into(),
            profile: MachineProfile::Desktop,
            geometry: DramGeometry::ddr4_16gib(),
            policy: ControllerPolicy::default(),
            cells: record.cells.clone(),
            technique: one_location(record)?,
            epc: EpcRegion::standard(),
        })
    }

    /// Double refresh rate and cell density lowered until the seek rate is
    /// [`SERVER_FLIP_RATE`].
    pub fn server(record: &CalibrationRecord) -> Result<Self, OrchestratorError> {
        let geometry = DramGeometry {
            refresh_mode: RefreshMode::Double,
            ..DramGeometry::ddr4_16gib()
        };
        let technique = one_location(record)?;
        let mut cells = record.cells.clone();
        let rate = expected_flips_per_attempt(&cells, &technique, &geometry) / duration_s(&technique);
        if rate <= 0.0 {
            return Err(OrchestratorError::Config("calibrated cells never flip under double refresh".into()));
        }
        cells.density *= (SERVER_FLIP_RATE / rate).min(1.0);
        Ok(Self {
            name: "server".into(),
            profile: MachineProfile::Server,
            geometry,
            technique,
            cells,
            policy: ControllerPolicy::default(),
            epc: EpcRegion::standard(),
        })
    }

    pub fn for_profile(profile: MachineProfile, record: &CalibrationRecord) -> Result<Self, OrchestratorError> {
        match profile {
            MachineProfile::Desktop => Self::desktop(record),
            MachineProfile::Server => Self::server(record),
        }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        self.geometry.validate()?;
        self.policy.validate()?;
        self.cells.validate()?;
        self.technique.validate()?;
        let frames = self.geometry.total_frames();
        if self.epc.frames == 0 || self.epc.base_frame + self.epc.frames > frames {
            return Err(OrchestratorError::Config(format!("EPC region does not fit {frames} frames")));
        }
        Ok(())
    }
}

fn one_location(record: &CalibrationRecord) -> Result<HammerTechnique, OrchestratorError> {
    record
        .technique(TechniqueKind::OneLocation)
        .copied()
        .ok_or_else(|| OrchestratorError::Config("calibration lacks one-location".into()))
}

fn duration_s(t: &HammerTechnique) -> f64 {
    t.attempt_duration_ns() as f64 * 1e-9
}

fn epc_rows(geometry: &DramGeometry, epc: &EpcRegion) -> BTreeSet<RowId> {
    (epc.base_frame..epc.base_frame + epc.frames).map(|f| geometry.frame_row(f)).collect()
}

/// Rows outside the EPC that neighbor one of its rows.
pub fn epc_adjacent_rows(geometry: &DramGeometry, epc: &EpcRegion) -> Vec<RowId> {
    let inside = epc_rows(geometry, epc);
    let adjacent: BTreeSet<RowId> = inside
        .iter()
        .flat_map(|&r| geometry.neighbors(r).collect::<Vec<_>>())
        .filter(|r| !inside.contains(r))
        .collect();
    adjacent.into_iter().collect()
}

/// Frames outside the EPC whose row neighbors the EPC.
pub fn epc_adjacent_frames(geometry: &DramGeometry, epc: &EpcRegion) -> Vec<u64> {
    let mut frames: Vec<u64> = epc_adjacent_rows(geometry, epc)
        .into_iter()
        .flat_map(|r| geometry.row_frames(r))
        .filter(|&f| !epc.contains(f))
        .collect();
    frames.sort_unstable();
    frames
}

/// A machine whose memory controller locks up on the first EPC flip.
#[derive(Debug)]
pub struct Machine {
    pub spec: MachineSpec,
    dram: DramState,
    state: MachineState,
    halted_at_ns: Option<u64>,
    epc_flip: Option<FlipRecord>,
}

impl Machine {
    pub fn new(spec: MachineSpec, seed: u64) -> Result<Self, OrchestratorError> {
        spec.validate()?;
        let memory = PhysMemory::new(Fill::Random { seed: mix64(seed) });
        let dram = DramState::new(
            spec.geometry.clone(),
            spec.policy.clone(),
            spec.cells.clone(),
            memory,
            indexed_substream(seed, "machine/para", 0),
        )?;
        Ok(Self {
            spec,
            dram,
            state: MachineState::Running,
            halted_at_ns: None,
            epc_flip: None,
        })
    }

    pub fn state(&self) -> MachineState {
        self.state
    }

    pub fn clock_ns(&self) -> u64 {
        self.dram.clock_ns()
    }

    pub fn halted_at_ns(&self) -> Option<u64> {
        self.halted_at_ns
    }

    pub fn epc_flip(&self) -> Option<&FlipRecord> {
        self.epc_flip.as_ref()
    }

    fn running(&self) -> Result<(), OrchestratorError> {
        match self.state {
            MachineState::Running => Ok(()),
            MachineState::Halted => Err(OrchestratorError::Halted),
        }
    }

    /// Flips committed up to and including the first EPC flip.
    fn commit(&mut self, mut flips: Vec<FlipRecord>) -> Vec<FlipRecord> {
        if let Some(i) = flips.iter().position(|f| self.spec.epc.contains(f.frame)) {
            flips.truncate(i + 1);
            self.state = MachineState::Halted;
            self.halted_at_ns = Some(flips[i].time_ns);
            self.epc_flip = Some(flips[i]);
        }
        flips
    }

    pub fn hammer(&mut self, addresses: &[u64]) -> Result<Vec<FlipRecord>, OrchestratorError> {
        self.hammer_rounds(addresses, self.spec.technique.rounds_per_attempt)
    }

    pub fn hammer_rounds(&mut self, addresses: &[u64], rounds: u64) -> Result<Vec<FlipRecord>, OrchestratorError> {
        self.running()?;
        let t = self.spec.technique;
        let flips = run_attempt(&mut self.dram, t.tag(), addresses, rounds, t.access_interval_ns)?;
        Ok(self.commit(flips))
    }

    pub fn idle(&mut self, ns: u64) -> Result<Vec<FlipRecord>, OrchestratorError> {
        self.running()?;
        let flips = self.dram.tick(ns);
        Ok(self.commit(flips))
    }

    pub fn read_page(&self, frame: u64) -> Result<Vec<u8>, OrchestratorError> {
        self.running()?;
        Ok(self.dram.memory().read_page(frame))
    }

    pub fn write_page(&mut self, frame: u64, content: &[u8]) -> Result<(), OrchestratorError> {
        self.running()?;
        if content.len() != PAGE_SIZE {
            return Err(OrchestratorError::Config(format!("page content is {} bytes", content.len())));
        }
        self.dram.memory_mut().write_page(frame, content);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetConfig {
    pub seed: u64,
    pub machines: Vec<MachineSpec>,
    /// Simulated templating time per machine before giving up.
    pub seek_max_s: f64,
    pub destroy_max_s: f64,
}

impl FleetConfig {
    pub fn new(seed: u64, machines: Vec<MachineSpec>) -> Self {
        Self {
            seed,
            machines,
            seek_max_s: 8.0 * 3600.0,
            destroy_max_s: 60.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineReport {
    pub name: String,
    pub profile: MachineProfile,
    pub vulnerable: bool,
    pub seek_attempts: u64,
    pub seek_s: f64,
    pub first_flip: Option<FlipRecord>,
    /// Destroy time until the halt, from the barrier.
    pub halt_after_s: Option<f64>,
    pub epc_flip: Option<FlipRecord>,
    pub outcome: ScenarioOutcome,
}

fn seek_addresses(m: &Machine, avoid: &BTreeSet<RowId>, rng: &mut SimRng) -> Result<Vec<u64>, OrchestratorError> {
    let g = &m.spec.geometry;
    loop {
        let addrs = pick_addresses(m.spec.technique.kind, g, &AddressPool::whole(), AddressKnowledge::None, rng)?;
        let touches = addrs.iter().any(|&a| avoid.contains(&g.row_of(a)))
            || victim_rows(g, &addrs).iter().any(|r| avoid.contains(r));
        if !touches {
            return Ok(addrs);
        }
    }
}

/// Seek on every machine, then destroy on the vulnerable ones from a
/// common start time.
pub fn run_dos(cfg: &FleetConfig) -> Result<Vec<MachineReport>, OrchestratorError> {
    if cfg.machines.is_empty() {
        return Err(OrchestratorError::Config("a fleet needs at least one machine".into()));
    }
    if !(cfg.seek_max_s > 0.0 && cfg.destroy_max_s > 0.0) {
        return Err(OrchestratorError::Config("seek and destroy limits must be positive".into()));
    }
    let mut machines = Vec::new();
    let mut reports = Vec::new();
    for (i, spec) in cfg.machines.iter().enumerate() {
        let seed = indexed_substream(cfg.seed, "dos/machine", i as u64).random();
        let mut m = Machine::new(spec.clone(), seed)?;
        let mut rng = indexed_substream(cfg.seed, "dos/seek", i as u64);
        let epc = epc_rows(&spec.geometry, &spec.epc);
        let start = m.clock_ns();
        let mut attempts = 0;
        let mut first = None;
        while (m.clock_ns() - start) as f64 * 1e-9 < cfg.seek_max_s {
            let addrs = seek_addresses(&m, &epc, &mut rng)?;
            attempts += 1;
            if let Some(f) = m.hammer(&addrs)?.first() {
                first = Some(*f);
                break;
            }
        }
        let seek_s = (m.clock_ns() - start) as f64 * 1e-9;
        let mut outcome = ScenarioOutcome::new("denial_of_service");
        outcome.phases.push(PhaseRecord {
            phase: Phase::Seek,
            completed: first.is_some(),
            duration_s: seek_s,
            detail: format!("{attempts} attempts"),
        });
        reports.push(MachineReport {
            name: spec.name.clone(),
            profile: spec.profile,
            vulnerable: first.is_some(),
            seek_attempts: attempts,
            seek_s,
            first_flip: first,
            halt_after_s: None,
            epc_flip: None,
            outcome,
        });
        machines.push(m);
    }

    let barrier_s = reports.iter().map(|r| r.seek_s).fold(0.0, f64::max);
    for (i, (m, report)) in machines.iter_mut().zip(reports.iter_mut()).enumerate() {
        if !report.vulnerable {
            report.outcome.diagnostics.push("no flip while seeking; machine skipped".into());
            continue;
        }
        m.idle(((barrier_s - report.seek_s) * 1e9) as u64)?;
        let mut rng = indexed_substream(cfg.seed, "dos/destroy", i as u64);
        let g = m.spec.geometry.clone();
        let rows = epc_adjacent_rows(&g, &m.spec.epc);
        let t = m.spec.technique;
        // Two windows guarantee a full window of disturbance before the
        // victim's refresh.
        let per_round = u64::from(t.kind.address_count()) * t.access_interval_ns;
        let rounds = (2 * g.effective_refresh_window_ns()).div_ceil(per_round);
        let start = m.clock_ns();
        let mut attempts = 0;
        while m.state() == MachineState::Running && (m.clock_ns() - start) as f64 * 1e-9 < cfg.destroy_max_s {
            let row = rows[rng.random_range(0..rows.len())];
            let column = rng.random_range(0..g.row_size / 64) * 64;
            m.hammer_rounds(&[g.phys_addr(row.bank, row.row, column)], rounds)?;
            attempts += 1;
        }
        let end = m.halted_at_ns().unwrap_or(m.clock_ns());
        let secs = (end - start) as f64 * 1e-9;
        let halted = m.state() == MachineState::Halted;
        report.outcome.phases.push(PhaseRecord {
            phase: Phase::Destroy,
            completed: halted,
            duration_s: secs,
            detail: format!("{attempts} attempts on {} EPC-adjacent rows", rows.len()),
        });
        report.outcome.machine = m.state();
        report.outcome.total_s = report.seek_s + secs;
        if halted {
            report.halt_after_s = Some(secs);
            report.epc_flip = m.epc_flip().copied();
        } else {
            report.outcome.diagnostics.push(format!("destroy limit of {} s reached", cfg.destroy_max_s));
        }
    }
    Ok(reports)
}
