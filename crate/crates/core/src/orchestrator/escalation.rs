use std::collections::{BTreeMap, BTreeSet};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::defenses::{
    run_defense_suite, technique_trace, DefenseConfig, DefenseInputs, FootprintSample, OwnedFlip, Placement,
    ProgramDescriptor, TargetClass,
};
use crate::dram::{CellMapParams, ControllerPolicy, DramGeometry, DramState, FlipDirection, FlipRecord};
use crate::hammer::{
    pick_addresses, run_attempt, victim_rows, AddressKnowledge, AddressPool, CalibrationRecord, HammerTechnique,
    TechniqueKind,
};
use crate::memory::{Fill, PhysMemory, PAGE_SIZE};
use crate::opflip::{decode, load_flip_database, normalize_asm, verify_database, FlipDatabaseEntry, SUDOERS_FIXTURE};
use crate::oracle::OracleConfig;
use crate::osmodel::{
    Allocator, FileContent, FilePageId, FrameOwner, KernelUse, OsConfig, OsModel, Partition, Pid,
};
use crate::rng::{mix64, substream, SimRng};
use crate::waylay::{chase_until, exhaustion_evict, spawn_attacker, waylay_until, EvictionConfig, Evictor};

use super::{OrchestratorError, Phase, PhaseRecord, Privilege, ScenarioOutcome};

/// File offset of the page holding the privilege checks.
pub const TARGET_PAGE_OFFSET: u64 = 0x8000;

/// One database flip located inside the target page.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PageExploit {
    pub entry: FlipDatabaseEntry,
    pub page_bit: u32,
    pub direction: FlipDirection,
}

/// The page of the target binary that is attacked, with its exploitable
/// flips.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBinary {
    pub name: String,
    pub page_offset: u64,
    pub content: Vec<u8>,
    pub exploits: Vec<PageExploit>,
}

impl TargetBinary {
    /// Places every byte-level database entry into one page; the remaining
    /// bytes are seeded filler.
    pub fn from_database(db: &[FlipDatabaseEntry], page_offset: u64, seed: u64) -> Result<Self, OrchestratorError> {
        let mut rng = substream(seed, "target-binary");
        let mut content = vec![0u8; PAGE_SIZE];
        rng.fill_bytes(&mut content);
        let mut placed: BTreeMap<u64, u8> = BTreeMap::new();
        let mut name = String::new();
        for e in db {
            let Some(raw) = &e.raw else { continue };
            name = e.binary.clone();
            let start = e
                .offset
                .checked_sub(raw.flipped_index as u64)
                .ok_or_else(|| OrchestratorError::Config(format!("entry 0x{:x} starts before 0", e.offset)))?;
            for (i, &b) in raw.bytes.iter().enumerate() {
                let off = start + i as u64;
                if off < page_offset || off >= page_offset + PAGE_SIZE as u64 {
                    return Err(OrchestratorError::Config(format!("entry 0x{:x} outside target page", e.offset)));
                }
                if placed.insert(off, b).is_some_and(|old| old != b) {
                    return Err(OrchestratorError::Config(format!("conflicting bytes at 0x{off:x}")));
                }
                content[(off - page_offset) as usize] = b;
            }
        }
        let mut exploits = Vec::new();
        for e in db.iter().filter(|e| e.raw.is_some() && e.exploitable) {
            let page_bit = ((e.offset - page_offset) * 8) as u32 + u32::from(e.bit);
            let set = content[(page_bit / 8) as usize] >> (page_bit % 8) & 1 == 1;
            exploits.push(PageExploit {
                entry: e.clone(),
                page_bit,
                direction: if set { FlipDirection::OneToZero } else { FlipDirection::ZeroToOne },
            });
        }
        Ok(Self {
            name,
            page_offset,
            content,
            exploits,
        })
    }

    pub fn sudoers(seed: u64) -> Result<Self, OrchestratorError> {
        let db = load_flip_database(SUDOERS_FIXTURE)?;
        Self::from_database(&db, TARGET_PAGE_OFFSET, seed)
    }

    pub fn exploit(&self, page_bit: u32, direction: FlipDirection) -> Option<&PageExploit> {
        self.exploits.iter().find(|x| x.page_bit == page_bit && x.direction == direction)
    }

    /// Decodes the instruction around `page_bit` after flipping it and checks
    /// the database's flipped mnemonic.
    pub fn flip_decodes_as_listed(&self, exploit: &PageExploit) -> bool {
        let Some(raw) = &exploit.entry.raw else { return false };
        let start = (exploit.entry.offset - raw.flipped_index as u64 - self.page_offset) as usize;
        let mut bytes = self.content.clone();
        bytes[(exploit.page_bit / 8) as usize] ^= 1 << (exploit.page_bit % 8);
        decode(&bytes, start)
            .map(|i| normalize_asm(&i.text()) == normalize_asm(&exploit.entry.flipped))
            .unwrap_or(false)
    }
}

/// Everything one privilege-escalation run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EscalationConfig {
    pub seed: u64,
    pub geometry: DramGeometry,
    pub policy: ControllerPolicy,
    pub cells: CellMapParams,
    pub os: OsConfig,
    pub technique: HammerTechnique,
    pub enclave: bool,
    pub placement: Placement,
    pub target: TargetClass,
    pub oracle: OracleConfig,
    pub defenses: DefenseConfig,
    /// Exploitable frames to collect before placement.
    pub target_frames: u64,
    pub max_template_attempts: u64,
    pub max_placement_iterations: u64,
    pub restore: bool,
    /// Attempts recorded for the access-pattern defenses.
    pub trace_attempts: u32,
}

/// CATT rows reserved for the kernel on the small machine.
pub const SMALL_KERNEL_ROWS: u32 = 64;
/// Rows per bank of the escalation machine.
pub const SMALL_ROWS: u32 = 512;

impl EscalationConfig {
    /// 32 MiB machine with the desktop's proportions. Under CATT the
    /// background shrinks by the rows the partitioning leaves unused.
    pub fn small_machine(allocator: Allocator) -> (DramGeometry, OsConfig) {
        let geometry = DramGeometry::small(8, SMALL_ROWS);
        let frames = geometry.total_frames();
        let mut os = OsConfig {
            allocator,
            ..OsConfig::small(frames)
        };
        if let Allocator::Catt { kernel_rows, gap_rows } = allocator {
            let per_row = u64::from(geometry.banks_total) * u64::from(geometry.frames_per_row());
            let user_frames = frames - u64::from(kernel_rows + gap_rows) * per_row;
            let user_need = os.background_frames + os.free_reserve + os.cached_data_pages + os.cached_exec_pages;
            os.background_frames -= user_need.saturating_sub(user_frames);
        }
        (geometry, os)
    }

    /// Enclave, one-location hammering, waylaying, an opcode flip in a user
    /// page and the partitioning allocator.
    pub fn stealth(record: &CalibrationRecord, seed: u64) -> Result<Self, OrchestratorError> {
        let technique = *record
            .technique(TechniqueKind::OneLocation)
            .ok_or_else(|| OrchestratorError::Config("calibration lacks one-location".into()))?;
        let allocator = Allocator::Catt {
            kernel_rows: SMALL_KERNEL_ROWS,
            gap_rows: crate::osmodel::DEFAULT_CATT_GAP_ROWS,
        };
        let (geometry, os) = Self::small_machine(allocator);
        Ok(Self {
            seed,
            geometry,
            policy: ControllerPolicy::default(),
            cells: record.cells.clone(),
            os,
            technique,
            enclave: true,
            placement: Placement::Waylaying,
            target: TargetClass::User,
            oracle: OracleConfig::stealth(),
            defenses: DefenseConfig::default(),
            target_frames: 1,
            max_template_attempts: 50_000,
            max_placement_iterations: 1_000_000,
            restore: true,
            trace_attempts: 8,
        })
    }

    /// Unprotected double-sided hammering of kernel page tables after
    /// exhausting memory.
    pub fn naive(record: &CalibrationRecord, seed: u64) -> Result<Self, OrchestratorError> {
        let technique = *record
            .technique(TechniqueKind::DoubleSided)
            .ok_or_else(|| OrchestratorError::Config("calibration lacks double-sided".into()))?;
        Ok(Self {
            technique,
            enclave: false,
            placement: Placement::Exhaustion,
            target: TargetClass::Kernel,
            max_template_attempts: 200,
            restore: false,
            ..Self::stealth(record, seed)?
        })
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        self.geometry.validate()?;
        self.policy.validate()?;
        self.cells.validate()?;
        self.os.validate(&self.geometry)?;
        self.technique.validate()?;
        self.oracle.validate()?;
        if self.placement == Placement::None && self.target == TargetClass::User {
            return Err(OrchestratorError::Config("a user target needs a placement method".into()));
        }
        if self.target_frames == 0 {
            return Err(OrchestratorError::Config("target_frames must be >= 1".into()));
        }
        Ok(())
    }
}

/// A templated frame whose single flip on the target content is exploitable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplatedFrame {
    pub frame: u64,
    pub addresses: Vec<u64>,
    pub page_bit: u32,
    pub direction: FlipDirection,
}

/// The flip that was exploited.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExploitedFlip {
    pub frame: u64,
    pub file_offset: u64,
    pub bit: u8,
    pub direction: FlipDirection,
    pub original: String,
    pub flipped: String,
}

struct Run<'a> {
    cfg: &'a EscalationConfig,
    dram: DramState,
    os: OsModel,
    rng: SimRng,
    outcome: ScenarioOutcome,
    timeline: Vec<FootprintSample>,
    flips: Vec<OwnedFlip>,
    clock_s: f64,
    attacker: Pid,
}

impl Run<'_> {
    fn phase(&mut self, phase: Phase, completed: bool, duration_s: f64, detail: String) {
        self.clock_s += duration_s;
        self.outcome.phases.push(PhaseRecord {
            phase,
            completed,
            duration_s,
            detail,
        });
    }

    fn sample(&mut self, resident_bytes: u64, system_usage: f64) {
        self.timeline.push(FootprintSample {
            time_s: self.clock_s,
            resident_bytes,
            system_usage,
        });
    }

    fn sample_now(&mut self) {
        let r = self.os.resident_bytes(self.attacker);
        let u = self.os.system_usage();
        self.sample(r, u);
    }

    fn own(&mut self, flips: &[FlipRecord]) {
        for f in flips {
            let owner = self.os.frames().owner(f.frame);
            self.flips.push(OwnedFlip { flip: *f, owner });
        }
    }

    fn attempt(&mut self, addresses: &[u64]) -> Result<Vec<FlipRecord>, OrchestratorError> {
        let t = &self.cfg.technique;
        let flips = run_attempt(&mut self.dram, t.tag(), addresses, t.rounds_per_attempt, t.access_interval_ns)?;
        self.own(&flips);
        Ok(flips)
    }

    fn knowledge(&self) -> AddressKnowledge {
        if self.cfg.technique.kind == TechniqueKind::DoubleSided {
            AddressKnowledge::Full
        } else {
            AddressKnowledge::None
        }
    }

    /// Frames the target page can be relocated into.
    fn cycling_frames(&self) -> Vec<u64> {
        let ft = self.os.frames();
        (0..ft.len())
            .filter(|&f| {
                ft.partition_of(f) == Partition::User
                    && matches!(ft.owner(f), FrameOwner::Free | FrameOwner::PageCache(_))
            })
            .collect()
    }
}

/// Runs preparation, templating, placement, hammering, exploitation and the
/// optional restore, then evaluates the defense suite.
pub fn run_privilege_escalation(cfg: &EscalationConfig) -> Result<ScenarioOutcome, OrchestratorError> {
    cfg.validate()?;
    let db = load_flip_database(SUDOERS_FIXTURE)?;
    let check = verify_database(&db);
    if !check.all_matched() {
        return Err(OrchestratorError::Config(format!(
            "flip database does not verify: {} mismatches",
            check.mismatches().len()
        )));
    }
    let binary = TargetBinary::from_database(&db, TARGET_PAGE_OFFSET, cfg.seed)?;

    let memory = PhysMemory::new(Fill::Random { seed: mix64(cfg.seed) });
    let dram = DramState::new(
        cfg.geometry.clone(),
        cfg.policy.clone(),
        cfg.cells.clone(),
        memory,
        substream(cfg.seed, "escalation/para"),
    )?;
    let mut os = OsModel::boot(cfg.geometry.clone(), cfg.os.clone(), substream(cfg.seed, "escalation/os"))?;
    let file = os.register_file(&binary.name, 1, true, FileContent::Pages(vec![binary.content.clone()]));
    let page = FilePageId { file, index: 0 };
    let mut run = Run {
        cfg,
        dram,
        os,
        rng: substream(cfg.seed, "escalation/attack"),
        outcome: ScenarioOutcome::new("privilege_escalation"),
        timeline: Vec::new(),
        flips: Vec::new(),
        clock_s: 0.0,
        attacker: 0,
    };
    run.os.fault_in(page, Some(run.dram.memory_mut()))?;
    let mut evictor = Evictor::new(&mut run.os, EvictionConfig::linux());
    let target = spawn_attacker(&mut run.os, page, cfg.enclave, &evictor.config)?;
    run.attacker = target.pid;
    run.phase(
        Phase::Preparation,
        true,
        0.0,
        format!("{} verified, {} exploitable offsets in page", binary.name, binary.exploits.len()),
    );
    run.sample_now();

    match cfg.target {
        TargetClass::Kernel => kernel_attack(&mut run, page, &evictor)?,
        TargetClass::User => user_attack(&mut run, &binary, page, target, &mut evictor)?,
    }

    let trace_rng = &mut substream(cfg.seed, "escalation/trace");
    let trace = technique_trace(&cfg.technique, &cfg.geometry, run.attacker, cfg.enclave, cfg.trace_attempts, trace_rng)?;
    let inputs = DefenseInputs {
        program: ProgramDescriptor::attacker(cfg.enclave),
        trace,
        geometry: cfg.geometry.clone(),
        allocator: cfg.os.allocator,
        flips: run.flips.clone(),
        target: cfg.target,
        timeline: run.timeline.clone(),
        total_bytes: run.os.total_bytes(),
        near_oom_fraction: cfg.os.near_oom_fraction,
        enclave: cfg.enclave,
        one_location: cfg.technique.kind == TechniqueKind::OneLocation,
        placement: cfg.placement,
    };
    run.outcome.defenses = Some(run_defense_suite(&inputs, &cfg.defenses));
    run.outcome.total_s = run.clock_s;
    Ok(run.outcome)
}

fn kernel_attack(run: &mut Run, page: FilePageId, evictor: &Evictor) -> Result<(), OrchestratorError> {
    let cfg = run.cfg;
    if cfg.placement == Placement::Exhaustion {
        let r = exhaustion_evict(&mut run.os, run.attacker, page, &evictor.config, &mut run.rng)?;
        run.sample(r.peak_resident_bytes, r.peak_system_usage);
        run.phase(
            Phase::Exhaustion,
            !r.killed,
            r.elapsed_s,
            format!("peak usage {:.3}, {} MiB allocated", r.peak_system_usage, r.data_accessed_mib().round()),
        );
        if r.killed {
            run.outcome.diagnostics.push("attacker killed while exhausting memory".into());
            return Ok(());
        }
    }
    let pool = AddressPool::frames(run.cycling_frames());
    let start = run.dram.clock_ns();
    for attempt in 1..=cfg.max_template_attempts {
        let addrs = pick_addresses(cfg.technique.kind, &cfg.geometry, &pool, run.knowledge(), &mut run.rng)?;
        let flips = run.attempt(&addrs)?;
        let pte = flips
            .iter()
            .find(|f| run.os.frames().owner(f.frame) == FrameOwner::Kernel(KernelUse::PageTable));
        if let Some(f) = pte {
            let detail = format!("page-table frame {} bit {} after {attempt} attempts", f.frame, f.page_bit);
            let secs = (run.dram.clock_ns() - start) as f64 * 1e-9;
            run.phase(Phase::Hammering, true, secs, detail);
            run.phase(Phase::Exploitation, true, 0.0, "page-table entry corrupted".into());
            run.outcome.privilege = Privilege::Root;
            return Ok(());
        }
    }
    let secs = (run.dram.clock_ns() - start) as f64 * 1e-9;
    run.phase(
        Phase::Hammering,
        false,
        secs,
        format!("{} attempts without a page-table flip", cfg.max_template_attempts),
    );
    run.outcome
        .diagnostics
        .push("hammering cap exceeded: no flip reached kernel memory".into());
    Ok(())
}

fn user_attack(
    run: &mut Run,
    binary: &TargetBinary,
    page: FilePageId,
    target: crate::waylay::WaylayTarget,
    evictor: &mut Evictor,
) -> Result<(), OrchestratorError> {
    let cfg = run.cfg;
    // Templating: victim frames are filled with the target page, so a flip
    // seen here is exactly the flip the page will take.
    let cycling = run.cycling_frames();
    let cycling_set: BTreeSet<u64> = cycling.iter().copied().collect();
    let pool = AddressPool::frames(cycling.clone());
    let start = run.dram.clock_ns();
    let mut templated: Vec<TemplatedFrame> = Vec::new();
    let mut attempts = 0;
    let mut template_flips = 0usize;
    while attempts < cfg.max_template_attempts && (templated.len() as u64) < cfg.target_frames {
        attempts += 1;
        let addrs = pick_addresses(cfg.technique.kind, &cfg.geometry, &pool, run.knowledge(), &mut run.rng)?;
        let current = run.os.cache().frame_of(page);
        let frames: Vec<u64> = victim_rows(&cfg.geometry, &addrs)
            .into_iter()
            .flat_map(|r| cfg.geometry.row_frames(r))
            .filter(|f| cycling_set.contains(f) && Some(*f) != current)
            .collect();
        for &f in &frames {
            run.dram.memory_mut().write_page(f, &binary.content);
        }
        let flips = run.attempt(&addrs)?;
        template_flips += flips.len();
        for &f in &frames {
            let in_frame: Vec<&FlipRecord> = flips.iter().filter(|x| x.frame == f).collect();
            if let [one] = in_frame.as_slice() {
                if binary.exploit(one.page_bit, one.direction).is_some() && !templated.iter().any(|t| t.frame == f) {
                    templated.push(TemplatedFrame {
                        frame: f,
                        addresses: addrs.clone(),
                        page_bit: one.page_bit,
                        direction: one.direction,
                    });
                }
            }
            run.dram.memory_mut().reset_frame(f);
        }
    }
    let secs = (run.dram.clock_ns() - start) as f64 * 1e-9;
    let found = !templated.is_empty();
    run.phase(
        Phase::Templating,
        found,
        secs,
        format!("{attempts} attempts, {template_flips} flips, {} exploitable frames", templated.len()),
    );
    run.sample_now();
    if !found {
        run.outcome
            .diagnostics
            .push(format!("templating cap of {} attempts exceeded", cfg.max_template_attempts));
        return Ok(());
    }

    let targets: BTreeSet<u64> = templated.iter().map(|t| t.frame).collect();
    let frame = match cfg.placement {
        Placement::Waylaying => {
            let r = waylay_until(
                &mut run.os,
                evictor,
                &cfg.oracle,
                target,
                &targets,
                cfg.max_placement_iterations,
                Some(run.dram.memory_mut()),
                &mut run.rng,
            )?;
            let base = run.clock_s;
            for s in &r.steps {
                run.timeline.push(FootprintSample {
                    time_s: base + s.elapsed_s,
                    resident_bytes: s.resident_bytes,
                    system_usage: run.os.system_usage(),
                });
            }
            run.sample(r.peak_resident_bytes, run.os.system_usage());
            let detail = format!("{} iterations, {} oracle trials", r.iterations, r.oracle_trials);
            run.phase(Phase::Waylaying, r.success, r.elapsed_s, detail);
            r.success.then_some(r.final_frame).flatten()
        }
        Placement::Chasing => {
            let (r, pid) = chase_until(
                &mut run.os,
                evictor,
                &cfg.oracle,
                page,
                &targets,
                cfg.max_placement_iterations,
                run.dram.memory_mut(),
                &mut run.rng,
            )?;
            run.attacker = pid;
            run.sample(r.peak_resident_bytes, run.os.system_usage());
            let detail = format!("{} iterations, {} oracle trials", r.iterations, r.oracle_trials);
            run.phase(Phase::Chasing, r.success, r.elapsed_s, detail);
            r.success.then_some(r.final_frame).flatten()
        }
        Placement::Exhaustion => {
            let mut placed = None;
            let mut secs = 0.0;
            for _ in 0..cfg.max_placement_iterations {
                if run.os.mincore(page) {
                    let r = exhaustion_evict(&mut run.os, run.attacker, page, &evictor.config, &mut run.rng)?;
                    secs += r.elapsed_s;
                    run.sample(r.peak_resident_bytes, r.peak_system_usage);
                    if r.killed {
                        run.outcome.diagnostics.push("attacker killed while exhausting memory".into());
                        break;
                    }
                }
                let f = run.os.fault_in(page, Some(run.dram.memory_mut()))?;
                secs += run.os.config().fault_cost_ns as f64 * 1e-9;
                if targets.contains(&f) {
                    placed = Some(f);
                    break;
                }
            }
            run.phase(Phase::Exhaustion, placed.is_some(), secs, String::new());
            placed
        }
        Placement::None => None,
    };
    let Some(frame) = frame.filter(|f| run.os.cache().frame_of(page) == Some(*f)) else {
        run.outcome.diagnostics.push("placement cap exceeded".into());
        return Ok(());
    };

    let chosen = templated.iter().find(|t| t.frame == frame).expect("frame is a target").clone();
    let flips = run.attempt(&chosen.addresses)?;
    let hammer_s = cfg.technique.attempt_duration_ns() as f64 * 1e-9;
    run.phase(
        Phase::Hammering,
        true,
        hammer_s,
        format!("{} flips, {} in the target frame", flips.len(), flips.iter().filter(|f| f.frame == frame).count()),
    );

    let content = run.os.read_page(run.dram.memory(), frame)?;
    let diff: Vec<u32> = (0..PAGE_SIZE as u32 * 8)
        .filter(|&b| (content[(b / 8) as usize] ^ binary.content[(b / 8) as usize]) >> (b % 8) & 1 == 1)
        .collect();
    let exploit = match diff.as_slice() {
        [bit] => {
            let dir = if binary.content[(bit / 8) as usize] >> (bit % 8) & 1 == 1 {
                FlipDirection::OneToZero
            } else {
                FlipDirection::ZeroToOne
            };
            binary.exploit(*bit, dir).filter(|x| binary.flip_decodes_as_listed(x))
        }
        _ => None,
    };
    match exploit {
        Some(x) => {
            run.outcome.privilege = Privilege::Root;
            run.outcome.flip = Some(ExploitedFlip {
                frame,
                file_offset: x.entry.offset,
                bit: x.entry.bit,
                direction: x.direction,
                original: x.entry.original.clone(),
                flipped: x.entry.flipped.clone(),
            });
            run.phase(
                Phase::Exploitation,
                true,
                0.0,
                format!("0x{:x} bit {}: {} -> {}", x.entry.offset, x.entry.bit, x.entry.original, x.entry.flipped),
            );
        }
        None => {
            run.phase(Phase::Exploitation, false, 0.0, format!("{} bits differ from the binary", diff.len()));
            run.outcome.diagnostics.push("target page does not carry a listed flip".into());
        }
    }

    if cfg.restore {
        let pid = if run.os.process(run.attacker).is_some_and(|p| p.alive) { run.attacker } else { target.pid };
        let r = evictor.evict_target(&mut run.os, pid, page, &mut run.rng)?;
        let f = run.os.fault_in(page, Some(run.dram.memory_mut()))?;
        let restored = run.os.read_page(run.dram.memory(), f)? == binary.content;
        run.outcome.restored = Some(restored);
        run.phase(Phase::Restore, restored, r.elapsed_s, format!("page reloaded into frame {f}"));
    }
    Ok(())
}
