use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rhsim_core::dram::{DramState, RowId};
use rhsim_core::hammer::{
    calibrate, flip_rate_from_minutes, template_memory, AddressKnowledge, AddressPool, CalibrationRecord,
    TechniqueKind, TemplateBudget,
};
use rhsim_core::memory::{Fill, PhysMemory};
use rhsim_core::opflip::{load_flip_database, scan_binary, verify_database, SUDOERS_FIXTURE};
use rhsim_core::orchestrator::{
    plan_csv, plan_table, run_dos, run_privilege_escalation, EscalationConfig, FleetConfig, MachineSpec,
    MachineState, OrchestratorError, PlanBase, Privilege, TargetBinary, TARGET_PAGE_OFFSET,
};
use rhsim_core::osmodel::{FileContent, FilePageId, FrameOwner, OsModel, Partition};
use rhsim_core::rng::{indexed_substream, mix64, substream};
use rhsim_core::waylay::{
    exhaustion_evict, expected_unique_frames, spawn_attacker, waylay_until, EvictionConfig, Evictor,
};
use rhsim_core::dram::TechniqueTag;
use rhsim_core::orchestrator::TechniqueProfile;
use serde::Serialize;

use crate::config::ScenarioConfig;
use crate::report::{self, ReportBundle};
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Template,
    Waylay,
    Escalate,
    Dos,
    Optimize,
    OpflipScan,
    Calibrate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Success,
    /// The pipeline ran but the attack did not succeed within its caps.
    AttackFailed,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Success => 0,
            Status::AttackFailed => 2,
        }
    }
}

#[derive(Debug)]
pub struct Outcome {
    pub bundle: ReportBundle,
    pub status: Status,
}

fn sim<E: Into<OrchestratorError>>(e: E) -> CliError {
    CliError::Simulation(e.into())
}

/// Runs `command`; the bundle always carries the resolved config.
pub fn run(command: Command, cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
    cfg.validate()?;
    let mut bundle = ReportBundle::default();
    bundle.add(report::CONFIG, cfg.to_toml());
    let status = match command {
        Command::Template => template(cfg, &mut bundle)?,
        Command::Waylay => waylay(cfg, &mut bundle)?,
        Command::Escalate => escalate(cfg, &mut bundle)?,
        Command::Dos => dos(cfg, &mut bundle)?,
        Command::Optimize => optimize(cfg, &mut bundle)?,
        Command::OpflipScan => opflip_scan(cfg, &mut bundle)?,
        Command::Calibrate => {
            let record = run_calibration(cfg)?;
            bundle.add_json(report::OUTCOME, &record);
            Status::Success
        }
    };
    Ok(Outcome { bundle, status })
}

fn run_calibration(cfg: &ScenarioConfig) -> Result<CalibrationRecord, CliError> {
    calibrate(&cfg.calibration_setup()).map_err(|f| CliError::Calibration(format!("{} (residual {})", f.reason, f.residual)))
}

/// The configured record, or a fresh calibration, with the density override
/// applied.
pub fn calibration(cfg: &ScenarioConfig) -> Result<CalibrationRecord, CliError> {
    let mut record = match &cfg.calibration.record {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("calibration.record {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("calibration.record {}: {e}", path.display())))?
        }
        None => run_calibration(cfg)?,
    };
    if let Some(d) = cfg.calibration.density_override {
        record.cells.density = d;
    }
    Ok(record)
}

fn technique(record: &CalibrationRecord, kind: TechniqueKind) -> Result<rhsim_core::hammer::HammerTechnique, CliError> {
    record
        .technique(kind)
        .copied()
        .ok_or_else(|| CliError::Calibration(format!("record lacks {kind:?}")))
}

fn template(cfg: &ScenarioConfig, bundle: &mut ReportBundle) -> Result<Status, CliError> {
    let record = calibration(cfg)?;
    let kind = cfg.template.technique.kind();
    let t = technique(&record, kind)?;
    let memory = PhysMemory::new(Fill::Random { seed: mix64(cfg.seed) });
    let mut dram = DramState::new(
        cfg.dram.geometry(),
        cfg.dram.policy(),
        record.cells.clone(),
        memory,
        substream(cfg.seed, "template/para"),
    )
    .map_err(sim)?;
    let knowledge = if kind == TechniqueKind::DoubleSided { AddressKnowledge::Full } else { AddressKnowledge::None };
    let report = template_memory(
        &mut dram,
        &t,
        &AddressPool::whole(),
        knowledge,
        TemplateBudget::Attempts(cfg.template.attempts),
        &mut substream(cfg.seed, "template/attack"),
    )
    .map_err(sim)?;
    bundle.add(report::FLIP_HISTOGRAM, report.histogram_csv());
    bundle.add_json(report::OUTCOME, &report.summary());
    Ok(Status::Success)
}

#[derive(Serialize)]
struct WaylaySummary {
    runs: u64,
    cycling_frames: usize,
    target_frames: usize,
    waylay_successes: u64,
    mean_iterations: f64,
    max_peak_resident_bytes: u64,
    waylay_oom_kills: u64,
    exhaustion_kills: u64,
    min_exhaustion_peak_usage: f64,
    placements: u64,
    unique_frames: usize,
    expected_unique_frames: f64,
}

/// 5 % bins of peak system usage.
fn usage_bin(u: f64) -> usize {
    ((u * 100.0 / 5.0).floor() as usize).min(19)
}

fn waylay(cfg: &ScenarioConfig, bundle: &mut ReportBundle) -> Result<Status, CliError> {
    let (geometry, os_cfg) = EscalationConfig::small_machine(cfg.attack.allocator());
    let mut base = OsModel::boot(geometry.clone(), os_cfg, substream(cfg.seed, "waylay/os")).map_err(sim)?;
    let file = base.register_file("victim-binary", 1, true, FileContent::Synthetic);
    let page = FilePageId { file, index: 0 };
    base.fault_in(page, None).map_err(sim)?;
    let evictor = Evictor::new(&mut base, EvictionConfig::linux());
    let target = spawn_attacker(&mut base, page, cfg.attack.enclave, &evictor.config).map_err(sim)?;
    let cycling: Vec<u64> = (0..base.frames().len())
        .filter(|&f| {
            base.frames().partition_of(f) == Partition::User
                && matches!(base.frames().owner(f), FrameOwner::Free | FrameOwner::PageCache(_))
        })
        .collect();
    let t = ((cycling.len() as f64 * cfg.waylay.target_fraction).ceil() as usize).clamp(1, cycling.len());
    let oracle = cfg.attack.oracle();

    let mut s = WaylaySummary {
        runs: cfg.waylay.runs,
        cycling_frames: cycling.len(),
        target_frames: t,
        waylay_successes: 0,
        mean_iterations: 0.0,
        max_peak_resident_bytes: 0,
        waylay_oom_kills: 0,
        exhaustion_kills: 0,
        min_exhaustion_peak_usage: 1.0,
        placements: 0,
        unique_frames: 0,
        expected_unique_frames: 0.0,
    };
    let mut bins = [[0u64; 2]; 20];
    let mut counts = vec![0u64; (geometry.banks_total * geometry.rows_per_bank) as usize];
    let mut frames = BTreeSet::new();
    for run in 0..cfg.waylay.runs {
        let mut rng = indexed_substream(cfg.seed, "waylay/run", run);
        let mut os = base.clone();
        os.age_exec_uniformly(page, &mut rng).map_err(sim)?;
        let targets: BTreeSet<u64> = sample(&mut rng, cycling.len(), t).iter().map(|i| cycling[i]).collect();
        let mut ev = evictor.clone();
        let r = waylay_until(&mut os, &mut ev, &oracle, target, &targets, cfg.waylay.max_iterations, None, &mut rng)
            .map_err(sim)?;
        s.waylay_successes += u64::from(r.success);
        for step in &r.steps {
            frames.insert(step.frame);
            let RowId { bank, row } = geometry.frame_row(step.frame);
            counts[(bank * geometry.rows_per_bank + row) as usize] += 1;
        }
        s.placements += r.steps.len() as u64;
        s.mean_iterations += r.iterations as f64 / cfg.waylay.runs as f64;
        s.max_peak_resident_bytes = s.max_peak_resident_bytes.max(r.peak_resident_bytes);
        s.waylay_oom_kills += u64::from(r.oom_killed);
        let peak = os.system_usage().max((base.system_usage() * base.total_bytes() as f64 + r.peak_resident_bytes as f64) / base.total_bytes() as f64);
        bins[usage_bin(peak)][0] += 1;

        let mut os = base.clone();
        os.age_exec_uniformly(page, &mut rng).map_err(sim)?;
        let e = exhaustion_evict(&mut os, target.pid, page, &evictor.config, &mut rng).map_err(sim)?;
        s.exhaustion_kills += u64::from(e.killed);
        s.min_exhaustion_peak_usage = s.min_exhaustion_peak_usage.min(e.peak_system_usage);
        bins[usage_bin(e.peak_system_usage)][1] += 1;
    }
    let mut usage = String::from("usage_bin_pct,waylaying_runs,exhaustion_runs\n");
    for (i, b) in bins.iter().enumerate() {
        writeln!(usage, "{},{},{}", i * 5, b[0], b[1]).unwrap();
    }
    bundle.add(report::MEMORY_USAGE, usage);

    let mut heat = String::from("bank,row,placements\n");
    for bank in 0..geometry.banks_total {
        for row in 0..geometry.rows_per_bank {
            writeln!(heat, "{bank},{row},{}", counts[(bank * geometry.rows_per_bank + row) as usize]).unwrap();
        }
    }
    bundle.add(report::RELOCATION_HEATMAP, heat);
    s.unique_frames = frames.len();
    s.expected_unique_frames = expected_unique_frames(cycling.len() as f64, s.placements as f64);
    let ok = s.waylay_successes == s.runs;
    bundle.add_json(report::OUTCOME, &s);
    Ok(if ok { Status::Success } else { Status::AttackFailed })
}

/// Escalation scenario from the `[attack]`, `[dram]` and `[defenses]`
/// sections.
pub fn escalation_config(cfg: &ScenarioConfig, record: &CalibrationRecord) -> Result<EscalationConfig, CliError> {
    let a = &cfg.attack;
    let (mut geometry, os) = EscalationConfig::small_machine(a.allocator());
    geometry.refresh_mode = cfg.dram.refresh_mode();
    Ok(EscalationConfig {
        seed: cfg.seed,
        geometry,
        policy: cfg.dram.policy(),
        cells: record.cells.clone(),
        os,
        technique: technique(record, a.technique.kind())?,
        enclave: a.enclave,
        placement: a.placement.placement(),
        target: a.target(),
        oracle: a.oracle(),
        defenses: cfg.defenses.config(),
        target_frames: a.target_frames,
        max_template_attempts: a.max_template_attempts,
        max_placement_iterations: a.max_placement_iterations,
        restore: a.restore,
        trace_attempts: cfg.defenses.trace_attempts,
    })
}

fn escalate(cfg: &ScenarioConfig, bundle: &mut ReportBundle) -> Result<Status, CliError> {
    let record = calibration(cfg)?;
    let outcome = run_privilege_escalation(&escalation_config(cfg, &record)?)?;
    if let Some(d) = &outcome.defenses {
        bundle.add_json(report::DEFENSES, d);
    }
    bundle.add_json(report::OUTCOME, &outcome);
    Ok(if outcome.privilege == Privilege::Root { Status::Success } else { Status::AttackFailed })
}

fn dos(cfg: &ScenarioConfig, bundle: &mut ReportBundle) -> Result<Status, CliError> {
    let record = calibration(cfg)?;
    let machines = cfg
        .machines()
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            MachineSpec::for_profile(p, &record).map(|m| MachineSpec {
                name: format!("{}-{i}", m.name),
                ..m
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let fleet = FleetConfig {
        seek_max_s: cfg.dos.seek_max_s,
        destroy_max_s: cfg.dos.destroy_max_s,
        ..FleetConfig::new(cfg.seed, machines)
    };
    let reports = run_dos(&fleet)?;
    let halted = reports.iter().any(|r| r.outcome.machine == MachineState::Halted);
    bundle.add_json(report::OUTCOME, &reports);
    Ok(if halted { Status::Success } else { Status::AttackFailed })
}

fn optimize(cfg: &ScenarioConfig, bundle: &mut ReportBundle) -> Result<Status, CliError> {
    let o = &cfg.optimize;
    let base = PlanBase {
        memory_bytes: o.memory_gib * (1u64 << 30) as f64,
        waylay_relocation_s: o.relocation_s,
        exploitable: o.exploitable,
        search_bound: o.search_bound,
    };
    let profiles: Vec<TechniqueProfile> = [TechniqueTag::DoubleSided, TechniqueTag::SingleSided, TechniqueTag::OneLocation]
        .into_iter()
        .zip(o.minutes)
        .map(|(technique, m)| TechniqueProfile {
            technique,
            flip_rate: flip_rate_from_minutes(m, o.exploitable),
        })
        .collect();
    let rows = plan_table(&base, &profiles, &o.methods)?;
    bundle.add(report::PLAN_TABLE, plan_csv(&rows));
    bundle.add_json(report::OUTCOME, &rows);
    Ok(Status::Success)
}

#[derive(Serialize)]
struct ScanSummary {
    binary: String,
    verification: Option<rhsim_core::opflip::VerificationReport>,
    candidates: usize,
    notes: Vec<String>,
}

fn opflip_scan(cfg: &ScenarioConfig, bundle: &mut ReportBundle) -> Result<Status, CliError> {
    let (name, image, ranges, verification) = match &cfg.opflip.binary {
        Some(path) => {
            let image = std::fs::read(path).map_err(|e| CliError::Config(format!("opflip.binary {}: {e}", path.display())))?;
            let start = cfg.opflip.start.unwrap_or(0);
            let end = cfg.opflip.end.unwrap_or(image.len());
            let name = path.file_name().map_or_else(|| "binary".into(), |n| n.to_string_lossy().into_owned());
            (name, image, vec![start..end], None)
        }
        None => {
            let db = load_flip_database(SUDOERS_FIXTURE).map_err(sim)?;
            let page = TargetBinary::from_database(&db, TARGET_PAGE_OFFSET, cfg.seed)?;
            // Scan the reconstructed instructions only; the rest of the page
            // is filler.
            let spans: BTreeSet<(usize, usize)> = db
                .iter()
                .filter_map(|e| {
                    let raw = e.raw.as_ref()?;
                    let start = (e.offset - raw.flipped_index as u64) as usize;
                    Some((start, start + raw.bytes.len()))
                })
                .collect();
            let mut ranges: Vec<std::ops::Range<usize>> = Vec::new();
            for (start, end) in spans {
                match ranges.last_mut() {
                    Some(last) if start <= last.end => last.end = last.end.max(end),
                    _ => ranges.push(start..end),
                }
            }
            // Page offsets are reported as file offsets below.
            let mut image = vec![0u8; TARGET_PAGE_OFFSET as usize];
            image.extend_from_slice(&page.content);
            (page.name, image, ranges, Some(verify_database(&db)))
        }
    };
    let scan = scan_binary(&image, &ranges).map_err(sim)?;
    let mut tsv = String::from("#binary\toffset\tbit\traw\toriginal\tflipped\texploitable\n");
    for c in &scan.candidates {
        tsv.push_str(&c.to_entry(&name).to_tsv());
        tsv.push('\n');
    }
    bundle.add(report::FLIP_CANDIDATES, tsv);
    let ok = verification.as_ref().is_none_or(|v| v.all_matched());
    bundle.add_json(
        report::OUTCOME,
        &ScanSummary {
            binary: name,
            verification,
            candidates: scan.candidates.len(),
            notes: scan.notes,
        },
    );
    Ok(if ok { Status::Success } else { Status::AttackFailed })
}
