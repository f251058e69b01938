//! The thirteen acceptance criteria, one PASS/FAIL line each.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use rand::seq::index::sample;
use rhsim_cli::config::ScenarioConfig;
use rhsim_cli::{run, Command};
use rhsim_core::defenses::{d2_perf_counters, d3_anvil, technique_trace, AnvilConfig, VerdictOutcome, DEFAULT_WINDOW_NS};
use rhsim_core::dram::{ControllerPolicy, DramGeometry, DramState, PagePolicy, RefreshMode};
use rhsim_core::hammer::{
    calibrate, same_bank_probability, simulate_same_bank, template_memory, AddressKnowledge, AddressPool,
    CalibrationRecord, CalibrationSetup, HammerTechnique, TechniqueKind, TemplateBudget,
};
use rhsim_core::memory::{Fill, PhysMemory};
use rhsim_core::opflip::{enumerate_flips, load_flip_database, normalize_asm, verify_database, SUDOERS_FIXTURE};
use rhsim_core::oracle::OracleConfig;
use rhsim_core::orchestrator::*;
use rhsim_core::osmodel::{EpcRegion, FileContent, FilePageId, FrameOwner, OsConfig, OsModel};
use rhsim_core::rng::{indexed_substream, substream};
use rhsim_core::waylay::{
    exhaustion_evict, expected_unique_frames, relocate, spawn_attacker, waylay_until, EvictionConfig, Evictor,
    DEFAULT_FOOTPRINT_BOUND,
};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a / b - 1.0).abs() <= rel
}

fn c1_optimizer() -> Check {
    let input = OptimizerInput {
        memory_bytes: 12.0 * (1u64 << 30) as f64,
        relocation_s: 2.68,
        flip_rate: 0.67,
        exploitable: 29.0,
    };
    let p = optimize_n(&input, 100_000).map_err(|e| e.to_string())?;
    let (t, w, total) = p.hours();
    ensure(
        p.n == 50 && close(t, 47.3, 0.01) && close(w, 90.5, 0.01) && close(total, 137.8, 0.01),
        format!("n={} templating {t:.1} h, waylaying {w:.1} h, total {total:.1} h", p.n),
    )
}

fn c2_plan_table() -> Check {
    let rows = plan_table(&PlanBase::default(), &default_profiles(), &[Method::Waylaying, Method::Chasing])
        .map_err(|e| e.to_string())?;
    let expected = [
        (26.1, 69.4, 95.5),
        (27.5, 70.6, 98.1),
        (47.3, 90.5, 137.8),
        (0.7, 43.7, 44.4),
        (0.7, 43.7, 44.4),
        (1.3, 44.0, 45.4),
    ];
    let mut worst: f64 = 0.0;
    let mut ok = rows.len() == 6;
    for (row, (t, w, total)) in rows.iter().zip(expected) {
        let (rt, rw, rtotal) = row.plan.hours();
        // Values below one hour are printed with one decimal only.
        ok &= (rt - t).abs() <= (0.02 * t).max(0.05) && close(rw, w, 0.02) && close(rtotal, total, 0.02);
        worst = worst.max((rtotal / total - 1.0).abs()).max((rw / w - 1.0).abs());
    }
    ensure(ok, format!("6 rows, worst relative deviation {:.2} %", 100.0 * worst))
}

fn c3_same_bank() -> Check {
    let closed = same_bank_probability::<f64>(8, 32);
    let g = DramGeometry::ddr3_8gib();
    let mc = simulate_same_bank(8, &g, 1_000_000, &mut substream(3, "acceptance/same-bank")).map_err(|e| e.to_string())?;
    ensure(
        g.banks_total == 32 && (closed - 0.6143).abs() <= 0.0005 && (mc - closed).abs() <= 0.001,
        format!("closed form {closed:.4}, Monte Carlo {mc:.4} over 10^6 draws"),
    )
}

fn c4_je_case_study() -> Check {
    let flips = enumerate_flips(&[0x74, 0x10], 0).map_err(|e| e.to_string())?;
    let got: BTreeSet<(u8, String)> =
        flips.iter().filter(|f| f.byte_index == 0).map(|f| (f.flipped_bytes[0], f.label())).collect();
    let want: BTreeSet<(u8, String)> = [
        (0x75, "jne"),
        (0x76, "jbe"),
        (0x70, "jo"),
        (0x7c, "jl"),
        (0x54, "push"),
        (0x34, "xor"),
        (0xf4, "hlt"),
        (0x64, "prefix 64"),
    ]
    .into_iter()
    .map(|(b, s)| (b, s.to_string()))
    .collect();
    ensure(got == want, format!("{got:?}"))
}

fn c5_database() -> Check {
    let db = load_flip_database(SUDOERS_FIXTURE).map_err(|e| e.to_string())?;
    let report = verify_database(&db);
    let decoded = |off: u64, bit: u8| {
        report
            .checks
            .iter()
            .find(|c| c.offset == off && c.bit == bit)
            .map(|c| normalize_asm(&c.decoded))
            .unwrap_or_default()
    };
    let named = [
        (0x8d5d, 7, "add eax, 0x485775c0"),
        (0x8dbd, 3, "mov eax, es"),
        (0x8dbd, 7, "add al, 0xc0"),
        (0x8dd0, 2, "or eax, [rbp+"),
        (0x8dd1, 0, "je "),
    ];
    let named_ok = named.iter().all(|(o, b, text)| decoded(*o, *b).starts_with(text));
    ensure(
        report.all_matched() && report.checks.len() == 11 && named_ok,
        format!("{} of {} reconstructible entries match", report.matched(), report.checks.len()),
    )
}

fn c6_calibration(record: &CalibrationRecord, setup: &CalibrationSetup) -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    for tc in &record.techniques {
        let mut dram = DramState::new(
            setup.geometry.clone(),
            setup.policy.clone(),
            record.cells.clone(),
            PhysMemory::new(Fill::Random { seed: 21 }),
            substream(21, "acceptance/para"),
        )
        .map_err(|e| e.to_string())?;
        let report = template_memory(
            &mut dram,
            &tc.technique,
            &AddressPool::whole(),
            AddressKnowledge::Full,
            TemplateBudget::Attempts(setup.attempts),
            &mut substream(21, "acceptance/template"),
        )
        .map_err(|e| e.to_string())?;
        let (_, p) = report.uniformity();
        let f = report.flippable_fraction();
        let up = report.zero_to_one_fraction();
        ok &= (f - tc.target.flippable_fraction).abs() <= 0.03 && (0.516 - 0.03..=0.541 + 0.03).contains(&up) && p > 0.01;
        lines.push(format!("{} {:.1}%/{:.1}% p={p:.2}", tc.technique.tag().label(), 100.0 * f, 100.0 * up));
    }
    ensure(ok, lines.join(", "))
}

/// Attempts in about one minute of single-sided templating.
const SS_SESSION_ATTEMPTS: u32 = 24;

fn c7_detectors(record: &CalibrationRecord) -> Check {
    let g = DramGeometry::ddr4_16gib();
    let cfg = AnvilConfig::default();
    let t = |k| *record.technique(k).unwrap();
    let (ds, ss, ol) = (t(TechniqueKind::DoubleSided), t(TechniqueKind::SingleSided { k: 8 }), t(TechniqueKind::OneLocation));
    let mut counts = [0u32; 5];
    let runs = 100;
    for seed in 0..runs {
        let trace = |tech: &HammerTechnique, attempts, label| {
            technique_trace(tech, &g, 7, false, attempts, &mut indexed_substream(7, label, seed)).unwrap()
        };
        let (tds, tss, tol) = (trace(&ds, 1, "ds"), trace(&ss, SS_SESSION_ATTEMPTS, "ss"), trace(&ol, 1, "ol"));
        let d3 = |tr| d3_anvil(tr, &g, &cfg).outcome == VerdictOutcome::Detected;
        let d2 = |tr| d2_perf_counters(tr, DEFAULT_WINDOW_NS, 2_000).outcome == VerdictOutcome::Detected;
        counts[0] += u32::from(d3(&tds) && d3(&tss));
        counts[1] += u32::from(d3(&tol));
        counts[2] += u32::from(d2(&tds) && d2(&tss) && d2(&tol));
        let hidden = [tds.with_enclave(7, true), tss.with_enclave(7, true), tol.with_enclave(7, true)];
        counts[3] += u32::from(hidden.iter().any(d2));
        counts[4] += 1;
    }
    ensure(
        counts[0] == runs as u32 && counts[1] == 0 && counts[2] == runs as u32 && counts[3] == 0,
        format!(
            "anvil: {}/{runs} pair traces, {}/{runs} one-location; counters: {}/{runs} plain, {}/{runs} enclave",
            counts[0], counts[1], counts[2], counts[3]
        ),
    )
}

fn tiny_machine(seed: u64) -> (OsModel, FilePageId) {
    let g = DramGeometry::small(8, 256);
    let frames = g.total_frames();
    let mut os = OsModel::boot(g, OsConfig::small(frames), substream(seed, "acceptance/os")).unwrap();
    let bin = os.register_file("victim-binary", 1, true, FileContent::Synthetic);
    let page = FilePageId { file: bin, index: 0 };
    os.fault_in(page, None).unwrap();
    (os, page)
}

fn c8_footprint() -> Check {
    let (mut base, page) = tiny_machine(8);
    let evictor = Evictor::new(&mut base, EvictionConfig::linux());
    let target = spawn_attacker(&mut base, page, true, &evictor.config).unwrap();
    let cycling: Vec<u64> = (0..base.frames().len())
        .filter(|&f| matches!(base.frames().owner(f), FrameOwner::Free | FrameOwner::PageCache(_)))
        .collect();
    let oracle = OracleConfig {
        tp_probability: 1.0,
        ..OracleConfig::fast()
    };
    let mut bounded = 0;
    let mut oom = 0;
    for seed in 0..100 {
        let mut rng = indexed_substream(8, "acceptance/waylay", seed);
        let targets: BTreeSet<u64> = sample(&mut rng, cycling.len(), cycling.len() / 10).iter().map(|i| cycling[i]).collect();
        let mut os = base.clone();
        let mut ev = evictor.clone();
        let r = waylay_until(&mut os, &mut ev, &oracle, target, &targets, 100_000, None, &mut rng).unwrap();
        bounded += u32::from(r.success && r.peak_resident_bytes < DEFAULT_FOOTPRINT_BOUND);
        oom += u32::from(r.oom_killed);
    }
    let pid = base.spawn(false);
    let runs = 10_000u64;
    let (mut near, mut killed) = (0u64, 0u64);
    for seed in 0..runs {
        let mut os = base.clone();
        let mut rng = indexed_substream(8, "acceptance/exhaust", seed);
        let r = exhaustion_evict(&mut os, pid, page, &evictor.config, &mut rng).unwrap();
        near += u64::from(r.peak_system_usage > 0.9);
        killed += u64::from(r.killed);
    }
    let kill_pct = 100.0 * killed as f64 / runs as f64;
    ensure(
        bounded == 100 && oom == 0 && near == runs && (kill_pct - 0.78).abs() <= 0.3,
        format!("waylaying bounded {bounded}/100, oom {oom}; exhaustion >90% {near}/{runs}, killed {kill_pct:.2}%"),
    )
}

fn c9_relocation() -> Check {
    let mut parts = Vec::new();
    let mut ok = true;
    for m in [10_000u64, 100_000, 1_000_000] {
        let cfg = OsConfig {
            frames: m,
            kernel_frames: 0,
            page_table_frames: 0,
            background_frames: 0,
            free_reserve: 0,
            cached_data_pages: 0,
            cached_exec_pages: 0,
            ..OsConfig::desktop_12gib()
        };
        let mut os = OsModel::boot(DramGeometry::ddr3_8gib(), cfg, substream(m, "acceptance/os")).map_err(|e| e.to_string())?;
        let bin = os.register_file("bin", 1, true, FileContent::Synthetic);
        let unique = relocate(&mut os, FilePageId { file: bin, index: 0 }, 57_000).map_err(|e| e.to_string())? as f64;
        let expected = expected_unique_frames(m as f64, 57_000.0);
        ok &= close(unique, expected, 0.02);
        parts.push(format!("M={m}: {unique} vs {expected:.0}"));
    }
    ensure(ok, parts.join(", "))
}

fn c10_escalation(record: &CalibrationRecord) -> Check {
    let stealth = run_privilege_escalation(&EscalationConfig::stealth(record, 0).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let naive = run_privilege_escalation(&EscalationConfig::naive(record, 0).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let clean = stealth.defenses.as_ref().is_some_and(|d| d.all_clean());
    let fired = naive.defenses.as_ref().is_some_and(|d| d.all_fired());
    ensure(
        stealth.privilege == Privilege::Root && clean && fired,
        format!(
            "stealth privilege {:?}, verdicts clean {clean}; naive verdicts all fired {fired}",
            stealth.privilege
        ),
    )
}

fn c11_dos(record: &CalibrationRecord) -> Check {
    let g = DramGeometry::ddr4_16gib();
    let adjacent = epc_adjacent_frames(&g, &EpcRegion::standard()).len();
    let pct = 100.0 * adjacent as f64 / g.total_frames() as f64;
    let spec = MachineSpec::desktop(record).map_err(|e| e.to_string())?;
    let r = run_dos(&FleetConfig::new(11, vec![spec])).map_err(|e| e.to_string())?.remove(0);
    let halt = r.halt_after_s.unwrap_or(f64::INFINITY);
    ensure(
        r.vulnerable && r.outcome.machine == MachineState::Halted && halt <= 10.0 && adjacent == 256 && (pct - 0.006).abs() < 0.0005,
        format!("halted after {halt:.2} s; {adjacent} EPC-adjacent pages ({pct:.4} %)"),
    )
}

fn c12_mitigations(record: &CalibrationRecord) -> Check {
    let flips = |geometry: DramGeometry, policy: ControllerPolicy, kind: TechniqueKind, seed: u64| {
        let mut dram = DramState::new(
            geometry,
            policy,
            record.cells.clone(),
            PhysMemory::new(Fill::Random { seed }),
            substream(seed, "acceptance/para"),
        )
        .unwrap();
        let knowledge = if kind == TechniqueKind::DoubleSided { AddressKnowledge::Full } else { AddressKnowledge::None };
        template_memory(
            &mut dram,
            record.technique(kind).unwrap(),
            &AddressPool::whole(),
            knowledge,
            TemplateBudget::Attempts(150),
            &mut substream(seed, "acceptance/mitigation"),
        )
        .unwrap()
        .flips
        .len()
    };
    let g = DramGeometry::ddr4_16gib();
    let double = DramGeometry {
        refresh_mode: RefreshMode::Double,
        ..g.clone()
    };
    let para = ControllerPolicy {
        para: Some(0.01),
        ..ControllerPolicy::default()
    };
    let closed = ControllerPolicy::with_page_policy(PagePolicy::ClosedPage);
    let open = ControllerPolicy::with_page_policy(PagePolicy::OpenPage);
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in [1u64, 2] {
        let (n, d) = (
            flips(g.clone(), ControllerPolicy::default(), TechniqueKind::DoubleSided, seed),
            flips(double.clone(), ControllerPolicy::default(), TechniqueKind::DoubleSided, seed),
        );
        let p = flips(g.clone(), para.clone(), TechniqueKind::DoubleSided, seed);
        let (c, o) = (
            flips(g.clone(), closed.clone(), TechniqueKind::OneLocation, seed),
            flips(g.clone(), open.clone(), TechniqueKind::OneLocation, seed),
        );
        ok &= d <= n && p < n && c > 0 && o as f64 <= 0.01 * c as f64;
        parts.push(format!("seed {seed}: normal {n} double {d} para {p}; one-location closed {c} open {o}"));
    }
    ensure(ok, parts.join("; "))
}

fn c13_determinism(record_path: &std::path::Path) -> Check {
    let mut cfg = ScenarioConfig::default();
    cfg.calibration.record = Some(record_path.to_path_buf());
    cfg.waylay.runs = 3;
    cfg.template.attempts = 100;
    let mut identical = Vec::new();
    for cmd in [Command::Template, Command::Waylay, Command::Escalate, Command::Dos, Command::Optimize, Command::OpflipScan] {
        let a = run(cmd, &cfg).map_err(|e| e.to_string())?.bundle;
        let b = run(cmd, &cfg).map_err(|e| e.to_string())?.bundle;
        if a != b {
            return Err(format!("{cmd:?} bundles differ"));
        }
        identical.push(format!("{cmd:?}"));
    }
    Ok(format!("byte-identical bundles for {}", identical.join(", ")))
}

#[test]
fn acceptance_criteria() {
    let setup = CalibrationSetup::default();
    let record = calibrate(&setup).expect("calibration");
    let dir = tempfile::tempdir().unwrap();
    let record_path = dir.path().join("record.json");
    std::fs::write(&record_path, serde_json::to_string(&record).unwrap()).unwrap();

    let criteria: Vec<(&str, Box<dyn Fn() -> Check>)> = vec![
        ("optimizer optimum and phase split", Box::new(c1_optimizer)),
        ("plan table, six rows within 2 %", Box::new(c2_plan_table)),
        ("same-bank probability", Box::new(c3_same_bank)),
        ("JE opcode flip set", Box::new(c4_je_case_study)),
        ("flip database verification", Box::new(c5_database)),
        ("calibration fidelity", Box::new(|| c6_calibration(&record, &setup))),
        ("detector dichotomy", Box::new(|| c7_detectors(&record))),
        ("footprint property", Box::new(c8_footprint)),
        ("relocation statistics", Box::new(c9_relocation)),
        ("end-to-end escalation", Box::new(|| c10_escalation(&record))),
        ("denial of service", Box::new(|| c11_dos(&record))),
        ("mitigation monotonicity", Box::new(|| c12_mitigations(&record))),
        ("determinism", Box::new(|| c13_determinism(&record_path))),
    ];
    let mut failed = Vec::new();
    let mut out = std::io::stdout();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (verdict, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed.push(i + 1);
                ("FAIL", d)
            }
        };
        let line = format!(
            "criterion {:>2} {verdict}: {name} ({detail}) [{:.1} s]\n",
            i + 1,
            start.elapsed().as_secs_f64()
        );
        out.write_all(line.as_bytes()).unwrap();
        out.flush().unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
