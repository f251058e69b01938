use std::sync::OnceLock;

use proptest::prelude::*;
use rhsim_core::dram::{ControllerPolicy, DramGeometry, PagePolicy, TechniqueTag};
use rhsim_core::hammer::{calibrate, CalibrationRecord, CalibrationSetup};
use rhsim_core::orchestrator::*;
use rhsim_core::osmodel::{EpcRegion, Partition};

fn record() -> &'static CalibrationRecord {
    static R: OnceLock<CalibrationRecord> = OnceLock::new();
    R.get_or_init(|| calibrate(&CalibrationSetup::default()).unwrap())
}

fn desktop(f: f64) -> OptimizerInput<f64> {
    OptimizerInput {
        memory_bytes: 12.0 * (1u64 << 30) as f64,
        relocation_s: 2.68,
        flip_rate: f,
        exploitable: 29.0,
    }
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a / b - 1.0).abs() <= rel
}

#[test]
fn one_location_waylaying_optimum() {
    let p = optimize_n(&desktop(0.67), 1000).unwrap();
    assert_eq!(p.n, 50);
    let (t, w, total) = p.hours();
    assert!(close(t, 47.3, 0.01), "{t}");
    assert!(close(w, 90.5, 0.01), "{w}");
    assert!(close(total, 137.8, 0.01), "{total}");
    assert!((p.templating_s + p.waylaying_s - p.total_s).abs() < 1e-6);
}

#[test]
fn runtime_terms_match_hand_computation() {
    let input = desktop(0.67);
    let p = 12.0 * (1u64 << 30) as f64;
    let hand = p * (2.68 + 50.0 * 0.05) / (4096.0 * 50.0) + 50.0 * 65536.0 / (0.67 * 29.0) + 120.0 * 12.0;
    assert!(close(input.runtime(50), hand, 1e-12));
    assert!(input.runtime(1_000_000) > input.runtime(50));
}

#[test]
fn free_relocation_needs_one_flip() {
    let input = OptimizerInput {
        relocation_s: 0.0,
        ..desktop(0.67)
    };
    assert_eq!(optimize_n(&input, 500).unwrap().n, 1);
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(optimize_n(&desktop(0.0), 10).is_err());
    assert!(optimize_n(&desktop(0.67), 0).is_err());
    let nan = OptimizerInput {
        relocation_s: f64::NAN,
        ..desktop(0.67)
    };
    assert!(optimize_n(&nan, 10).is_err());
}

#[test]
fn single_precision_agrees() {
    let p32 = optimize_n(
        &OptimizerInput::<f32> {
            memory_bytes: 12.0 * (1u64 << 30) as f32,
            relocation_s: 2.68,
            flip_rate: 0.67,
            exploitable: 29.0,
        },
        1000,
    )
    .unwrap();
    assert!((p32.n as i64 - 50).abs() <= 1);
}

#[test]
fn plan_table_reproduces_all_rows() {
    let rows = plan_table(&PlanBase::default(), &default_profiles(), &[Method::Waylaying, Method::Chasing]).unwrap();
    let expected = [
        (TechniqueTag::DoubleSided, Method::Waylaying, 91, 26.1, 69.4, 95.5),
        (TechniqueTag::SingleSided, Method::Waylaying, 87, 27.5, 70.6, 98.1),
        (TechniqueTag::OneLocation, Method::Waylaying, 50, 47.3, 90.5, 137.8),
        (TechniqueTag::DoubleSided, Method::Chasing, 1, 0.7, 43.7, 44.4),
        (TechniqueTag::SingleSided, Method::Chasing, 1, 0.7, 43.7, 44.4),
        (TechniqueTag::OneLocation, Method::Chasing, 1, 1.3, 44.0, 45.4),
    ];
    assert_eq!(rows.len(), 6);
    for (row, (tech, method, n, t, w, total)) in rows.iter().zip(expected) {
        assert_eq!((row.technique, row.method), (tech, method));
        assert!((row.plan.n as i64 - n).abs() <= 1, "{row:?}");
        let (rt, rw, rtotal) = row.plan.hours();
        assert!(close(rtotal, total, 0.02), "{row:?}");
        assert!(close(rw, w, 0.02), "{row:?}");
        // Sub-hour templating values are only given to one decimal.
        assert!((rt - t).abs() <= (0.02 * t).max(0.05), "{row:?}");
    }
    let csv = plan_csv(&rows);
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.lines().nth(3).unwrap().starts_with("one_location,waylaying,50,"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scan_matches_analytic_optimum(w in 0.01f64..20.0, f in 0.1f64..10.0, e in 1.0f64..200.0, gib in 1u32..64) {
        let input = OptimizerInput {
            memory_bytes: f64::from(gib) * (1u64 << 30) as f64,
            relocation_s: w,
            flip_rate: f,
            exploitable: e,
        };
        let p = optimize_n(&input, 100_000).unwrap();
        let a = input.analytic_n().round().max(1.0);
        prop_assert!((p.n as f64 - a).abs() <= 1.0, "{} vs {}", p.n, a);
        prop_assert!(p.total_s >= 120.0 * f64::from(gib));
        // Discrete convexity around the optimum.
        prop_assert!(input.runtime(p.n + 1) >= p.total_s);
        if p.n > 1 {
            prop_assert!(input.runtime(p.n - 1) >= p.total_s);
        }
    }
}

#[test]
fn epc_adjacency_on_the_desktop() {
    let g = DramGeometry::ddr4_16gib();
    let frames = epc_adjacent_frames(&g, &EpcRegion::standard());
    assert_eq!(frames.len(), 256);
    let pct = 100.0 * frames.len() as f64 / g.total_frames() as f64;
    assert!((pct - 0.006).abs() < 0.0005, "{pct}");
    assert!(frames.iter().all(|&f| !EpcRegion::standard().contains(f)));
}

#[test]
fn desktop_destroy_halts_quickly() {
    let cfg = FleetConfig::new(3, vec![MachineSpec::desktop(record()).unwrap()]);
    let r = &run_dos(&cfg).unwrap()[0];
    assert!(r.vulnerable);
    assert_eq!(r.outcome.machine, MachineState::Halted);
    assert!(r.halt_after_s.unwrap() <= 10.0, "{r:?}");
    assert!(EpcRegion::standard().contains(r.epc_flip.unwrap().frame));
}

#[test]
fn server_is_found_vulnerable() {
    let spec = MachineSpec::server(record()).unwrap();
    assert!(spec.cells.density < record().cells.density);
    let cfg = FleetConfig {
        destroy_max_s: 5.0,
        ..FleetConfig::new(1, vec![spec])
    };
    let r = &run_dos(&cfg).unwrap()[0];
    assert!(r.vulnerable);
    assert!(r.seek_s <= 8.0 * 3600.0);
}

#[test]
fn fleet_destroy_starts_at_a_barrier() {
    let cfg = FleetConfig::new(
        1,
        vec![MachineSpec::desktop(record()).unwrap(), MachineSpec::server(record()).unwrap()],
    );
    let reports = run_dos(&cfg).unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0].outcome.machine, MachineState::Halted);
    assert!(reports[0].halt_after_s.unwrap() <= 10.0);
    assert_eq!(run_dos(&cfg).unwrap(), reports);
}

#[test]
fn halted_machine_rejects_memory_operations() {
    let spec = MachineSpec::desktop(record()).unwrap();
    let g = spec.geometry.clone();
    let rows = epc_adjacent_rows(&g, &spec.epc);
    let mut m = Machine::new(spec, 9).unwrap();
    let mut i = 0;
    while m.state() == MachineState::Running {
        let r = rows[i % rows.len()];
        m.hammer(&[g.phys_addr(r.bank, r.row, 0)]).unwrap();
        i += 1;
        assert!(i < 1000);
    }
    assert!(m.epc_flip().is_some());
    assert_eq!(m.hammer(&[0]), Err(OrchestratorError::Halted));
    assert_eq!(m.read_page(0), Err(OrchestratorError::Halted));
    assert_eq!(m.write_page(0, &[0; 4096]), Err(OrchestratorError::Halted));
    assert_eq!(m.idle(1), Err(OrchestratorError::Halted));
}

#[test]
fn empty_fleet_is_rejected() {
    assert!(run_dos(&FleetConfig::new(0, vec![])).is_err());
}

#[test]
fn sudoers_page_carries_every_listed_flip() {
    let b = TargetBinary::sudoers(5).unwrap();
    assert_eq!(b.content.len(), 4096);
    assert_eq!(b.exploits.len(), 11);
    assert!(b.exploits.iter().all(|x| b.flip_decodes_as_listed(x)));
}

#[test]
fn small_machine_fits_the_partitions() {
    let cfg = EscalationConfig::stealth(record(), 0).unwrap();
    cfg.validate().unwrap();
    let os = rhsim_core::osmodel::OsModel::boot(
        cfg.geometry.clone(),
        cfg.os.clone(),
        rhsim_core::rng::substream(0, "os"),
    )
    .unwrap();
    let user = (0..os.frames().len()).filter(|&f| os.frames().partition_of(f) == Partition::User).count();
    assert!(user > 0);
}

#[test]
fn stealth_escalation_gets_root_unseen() {
    let cfg = EscalationConfig::stealth(record(), 0).unwrap();
    let o = run_privilege_escalation(&cfg).unwrap();
    assert_eq!(o.privilege, Privilege::Root, "{:?}", o.diagnostics);
    let suite = o.defenses.as_ref().unwrap();
    assert!(suite.all_clean(), "{suite:?}");
    assert_eq!(o.restored, Some(true));
    let flip = o.flip.as_ref().unwrap();
    assert!(TargetBinary::sudoers(0).unwrap().exploits.iter().any(|x| x.entry.offset == flip.file_offset));
    for phase in [Phase::Templating, Phase::Waylaying, Phase::Hammering, Phase::Exploitation, Phase::Restore] {
        assert!(o.phase(phase).unwrap().completed, "{phase:?}");
    }
    assert_eq!(run_privilege_escalation(&cfg).unwrap(), o);
}

#[test]
fn naive_escalation_trips_every_defense() {
    let cfg = EscalationConfig::naive(record(), 0).unwrap();
    let o = run_privilege_escalation(&cfg).unwrap();
    assert!(o.defenses.as_ref().unwrap().all_fired());
    assert_eq!(o.privilege, Privilege::None);
}

#[test]
fn open_page_controller_stops_one_location() {
    let cfg = EscalationConfig {
        policy: ControllerPolicy::with_page_policy(PagePolicy::OpenPage),
        max_template_attempts: 300,
        ..EscalationConfig::stealth(record(), 0).unwrap()
    };
    let o = run_privilege_escalation(&cfg).unwrap();
    assert_eq!(o.privilege, Privilege::None);
    assert!(!o.phase(Phase::Templating).unwrap().completed);
    assert!(o.phase(Phase::Templating).unwrap().detail.contains(" 0 flips"), "{o:?}");
    assert!(!o.diagnostics.is_empty());
}

#[test]
fn user_target_without_placement_is_rejected() {
    let cfg = EscalationConfig {
        placement: rhsim_core::defenses::Placement::None,
        ..EscalationConfig::stealth(record(), 0).unwrap()
    };
    assert!(matches!(run_privilege_escalation(&cfg), Err(OrchestratorError::Config(_))));
}
