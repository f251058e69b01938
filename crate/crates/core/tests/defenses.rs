use rhsim_core::defenses::*;
use rhsim_core::dram::{DramGeometry, FlipDirection, FlipRecord, RowId, TechniqueTag};
use rhsim_core::hammer::HammerTechnique;
use rhsim_core::osmodel::{Allocator, FilePageId, FrameOwner, KernelUse};
use rhsim_core::rng::indexed_substream;
use proptest::prelude::*;

fn g() -> DramGeometry {
    DramGeometry::ddr4_16gib()
}

fn ds() -> HammerTechnique {
    HammerTechnique::double_sided()
}

fn ol() -> HammerTechnique {
    HammerTechnique {
        access_interval_ns: 1013,
        ..HammerTechnique::one_location()
    }
}

#[test]
fn static_scan_sees_only_plain_code() {
    assert_eq!(d1_static_scan(&ProgramDescriptor::attacker(false)).outcome, VerdictOutcome::Detected);
    assert_eq!(d1_static_scan(&ProgramDescriptor::attacker(true)).outcome, VerdictOutcome::Clean);
    assert_eq!(d1_static_scan(&ProgramDescriptor::benign()).outcome, VerdictOutcome::Clean);
}

#[test]
fn perf_counters_ignore_enclaves() {
    let t = technique_trace(&ds(), &g(), 7, false, 1, &mut indexed_substream(1, "t", 0)).unwrap();
    let v = d2_perf_counters(&t, DEFAULT_WINDOW_NS, 2_000);
    assert_eq!(v.outcome, VerdictOutcome::Detected);
    assert!(!v.evidence.is_empty());
    let hidden = t.with_enclave(7, true);
    assert_eq!(d2_perf_counters(&hidden, DEFAULT_WINDOW_NS, 2_000).outcome, VerdictOutcome::Clean);
    assert_eq!(d2_perf_counters(&AccessTrace::new(), DEFAULT_WINDOW_NS, 2_000).outcome, VerdictOutcome::Clean);
}

#[test]
fn anvil_catches_pairs_but_not_single_rows() {
    let cfg = AnvilConfig::default();
    for seed in 0..20 {
        let t = technique_trace(&ds(), &g(), 7, true, 1, &mut indexed_substream(2, "ds", seed)).unwrap();
        let v = d3_anvil(&t, &g(), &cfg);
        assert_eq!(v.outcome, VerdictOutcome::Detected);
        assert!(!v.refreshed_rows.is_empty());
        let o = technique_trace(&ol(), &g(), 7, true, 1, &mut indexed_substream(2, "ol", seed)).unwrap();
        assert!(o.window_misses(cfg.window_ns).values().all(|&m| m > cfg.miss_threshold));
        let v = d3_anvil(&o, &g(), &cfg);
        assert_eq!(v.outcome, VerdictOutcome::Clean, "{v:?}");
        assert!(!v.evidence.is_empty());
    }
}

#[test]
fn anvil_catches_single_sided_over_several_attempts() {
    let ss = HammerTechnique::single_sided(8);
    for seed in 0..20 {
        let t = technique_trace(&ss, &g(), 7, true, 8, &mut indexed_substream(3, "ss", seed)).unwrap();
        assert_eq!(d3_anvil(&t, &g(), &AnvilConfig::default()).outcome, VerdictOutcome::Detected);
    }
}

#[test]
fn anvil_ignores_sequential_scans() {
    let t = AccessTrace::sequential_scan(9, 1 << 30, 256 << 20, 300);
    assert!(t.window_misses(DEFAULT_WINDOW_NS).values().any(|&m| m > 2_000));
    assert_eq!(d3_anvil(&t, &g(), &AnvilConfig::default()).outcome, VerdictOutcome::Clean);
}

#[test]
fn out_of_order_records_are_rejected() {
    let mut t = AccessTrace::hammering(1, false, &[0], 100, 1_000, 1_000);
    let r = AccessRecord {
        time_ns: 5,
        pid: 1,
        enclave: false,
        addr: 0,
        cache: CacheOutcome::Hit,
    };
    assert!(t.push(r).is_err());
}

fn flip(frame: u64, owner: FrameOwner) -> OwnedFlip {
    OwnedFlip {
        flip: FlipRecord {
            frame,
            page_bit: 3,
            direction: FlipDirection::OneToZero,
            technique: Some(TechniqueTag::OneLocation),
            time_ns: 0,
            row: RowId { bank: 0, row: 0 },
            row_bit: 3,
        },
        owner,
    }
}

#[test]
fn catt_audit_outcomes() {
    let catt = Allocator::Catt { kernel_rows: 64, gap_rows: 2 };
    let user = [flip(9, FrameOwner::PageCache(FilePageId { file: 0, index: 0 }))];
    assert_eq!(d4_catt_audit(catt, &[], TargetClass::Kernel).outcome, VerdictOutcome::Prevented);
    let v = d4_catt_audit(catt, &user, TargetClass::User);
    assert_eq!(v.outcome, VerdictOutcome::Clean);
    assert!(v.evidence.iter().any(|e| e.contains("kernel rows")));
    let kernel = [flip(4, FrameOwner::Kernel(KernelUse::PageTable))];
    let v = d4_catt_audit(Allocator::Default, &kernel, TargetClass::Kernel);
    assert_eq!(v.outcome, VerdictOutcome::Clean);
    assert!(v.evidence.iter().any(|e| e.contains("page_table")));
}

#[test]
fn footprint_limits() {
    let total = 1u64 << 30;
    let s = |resident, usage| FootprintSample { time_s: 1.0, resident_bytes: resident, system_usage: usage };
    assert_eq!(d5_footprint(&[s(1 << 20, 0.5)], total, 0.5, 0.9).outcome, VerdictOutcome::Clean);
    assert_eq!(d5_footprint(&[s(600 << 20, 0.5)], total, 0.5, 0.9).outcome, VerdictOutcome::Detected);
    assert_eq!(d5_footprint(&[s(1 << 20, 0.95)], total, 0.5, 0.9).outcome, VerdictOutcome::Detected);
    assert_eq!(d5_footprint(&[], total, 0.5, 0.9).outcome, VerdictOutcome::Clean);
}

#[test]
fn empty_scenario_is_clean_everywhere() {
    let inputs = DefenseInputs {
        program: ProgramDescriptor::benign(),
        trace: AccessTrace::new(),
        geometry: g(),
        allocator: Allocator::Default,
        flips: Vec::new(),
        target: TargetClass::User,
        timeline: Vec::new(),
        total_bytes: 1 << 30,
        near_oom_fraction: 0.9,
        enclave: false,
        one_location: false,
        placement: Placement::None,
    };
    let r = run_defense_suite(&inputs, &DefenseConfig::default());
    assert!(r.all_clean());
    assert!(r.matrix.defeated.iter().all(|d| !d));
    let json = serde_json::to_string(&r.matrix).unwrap();
    assert!(json.contains("One-location hammering"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn two_hot_rows_in_a_bank_are_always_detected(bank in 0u32..16, row in 10u32..32_000, gap in 1u32..100, interval in 200u64..1_000) {
        let g = g();
        let addrs = [g.phys_addr(bank, row, 0), g.phys_addr(bank, row + gap, 0)];
        let t = AccessTrace::hammering(1, true, &addrs, interval, 0, DEFAULT_WINDOW_NS);
        prop_assert_eq!(d3_anvil(&t, &g, &AnvilConfig::default()).outcome, VerdictOutcome::Detected);
    }

    #[test]
    fn one_hot_row_per_bank_is_never_detected(rows in prop::collection::vec((0u32..16, 0u32..32_000), 1..8), interval in 100u64..1_000) {
        let g = g();
        let mut seen = std::collections::BTreeSet::new();
        let addrs: Vec<u64> = rows.iter().filter(|(b, _)| seen.insert(*b)).map(|&(b, r)| g.phys_addr(b, r, 0)).collect();
        let t = AccessTrace::hammering(1, false, &addrs, interval, 0, 2 * DEFAULT_WINDOW_NS);
        prop_assert_eq!(d3_anvil(&t, &g, &AnvilConfig::default()).outcome, VerdictOutcome::Clean);
    }

    #[test]
    fn enclave_flag_silences_perf_counters(n in 1usize..4, interval in 100u64..3_000) {
        let g = g();
        let addrs: Vec<u64> = (0..n as u32).map(|i| g.phys_addr(i, 100, 0)).collect();
        let t = AccessTrace::hammering(3, false, &addrs, interval, 0, DEFAULT_WINDOW_NS);
        let hidden = t.with_enclave(3, true);
        prop_assert_eq!(d2_perf_counters(&hidden, DEFAULT_WINDOW_NS, 2_000).outcome, VerdictOutcome::Clean);
    }
}
