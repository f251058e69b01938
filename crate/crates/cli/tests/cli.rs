use std::path::PathBuf;
use std::process::Command as Process;
use std::sync::OnceLock;

use rhsim_cli::config::{PagePolicyChoice, ScenarioConfig, TechniqueChoice};
use rhsim_cli::report::{self, ReportBundle};
use rhsim_cli::{run, Command, Status};
use rhsim_core::opflip::load_flip_database;

/// One calibration shared by every test, stored where configs can point at
/// it.
fn record_path() -> PathBuf {
    static P: OnceLock<PathBuf> = OnceLock::new();
    P.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let out = run(Command::Calibrate, &ScenarioConfig::default()).unwrap();
        let path = dir.join("record.json");
        std::fs::write(&path, out.bundle.get(report::OUTCOME).unwrap()).unwrap();
        path
    })
    .clone()
}

fn calibrated() -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default();
    cfg.calibration.record = Some(record_path());
    cfg
}

#[test]
fn empty_file_resolves_to_defaults() {
    assert_eq!(ScenarioConfig::parse("").unwrap(), ScenarioConfig::default());
    let echo = ScenarioConfig::default().to_toml();
    assert!(echo.contains("[attack]") && echo.contains("seed = 1"));
}

#[test]
fn resolved_config_round_trips() {
    let text = "seed = 9\nfleet = [\"desktop\", \"server\"]\n[dram]\npage_policy = \"open\"\npara = 0.25\n[template]\ntechnique = \"double_sided\"\n[opflip]\nstart = 4\nend = 8\n";
    let cfg = ScenarioConfig::parse(text).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.dram.page_policy, PagePolicyChoice::Open);
    assert_eq!(cfg.template.technique, TechniqueChoice::DoubleSided);
    assert_eq!(ScenarioConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    let d = ScenarioConfig::default();
    assert_eq!(ScenarioConfig::parse(&d.to_toml()).unwrap(), d);
}

#[test]
fn invalid_values_name_the_key() {
    let e = ScenarioConfig::parse("[dram]\npara = 1.5\n").unwrap_err().to_string();
    assert!(e.contains("dram.para") && e.contains("probability ∈ [0,1]"), "{e}");
    let e = ScenarioConfig::parse("[dram]\nwidth = 3\n").unwrap_err().to_string();
    assert!(e.contains("width"), "{e}");
    let e = ScenarioConfig::parse("[attack]\ntarget_frames = 0\n").unwrap_err().to_string();
    assert!(e.contains("attack.target_frames"), "{e}");
    assert!(ScenarioConfig::parse("[attack]\nplacement = \"none\"\n").is_err());
    assert!(ScenarioConfig::parse("[opflip]\nstart = 8\nend = 8\n").is_err());
    assert!(ScenarioConfig::parse("seed = -1\n").is_err());
}

#[test]
fn optimize_emits_the_plan_table() {
    let out = run(Command::Optimize, &ScenarioConfig::default()).unwrap();
    assert_eq!(out.status, Status::Success);
    let csv = out.bundle.get(report::PLAN_TABLE).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.lines().any(|l| l.starts_with("one_location,waylaying,50,")));
    assert!(out.bundle.get(report::CONFIG).is_some());
}

#[test]
fn zero_density_template_is_empty() {
    let mut cfg = calibrated();
    cfg.calibration.density_override = Some(0.0);
    cfg.template.attempts = 50;
    let out = run(Command::Template, &cfg).unwrap();
    assert_eq!(out.status, Status::Success);
    assert_eq!(out.bundle.get(report::FLIP_HISTOGRAM).unwrap(), "offset,direction,count\n");
    assert!(out.bundle.get(report::OUTCOME).unwrap().contains("\"flips\": 0"));
}

#[test]
fn template_histogram_counts_every_flip() {
    let mut cfg = calibrated();
    cfg.template.attempts = 100;
    let out = run(Command::Template, &cfg).unwrap();
    let total: u64 = out
        .bundle
        .get(report::FLIP_HISTOGRAM)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap())
        .sum();
    let summary: serde_json::Value = serde_json::from_str(out.bundle.get(report::OUTCOME).unwrap()).unwrap();
    assert_eq!(total, summary["flips"].as_u64().unwrap());
    assert!(total > 0);
}

#[test]
fn opflip_scan_of_the_bundled_page_verifies() {
    let out = run(Command::OpflipScan, &ScenarioConfig::default()).unwrap();
    assert_eq!(out.status, Status::Success);
    let tsv = out.bundle.get(report::FLIP_CANDIDATES).unwrap();
    let entries = load_flip_database(tsv).unwrap();
    assert!(!entries.is_empty());
    for (offset, bit) in [(0x8d5f, 0), (0x8dd1, 0), (0x8dbd, 7)] {
        assert!(entries.iter().any(|e| e.offset == offset && e.bit == bit), "{offset:x}/{bit}");
    }
}

#[test]
fn opflip_scan_reads_a_binary() {
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("tiny.bin");
    std::fs::write(&bin, [0x85, 0xc0, 0x74, 0x0c, 0x90]).unwrap();
    let mut cfg = ScenarioConfig::default();
    cfg.opflip.binary = Some(bin);
    let out = run(Command::OpflipScan, &cfg).unwrap();
    let entries = load_flip_database(out.bundle.get(report::FLIP_CANDIDATES).unwrap()).unwrap();
    assert!(entries.iter().all(|e| e.binary == "tiny.bin" && e.offset < 4));
    assert!(entries.iter().any(|e| e.offset == 2 && e.bit == 0 && e.flipped.starts_with("jne")));
}

#[test]
fn failed_escalation_still_reports() {
    let mut cfg = calibrated();
    cfg.attack.max_template_attempts = 5;
    let out = run(Command::Escalate, &cfg).unwrap();
    assert_eq!(out.status, Status::AttackFailed);
    assert!(out.bundle.get(report::OUTCOME).unwrap().contains("\"privilege\": \"none\""));
    assert!(out.bundle.get(report::DEFENSES).is_some());
}

#[test]
fn bundles_write_every_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut b = ReportBundle::default();
    b.add("a.csv", "x\n".into());
    b.add_json("b.json", &vec![1, 2]);
    b.write(&dir.path().join("nested")).unwrap();
    assert_eq!(std::fs::read_to_string(dir.path().join("nested/a.csv")).unwrap(), "x\n");
    assert_eq!(b.names().collect::<Vec<_>>(), ["a.csv", "b.json"]);
}

fn rhsim(args: &[&str]) -> (i32, String) {
    let out = Process::new(env!("CARGO_BIN_EXE_rhsim")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    assert_eq!(rhsim(&["optimize", "--out", out]).0, 0);
    assert!(std::path::Path::new(out).join("plan_table.csv").exists());
    assert_eq!(rhsim(&["teleport"]).0, 1);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[dram]\npara = 1.5\n").unwrap();
    let (code, err) = rhsim(&["optimize", "--config", bad.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("dram.para"));
    let slow = dir.path().join("slow.toml");
    std::fs::write(&slow, "[calibration]\nattempts = 1\n").unwrap();
    assert_eq!(rhsim(&["calibrate", "--config", slow.to_str().unwrap(), "--out", out]).0, 3);
    let capped = dir.path().join("capped.toml");
    std::fs::write(
        &capped,
        format!("[calibration]\nrecord = {:?}\n[attack]\nmax_template_attempts = 5\n", record_path()),
    )
    .unwrap();
    assert_eq!(rhsim(&["escalate", "--config", capped.to_str().unwrap(), "--out", out]).0, 2);
}

#[test]
fn runs_are_reproducible() {
    let mut cfg = calibrated();
    cfg.waylay.runs = 3;
    for cmd in [Command::Waylay, Command::Optimize, Command::OpflipScan] {
        let a = run(cmd, &cfg).unwrap().bundle;
        let b = run(cmd, &cfg).unwrap().bundle;
        assert_eq!(a, b, "{cmd:?}");
    }
}
