use rhsim_core::dram::{DramGeometry, DramState};
use rhsim_core::hammer::{calibrate, template_memory, AddressKnowledge, AddressPool, CalibrationSetup, TemplateBudget};
use rhsim_core::memory::{Fill, PhysMemory};
use rhsim_core::rng::substream;

#[test]
fn templating_reproduces_target_fractions() {
    let setup = CalibrationSetup::default();
    let rec = calibrate(&setup).unwrap();
    for tc in &rec.techniques {
        let mut dram = DramState::new(
            DramGeometry::ddr4_16gib(),
            setup.policy.clone(),
            rec.cells.clone(),
            PhysMemory::new(Fill::Random { seed: 21 }),
            substream(21, "para"),
        )
        .unwrap();
        let report = template_memory(
            &mut dram,
            &tc.technique,
            &AddressPool::whole(),
            AddressKnowledge::Full,
            TemplateBudget::Attempts(setup.attempts),
            &mut substream(21, "template"),
        )
        .unwrap();
        let (_, p) = report.uniformity();
        println!(
            "{:?} flippable {:.4} target {:.3} up {:.4} target {:.3} rate {:.4} target {:.4} p {p:.3} verified {:?}",
            tc.technique.kind,
            report.flippable_fraction(),
            tc.target.flippable_fraction,
            report.zero_to_one_fraction(),
            tc.target.zero_to_one_fraction,
            report.flip_rate(),
            tc.target.flip_rate,
            tc.verified_rate,
        );
        assert!((report.flippable_fraction() - tc.target.flippable_fraction).abs() <= 0.03);
        assert!((report.zero_to_one_fraction() - tc.target.zero_to_one_fraction).abs() <= 0.03);
        assert!(p > 0.01);
    }
}
