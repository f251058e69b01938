use std::collections::BTreeSet;

use proptest::prelude::*;
use rhsim_core::opflip::*;

#[test]
fn je_opcode_flips_match_case_study_set() {
    let flips = enumerate_flips(&[0x74, 0x10], 0).unwrap();
    let got: BTreeSet<(u8, String)> = flips
        .iter()
        .filter(|f| f.byte_index == 0)
        .map(|f| (f.flipped_bytes[0], f.label()))
        .collect();
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
    assert_eq!(got, want);
    let by_byte = |b: u8| flips.iter().find(|f| f.flipped_bytes[0] == b).unwrap().effect;
    assert_eq!(by_byte(0x75), EffectClass::BranchInversion);
    assert_eq!(by_byte(0x76), EffectClass::BranchConditionChange);
    assert_eq!(by_byte(0xf4), EffectClass::Halt);
    assert_eq!(by_byte(0x64), EffectClass::PrefixAbsorption);
}

#[test]
fn test_al_bit7_becomes_add_al_imm() {
    let flips = enumerate_flips(&[0x84, 0xc0], 0).unwrap();
    let f = flips.iter().find(|f| f.byte_index == 0 && f.bit == 7).unwrap();
    assert_eq!(f.flipped_bytes, vec![0x04, 0xc0]);
    assert_eq!(f.flipped.as_ref().unwrap().text(), "add al, 0xc0");
    assert_eq!(f.effect, EffectClass::FlagNeutralizing);
}

#[test]
fn jnz_near_bit0_of_second_byte_becomes_jz_near() {
    let bytes = [0x0f, 0x85, 0xda, 0x01, 0x00, 0x00];
    let flips = enumerate_flips(&bytes, 0).unwrap();
    let f = flips.iter().find(|f| f.byte_index == 1 && f.bit == 0).unwrap();
    let i = f.flipped.as_ref().unwrap();
    assert_eq!((i.opcode, i.opcode2), (0x0f, Some(0x84)));
    assert_eq!(i.mnemonic, "je");
    assert_eq!(i.len(), 6);
    assert_eq!(f.effect, EffectClass::BranchInversion);
}

#[test]
fn classification_examples() {
    let test = decode(&[0x85, 0xc0], 0).unwrap();
    let xchg = decode(&[0x87, 0xc0], 0).unwrap();
    assert_eq!(xchg.text(), "xchg eax, eax");
    assert_eq!(classify_flip(&test, Some(&xchg)), EffectClass::FlagNeutralizing);
    let jnz = decode(&[0x75, 0x57], 0).unwrap();
    let jz = decode(&[0x74, 0x57], 0).unwrap();
    assert_eq!(classify_flip(&jnz, Some(&jz)), EffectClass::BranchInversion);
    let test_ecx = decode(&[0x85, 0xc1], 0).unwrap();
    assert_eq!(test_ecx.text(), "test ecx, eax");
    assert_eq!(classify_flip(&test, Some(&test_ecx)), EffectClass::OperandChange);
    assert_eq!(classify_flip(&test, None), EffectClass::Illegal);
    let bad = decode(&[0xc3], 0).unwrap();
    assert_eq!(classify_flip(&test, Some(&bad)), EffectClass::Illegal);
}

#[test]
fn rex_flips_are_operand_changes() {
    let bytes = [0x48, 0x89, 0xc0];
    let flips = enumerate_flips(&bytes, 0).unwrap();
    for f in flips.iter().filter(|f| f.byte_index == 0 && f.bit < 4) {
        assert_eq!(f.effect, EffectClass::OperandChange, "bit {}", f.bit);
    }
}

#[test]
fn sudoers_database_verifies() {
    let db = load_flip_database(SUDOERS_FIXTURE).unwrap();
    assert_eq!(db.len(), 29);
    assert!(db.iter().all(|e| e.exploitable && e.binary.starts_with("sudoers.so")));
    let report = verify_database(&db);
    assert_eq!(report.checks.len(), 11);
    assert_eq!(report.skipped, 18);
    assert!(report.all_matched(), "{:#?}", report.mismatches());
    let effect_at = |off: u64, bit: u8| {
        report
            .checks
            .iter()
            .find(|c| c.offset == off && c.bit == bit)
            .and_then(|c| c.effect)
            .unwrap()
    };
    assert_eq!(effect_at(0x8d5d, 7), EffectClass::FlagNeutralizing);
    assert_eq!(effect_at(0x8d5e, 0), EffectClass::OperandChange);
    assert_eq!(effect_at(0x8dbd, 3), EffectClass::FlagNeutralizing);
    assert_eq!(effect_at(0x8dbf, 3), EffectClass::BranchConditionChange);
    assert_eq!(effect_at(0x8dd0, 2), EffectClass::CheckBypass);
    assert_eq!(effect_at(0x8dd1, 0), EffectClass::BranchInversion);
}

#[test]
fn database_reports_mismatches() {
    let mut db = load_flip_database(SUDOERS_FIXTURE).unwrap();
    let i = db.iter().position(|e| e.offset == 0x8dd1).unwrap();
    db[i].flipped = "jnz loc_8FB0".into();
    let report = verify_database(&db);
    assert_eq!(report.mismatches().len(), 1);
    assert_eq!(report.mismatches()[0].offset, 0x8dd1);
}

#[test]
fn scan_finds_test_je_candidates() {
    let image = [0x85, 0xc0, 0x74, 0x0c];
    let scan = scan_binary(&image, &[0..4]).unwrap();
    let mut oracle = Vec::new();
    for start in [0usize, 2] {
        for f in enumerate_flips(&image, start).unwrap() {
            if f.effect.is_candidate() {
                oracle.push(((start + f.byte_index) as u64, f.bit, f.effect));
            }
        }
    }
    let got: Vec<_> = scan.candidates.iter().map(|c| (c.offset, c.bit, c.effect)).collect();
    assert_eq!(got, oracle);
    assert!(got.contains(&(2, 0, EffectClass::BranchInversion)));
    assert!(got.contains(&(0, 1, EffectClass::FlagNeutralizing)));
    assert!(scan.notes.is_empty());
}

#[test]
fn scan_edge_cases() {
    let image = [0xc3u8, 0xc3, 0xc3, 0x90];
    assert!(scan_binary(&image, &[]).unwrap().candidates.is_empty());
    assert!(scan_binary(&image, &[2..2]).unwrap().candidates.is_empty());
    let bad = scan_binary(&image, &[0..3]).unwrap();
    assert!(bad.candidates.is_empty());
    assert_eq!(bad.notes.len(), 3);
    assert!(scan_binary(&image, &[0..9]).is_err());
    let cut = scan_binary(&[0x90, 0x0f, 0x85, 0x00], &[0..4]).unwrap();
    assert_eq!(cut.notes.len(), 1);
}

#[test]
fn candidates_serialize_as_database_rows() {
    let scan = scan_binary(&[0x85, 0xc0, 0x75, 0x57], &[0..4]).unwrap();
    let text: String = scan
        .candidates
        .iter()
        .map(|c| c.to_entry("synthetic").to_tsv() + "\n")
        .collect();
    let db = load_flip_database(&text).unwrap();
    assert_eq!(db.len(), scan.candidates.len());
    assert!(verify_database(&db).all_matched());
}

#[test]
fn every_short_jcc_inverts_on_bit0() {
    for op in 0x70u8..=0x7f {
        let flips = enumerate_flips(&[op, 0x20], 0).unwrap();
        let f = &flips[0];
        assert_eq!((f.byte_index, f.bit), (0, 0));
        let i = f.flipped.as_ref().unwrap();
        assert_eq!(i.opcode, op ^ 1);
        assert_eq!(f.effect, EffectClass::BranchInversion, "{op:02x}");
    }
}

fn legal_prefix() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(any::<u8>(), 1..16).prop_filter("decodes", |b| {
        decode(b, 0).map(|i| i.legal).unwrap_or(false)
    })
}

proptest! {
    #[test]
    fn flips_have_one_bit_distance_and_eight_per_byte(bytes in legal_prefix()) {
        let insn = decode(&bytes, 0).unwrap();
        let flips = enumerate_flips(&bytes, 0).unwrap();
        prop_assert_eq!(flips.len(), 8 * insn.len());
        for f in &flips {
            let diff: u32 = insn.bytes.iter().zip(&f.flipped_bytes).map(|(a, b)| (a ^ b).count_ones()).sum();
            prop_assert_eq!(diff, 1);
        }
    }

    #[test]
    fn double_flip_is_identity(bytes in legal_prefix(), byte in 0usize..15, bit in 0u8..8) {
        let insn = decode(&bytes, 0).unwrap();
        let idx = byte % insn.len();
        let mut b = bytes.clone();
        b[idx] ^= 1 << bit;
        b[idx] ^= 1 << bit;
        prop_assert_eq!(&b, &bytes);
        prop_assert_eq!(decode(&b, 0).unwrap(), insn);
    }

    #[test]
    fn redecoding_consumed_bytes_is_stable(bytes in legal_prefix()) {
        let insn = decode(&bytes, 0).unwrap();
        prop_assert!(insn.len() <= 15);
        let again = decode(&insn.bytes, 0).unwrap();
        prop_assert_eq!(again, insn);
    }
}
