use super::*;

fn text(bytes: &[u8]) -> String {
    decode(bytes, 0).unwrap().text()
}

#[test]
fn decodes_basic_forms() {
    let je = decode(&[0x74, 0x10], 0).unwrap();
    assert_eq!(je.mnemonic, "je");
    assert_eq!(je.len(), 2);
    assert_eq!(je.operands, vec![Operand::Target(0x12)]);
    assert_eq!(text(&[0x85, 0xc0]), "test eax, eax");
    let hlt = decode(&[0xf4], 0).unwrap();
    assert_eq!((hlt.text().as_str(), hlt.len()), ("hlt", 1));
}

#[test]
fn decodes_modrm_sib_and_rex() {
    assert_eq!(text(&[0x8b, 0x80, 0xc8, 0x02, 0x00, 0x00]), "mov eax, [rax+0x2c8]");
    assert_eq!(text(&[0x48, 0x8d, 0x3d, 0x10, 0x00, 0x00, 0x00]), "lea rdi, [rip+0x10]");
    assert_eq!(text(&[0x8b, 0x44, 0x8b, 0xf8]), "mov eax, [rbx+rcx*4-0x8]");
    assert_eq!(text(&[0x41, 0x55]), "push r13");
    assert_eq!(text(&[0x4c, 0x89, 0xc0]), "mov rax, r8");
    assert_eq!(text(&[0x40, 0x84, 0xf6]), "test sil, sil");
    assert_eq!(text(&[0x84, 0xe4]), "test ah, ah");
    assert_eq!(text(&[0x64, 0x8b, 0x04, 0x25, 0x28, 0, 0, 0]), "mov eax, fs:[0x28]");
    assert_eq!(text(&[0x66, 0x05, 0x34, 0x12]), "add ax, 0x1234");
    assert_eq!(text(&[0x0f, 0x85, 0xda, 0x01, 0x00, 0x00]), "jne loc_1e0");
    assert_eq!(text(&[0x8c, 0xd8]), "mov eax, ds");
}

#[test]
fn unsupported_opcodes_are_illegal_with_length_one() {
    for b in [0x00u8, 0x0e, 0xc3, 0xe8, 0xff] {
        let i = decode(&[b, 0, 0, 0, 0, 0], 0).unwrap();
        assert!(!i.legal, "{b:02x}");
        assert_eq!(i.len(), 1);
    }
    assert!(!decode(&[0x8d, 0xc0], 0).unwrap().legal, "lea needs memory");
    assert!(!decode(&[0x8c, 0xf0], 0).unwrap().legal, "segment 6");
}

#[test]
fn truncation_is_an_error() {
    assert_eq!(decode(&[0x05, 0x01], 0), Err(OpflipError::Truncated { offset: 0 }));
    assert_eq!(decode(&[0x0f, 0x85, 0x00], 0), Err(OpflipError::Truncated { offset: 0 }));
    assert!(matches!(decode(&[0x90], 1), Err(OpflipError::OffsetOutOfRange { .. })));
}

#[test]
fn normalization_bridges_syntaxes() {
    assert_eq!(normalize_asm("add eax, 485775C0h"), normalize_asm("add eax, 0x485775c0"));
    assert_eq!(normalize_asm("or eax, [rbp+1DAh]"), "or eax, [rbp+0x1da]");
    assert_eq!(normalize_asm("jz short near ptr unk_8D61"), normalize_asm("je loc_12"));
    assert_eq!(normalize_asm("add al, 0C0h"), "add al, 0xc0");
    assert_ne!(normalize_asm("jnz loc_1"), normalize_asm("jz loc_1"));
}

#[test]
fn raw_bytes_round_trip() {
    let r: RawBytes = "0f [85] da 01 00 00".parse().unwrap();
    assert_eq!(r.flipped_index, 1);
    assert_eq!(r.to_string(), "0f [85] da 01 00 00");
    assert!("0f 85".parse::<RawBytes>().is_err());
    assert!("[0f] [85]".parse::<RawBytes>().is_err());
}

#[test]
fn malformed_fixture_lines_are_rejected() {
    assert!(matches!(load_flip_database("a\t0x1\t2"), Err(OpflipError::Parse { line: 1, .. })));
    assert!(load_flip_database("b\t0x1\t9\t-\tnop\tnop\t1").is_err());
    assert!(load_flip_database("b\tzz\t1\t-\tnop\tnop\t1").is_err());
    assert!(load_flip_database("b\t0x1\t1\t-\tnop\tnop\tyes").is_err());
    let db = load_flip_database("# c\n\nb\t0x1\t1\t-\tnop\tnop\t0\n").unwrap();
    assert_eq!(db.len(), 1);
    assert!(!db[0].exploitable);
    assert_eq!(load_flip_database(&db[0].to_tsv()).unwrap(), db);
}
