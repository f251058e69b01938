//! Opcode flipping: a small x86-64 decoder, single-bit flip enumeration,
//! syntactic effect classification and a curated flip database.

mod decode;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use decode::{decode, is_prefix, is_rex, Instruction, Operand, CONDITIONS};

/// Curated database for sudoers.so 1.8.19p1.
pub const SUDOERS_FIXTURE: &str = include_str!("../../data/sudoers_flips.tsv");

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum OpflipError {
    #[error("offset {offset} outside buffer of {len} bytes")]
    OffsetOutOfRange { offset: usize, len: usize },
    #[error("truncated instruction at offset {offset}")]
    Truncated { offset: usize },
    #[error("illegal instruction at offset {offset}")]
    Illegal { offset: usize },
    #[error("fixture line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("range {start}..{end} outside image of {len} bytes")]
    Range { start: usize, end: usize, len: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectClass {
    BranchInversion,
    BranchConditionChange,
    CheckBypass,
    FlagNeutralizing,
    OperandChange,
    ControlTransferChange,
    Halt,
    PrefixAbsorption,
    Illegal,
    Other,
}

impl EffectClass {
    /// Classes reported by [`scan_binary`].
    pub fn is_candidate(self) -> bool {
        matches!(
            self,
            EffectClass::BranchInversion | EffectClass::FlagNeutralizing | EffectClass::CheckBypass
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionFlip {
    pub byte_index: usize,
    pub bit: u8,
    pub flipped_bytes: Vec<u8>,
    /// `None` when the flipped bytes run past the buffer.
    pub flipped: Option<Instruction>,
    pub effect: EffectClass,
}

impl InstructionFlip {
    /// Short name of the flipped decode, e.g. `jne` or `prefix fs`.
    pub fn label(&self) -> String {
        match (&self.flipped, self.effect) {
            (Some(i), EffectClass::PrefixAbsorption) => {
                format!("prefix {:02x}", i.prefixes.last().copied().unwrap_or(i.opcode))
            }
            (_, EffectClass::PrefixAbsorption) => format!("prefix {:02x}", self.flipped_bytes[self.byte_index]),
            (Some(i), _) if i.legal => i.mnemonic.clone(),
            _ => "(bad)".into(),
        }
    }
}

fn sets_flags(mnemonic: &str) -> bool {
    matches!(mnemonic, "test" | "cmp" | "add" | "or" | "xor" | "and" | "sub")
}

fn defines_no_flags(mnemonic: &str) -> bool {
    matches!(mnemonic, "mov" | "xchg" | "lea" | "push" | "pop" | "nop")
}

/// Syntactic effect of replacing `original` with `flipped`.
pub fn classify_flip(original: &Instruction, flipped: Option<&Instruction>) -> EffectClass {
    let Some(f) = flipped else {
        return EffectClass::Illegal;
    };
    if f.prefixes.len() > original.prefixes.len() {
        return EffectClass::PrefixAbsorption;
    }
    if !f.legal {
        // A new leading prefix byte swallows the rest even if the
        // following opcode is outside the subset.
        if is_prefix(f.bytes[0]) && !original.bytes.first().is_some_and(|&b| is_prefix(b)) {
            return EffectClass::PrefixAbsorption;
        }
        return EffectClass::Illegal;
    }
    if original.rex.is_some() && f.rex.is_some() && original.rex != f.rex && f.opcode == original.opcode {
        return EffectClass::OperandChange;
    }
    if f.mnemonic == "hlt" {
        return EffectClass::Halt;
    }
    match (original.condition(), f.condition()) {
        (Some(a), Some(b)) if a ^ b == 1 => return EffectClass::BranchInversion,
        (Some(a), Some(b)) if a != b => return EffectClass::BranchConditionChange,
        (Some(_), Some(_)) => return EffectClass::ControlTransferChange,
        (Some(_), None) => return EffectClass::CheckBypass,
        (None, Some(_)) => return EffectClass::ControlTransferChange,
        (None, None) => {}
    }
    if sets_flags(&original.mnemonic) && original.mnemonic != f.mnemonic {
        let imm_add = matches!(f.mnemonic.as_str(), "add" | "or")
            && f.operands.iter().any(|o| matches!(o, Operand::Imm(v) if *v != 0));
        if defines_no_flags(&f.mnemonic) || imm_add {
            return EffectClass::FlagNeutralizing;
        }
    }
    if f.mnemonic == original.mnemonic && f.operands != original.operands {
        return EffectClass::OperandChange;
    }
    EffectClass::Other
}

/// Every single-bit flip of the instruction at `offset`.
pub fn enumerate_flips(bytes: &[u8], offset: usize) -> Result<Vec<InstructionFlip>, OpflipError> {
    let original = decode(bytes, offset)?;
    if !original.legal {
        return Err(OpflipError::Illegal { offset });
    }
    let mut buf = bytes.to_vec();
    let mut out = Vec::with_capacity(original.len() * 8);
    for byte_index in 0..original.len() {
        for bit in 0..8u8 {
            buf[offset + byte_index] ^= 1 << bit;
            let flipped = decode(&buf, offset).ok();
            let effect = classify_flip(&original, flipped.as_ref());
            out.push(InstructionFlip {
                byte_index,
                bit,
                flipped_bytes: buf[offset..offset + original.len()].to_vec(),
                flipped,
                effect,
            });
            buf[offset + byte_index] ^= 1 << bit;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawBytes {
    pub bytes: Vec<u8>,
    /// Index of the byte at the entry's offset.
    pub flipped_index: usize,
}

impl fmt::Display for RawBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .bytes
            .iter()
            .enumerate()
            .map(|(i, b)| if i == self.flipped_index { format!("[{b:02x}]") } else { format!("{b:02x}") })
            .collect();
        write!(f, "{}", parts.join(" "))
    }
}

impl FromStr for RawBytes {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut bytes = Vec::new();
        let mut flipped_index = None;
        for tok in s.split_whitespace() {
            let hex = match tok.strip_prefix('[').and_then(|t| t.strip_suffix(']')) {
                Some(inner) => {
                    if flipped_index.replace(bytes.len()).is_some() {
                        return Err("more than one marked byte".into());
                    }
                    inner
                }
                None => tok,
            };
            bytes.push(u8::from_str_radix(hex, 16).map_err(|e| format!("bad byte {tok:?}: {e}"))?);
        }
        let flipped_index = flipped_index.ok_or("no marked byte")?;
        Ok(Self { bytes, flipped_index })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipDatabaseEntry {
    pub binary: String,
    pub offset: u64,
    pub bit: u8,
    pub raw: Option<RawBytes>,
    pub original: String,
    pub flipped: String,
    pub exploitable: bool,
}

impl FlipDatabaseEntry {
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t0x{:x}\t{}\t{}\t{}\t{}\t{}",
            self.binary,
            self.offset,
            self.bit,
            self.raw.as_ref().map_or("-".to_string(), |r| r.to_string()),
            self.original,
            self.flipped,
            u8::from(self.exploitable)
        )
    }
}

/// Parses the tab-separated database format. `#` lines are comments.
pub fn load_flip_database(text: &str) -> Result<Vec<FlipDatabaseEntry>, OpflipError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let err = |reason: String| OpflipError::Parse { line: line_no, reason };
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 7 {
            return Err(err(format!("expected 7 columns, found {}", cols.len())));
        }
        let offset = u64::from_str_radix(cols[1].trim_start_matches("0x"), 16)
            .map_err(|e| err(format!("offset: {e}")))?;
        let bit: u8 = cols[2].parse().map_err(|e| err(format!("bit: {e}")))?;
        if bit > 7 {
            return Err(err(format!("bit {bit} > 7")));
        }
        let raw = match cols[3].trim() {
            "" | "-" => None,
            s => Some(s.parse::<RawBytes>().map_err(err)?),
        };
        let exploitable = match cols[6].trim() {
            "1" => true,
            "0" => false,
            other => return Err(err(format!("exploitable must be 0 or 1, found {other:?}"))),
        };
        out.push(FlipDatabaseEntry {
            binary: cols[0].to_string(),
            offset,
            bit,
            raw,
            original: cols[4].to_string(),
            flipped: cols[5].to_string(),
            exploitable,
        });
    }
    Ok(out)
}

/// Canonical form for comparing disassembly text across syntaxes.
/// Symbol operands collapse to `<sym>`.
pub fn normalize_asm(text: &str) -> String {
    let lower = text.to_lowercase();
    let (mnemonic, rest) = lower.trim().split_once(' ').unwrap_or((lower.trim(), ""));
    let mnemonic = match mnemonic {
        "jz" => "je",
        "jnz" => "jne",
        "jnl" => "jge",
        "jnge" => "jl",
        "jng" => "jle",
        "jnle" => "jg",
        "jna" => "jbe",
        "jnbe" => "ja",
        "jc" | "jnae" => "jb",
        "jnc" | "jnb" => "jae",
        "jpe" => "jp",
        "jpo" => "jnp",
        m => m,
    };
    let rest = rest.replace("near ptr", " ").replace("short", " ");
    let ops: Vec<String> = rest
        .split(',')
        .map(|o| o.split_whitespace().collect::<String>())
        .filter(|o| !o.is_empty())
        .map(|o| normalize_operand(&o))
        .collect();
    if ops.is_empty() {
        mnemonic.to_string()
    } else {
        format!("{mnemonic} {}", ops.join(", "))
    }
}

fn normalize_number(tok: &str) -> Option<String> {
    let v = if let Some(h) = tok.strip_prefix("0x") {
        u64::from_str_radix(h, 16).ok()?
    } else if let Some(h) = tok.strip_suffix('h') {
        if !h.starts_with(|c: char| c.is_ascii_digit()) {
            return None;
        }
        u64::from_str_radix(h, 16).ok()?
    } else if tok.chars().all(|c| c.is_ascii_digit()) && !tok.is_empty() {
        tok.parse().ok()?
    } else {
        return None;
    };
    Some(format!("0x{v:x}"))
}

fn normalize_operand(op: &str) -> String {
    if let Some(n) = normalize_number(op) {
        return n;
    }
    if op.contains('_') && !op.contains('[') {
        return "<sym>".into();
    }
    let mut out = String::new();
    let mut tok = String::new();
    for c in op.chars().chain(std::iter::once('\0')) {
        if c.is_ascii_alphanumeric() {
            tok.push(c);
            continue;
        }
        if !tok.is_empty() {
            out.push_str(&normalize_number(&tok).unwrap_or_else(|| tok.clone()));
            tok.clear();
        }
        if c != '\0' {
            out.push(c);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryCheck {
    pub offset: u64,
    pub bit: u8,
    pub expected: String,
    pub decoded: String,
    pub effect: Option<EffectClass>,
    pub matched: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub entries: usize,
    pub skipped: usize,
    pub checks: Vec<EntryCheck>,
}

impl VerificationReport {
    pub fn matched(&self) -> usize {
        self.checks.iter().filter(|c| c.matched).count()
    }

    pub fn mismatches(&self) -> Vec<&EntryCheck> {
        self.checks.iter().filter(|c| !c.matched).collect()
    }

    pub fn all_matched(&self) -> bool {
        self.checks.iter().all(|c| c.matched)
    }
}

/// Re-derives the flipped mnemonic of every entry that carries raw bytes.
pub fn verify_database(db: &[FlipDatabaseEntry]) -> VerificationReport {
    let mut report = VerificationReport {
        entries: db.len(),
        ..Default::default()
    };
    for e in db {
        let Some(raw) = &e.raw else {
            report.skipped += 1;
            continue;
        };
        let mut check = EntryCheck {
            offset: e.offset,
            bit: e.bit,
            expected: e.flipped.clone(),
            decoded: String::new(),
            effect: None,
            matched: false,
        };
        match enumerate_flips(&raw.bytes, 0) {
            Ok(flips) => {
                let orig_ok = decode(&raw.bytes, 0)
                    .map(|i| normalize_asm(&i.text()) == normalize_asm(&e.original))
                    .unwrap_or(false);
                if let Some(f) = flips
                    .iter()
                    .find(|f| f.byte_index == raw.flipped_index && f.bit == e.bit)
                {
                    check.decoded = f.flipped.as_ref().map_or("(truncated)".into(), |i| i.text());
                    check.effect = Some(f.effect);
                    check.matched = orig_ok && normalize_asm(&check.decoded) == normalize_asm(&e.flipped);
                } else {
                    check.decoded = "(flip outside instruction)".into();
                }
            }
            Err(err) => check.decoded = err.to_string(),
        }
        report.checks.push(check);
    }
    report
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipCandidate {
    pub offset: u64,
    pub bit: u8,
    pub raw: RawBytes,
    pub original: String,
    pub flipped: String,
    pub effect: EffectClass,
}

impl FlipCandidate {
    pub fn to_entry(&self, binary: &str) -> FlipDatabaseEntry {
        FlipDatabaseEntry {
            binary: binary.to_string(),
            offset: self.offset,
            bit: self.bit,
            raw: Some(self.raw.clone()),
            original: self.original.clone(),
            flipped: self.flipped.clone(),
            exploitable: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryScan {
    pub candidates: Vec<FlipCandidate>,
    pub notes: Vec<String>,
}

/// Walks each range instruction by instruction and keeps the flips whose
/// class is a candidate class.
pub fn scan_binary(image: &[u8], ranges: &[Range<usize>]) -> Result<BinaryScan, OpflipError> {
    let mut scan = BinaryScan::default();
    for r in ranges {
        if r.start > r.end || r.end > image.len() {
            return Err(OpflipError::Range {
                start: r.start,
                end: r.end,
                len: image.len(),
            });
        }
        let mut pos = r.start;
        while pos < r.end {
            let insn = match decode(&image[..r.end], pos) {
                Ok(i) => i,
                Err(e) => {
                    scan.notes.push(format!("0x{pos:x}: {e}, rest of range skipped"));
                    break;
                }
            };
            if !insn.legal {
                scan.notes.push(format!("0x{pos:x}: undecodable byte {:02x} skipped", image[pos]));
                pos += 1;
                continue;
            }
            for f in enumerate_flips(&image[..r.end], pos)? {
                if !f.effect.is_candidate() {
                    continue;
                }
                scan.candidates.push(FlipCandidate {
                    offset: (pos + f.byte_index) as u64,
                    bit: f.bit,
                    raw: RawBytes {
                        bytes: insn.bytes.clone(),
                        flipped_index: f.byte_index,
                    },
                    original: insn.text(),
                    flipped: f.flipped.as_ref().map_or("(truncated)".into(), |i| i.text()),
                    effect: f.effect,
                });
            }
            pos += insn.len();
        }
    }
    Ok(scan)
}

#[cfg(test)]
mod tests;
