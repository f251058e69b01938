use std::fmt;

use serde::{Deserialize, Serialize};

use super::OpflipError;

const REG64: [&str; 16] = [
    "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi", "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15",
];
const REG32: [&str; 16] = [
    "eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi", "r8d", "r9d", "r10d", "r11d", "r12d", "r13d", "r14d", "r15d",
];
const REG16: [&str; 16] = [
    "ax", "cx", "dx", "bx", "sp", "bp", "si", "di", "r8w", "r9w", "r10w", "r11w", "r12w", "r13w", "r14w", "r15w",
];
const REG8_REX: [&str; 16] = [
    "al", "cl", "dl", "bl", "spl", "bpl", "sil", "dil", "r8b", "r9b", "r10b", "r11b", "r12b", "r13b", "r14b", "r15b",
];
const REG8_LEGACY: [&str; 8] = ["al", "cl", "dl", "bl", "ah", "ch", "dh", "bh"];
const SEGMENTS: [&str; 6] = ["es", "cs", "ss", "ds", "fs", "gs"];

/// Condition-code suffixes in encoding order.
pub const CONDITIONS: [&str; 16] = [
    "o", "no", "b", "ae", "e", "ne", "be", "a", "s", "ns", "p", "np", "l", "ge", "le", "g",
];

pub fn is_segment_prefix(b: u8) -> bool {
    matches!(b, 0x26 | 0x2e | 0x36 | 0x3e | 0x64 | 0x65)
}

pub fn is_prefix(b: u8) -> bool {
    is_segment_prefix(b) || b == 0x66
}

pub fn is_rex(b: u8) -> bool {
    (0x40..=0x4f).contains(&b)
}

fn segment_of_prefix(b: u8) -> &'static str {
    match b {
        0x26 => "es",
        0x2e => "cs",
        0x36 => "ss",
        0x3e => "ds",
        0x64 => "fs",
        _ => "gs",
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Operand {
    Reg(String),
    Mem {
        segment: Option<String>,
        base: Option<String>,
        index: Option<(String, u8)>,
        disp: i64,
        rip: bool,
    },
    Imm(i64),
    /// Branch target as a buffer offset.
    Target(u64),
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "{r}"),
            Operand::Imm(v) if *v < 0 => write!(f, "-0x{:x}", v.unsigned_abs()),
            Operand::Imm(v) => write!(f, "0x{v:x}"),
            Operand::Target(t) => write!(f, "loc_{t:x}"),
            Operand::Mem {
                segment,
                base,
                index,
                disp,
                rip,
            } => {
                if let Some(s) = segment {
                    write!(f, "{s}:")?;
                }
                write!(f, "[")?;
                let mut parts = Vec::new();
                if *rip {
                    parts.push("rip".to_string());
                }
                if let Some(b) = base {
                    parts.push(b.clone());
                }
                if let Some((i, s)) = index {
                    parts.push(if *s == 1 { i.clone() } else { format!("{i}*{s}") });
                }
                let mut out = parts.join("+");
                if *disp != 0 || out.is_empty() {
                    let sign = if *disp < 0 { "-" } else if out.is_empty() { "" } else { "+" };
                    out.push_str(&format!("{sign}0x{:x}", disp.unsigned_abs()));
                }
                write!(f, "{out}]")
            }
        }
    }
}

/// One decoded instruction. Unsupported opcodes decode as illegal with
/// length 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub bytes: Vec<u8>,
    pub prefixes: Vec<u8>,
    pub rex: Option<u8>,
    pub opcode: u8,
    /// Second opcode byte after 0x0F.
    pub opcode2: Option<u8>,
    pub mnemonic: String,
    pub operands: Vec<Operand>,
    pub legal: bool,
}

impl Instruction {
    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// Condition code of a conditional jump.
    pub fn condition(&self) -> Option<u8> {
        match (self.opcode, self.opcode2) {
            (0x70..=0x7f, None) => Some(self.opcode & 0xf),
            (0x0f, Some(b @ 0x80..=0x8f)) => Some(b & 0xf),
            _ => None,
        }
    }

    pub fn is_conditional_jump(&self) -> bool {
        self.condition().is_some()
    }

    pub fn text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.legal {
            return write!(f, "(bad)");
        }
        write!(f, "{}", self.mnemonic)?;
        for (i, op) in self.operands.iter().enumerate() {
            write!(f, "{}{op}", if i == 0 { " " } else { ", " })?;
        }
        Ok(())
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    start: usize,
}

impl Cursor<'_> {
    fn u8(&mut self) -> Result<u8, OpflipError> {
        let b = *self.buf.get(self.pos).ok_or(OpflipError::Truncated { offset: self.start })?;
        self.pos += 1;
        Ok(b)
    }

    fn i8(&mut self) -> Result<i64, OpflipError> {
        Ok(i64::from(self.u8()? as i8))
    }

    fn i16(&mut self) -> Result<i64, OpflipError> {
        let lo = self.u8()?;
        let hi = self.u8()?;
        Ok(i64::from(i16::from_le_bytes([lo, hi])))
    }

    fn i32(&mut self) -> Result<i64, OpflipError> {
        let mut b = [0u8; 4];
        for x in &mut b {
            *x = self.u8()?;
        }
        Ok(i64::from(i32::from_le_bytes(b)))
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Size {
    B8,
    B16,
    B32,
    B64,
}

struct Ctx {
    rex: u8,
    opsize: bool,
    segment: Option<&'static str>,
}

impl Ctx {
    fn w(&self) -> bool {
        self.rex & 8 != 0
    }
    fn r(&self) -> usize {
        usize::from(self.rex & 4 != 0) << 3
    }
    fn x(&self) -> usize {
        usize::from(self.rex & 2 != 0) << 3
    }
    fn b(&self) -> usize {
        usize::from(self.rex & 1 != 0) << 3
    }

    fn size(&self) -> Size {
        if self.w() {
            Size::B64
        } else if self.opsize {
            Size::B16
        } else {
            Size::B32
        }
    }

    fn reg(&self, n: usize, size: Size) -> String {
        match size {
            Size::B64 => REG64[n].into(),
            Size::B32 => REG32[n].into(),
            Size::B16 => REG16[n].into(),
            Size::B8 if self.rex != 0 => REG8_REX[n].into(),
            Size::B8 => REG8_LEGACY[n & 7].into(),
        }
    }
}

struct ModRm {
    md: u8,
    reg: usize,
    rm: Operand,
}

fn modrm(c: &mut Cursor, ctx: &Ctx, size: Size) -> Result<ModRm, OpflipError> {
    let m = c.u8()?;
    let md = m >> 6;
    let reg = usize::from((m >> 3) & 7) | ctx.r();
    let rm_bits = usize::from(m & 7);
    if md == 3 {
        return Ok(ModRm {
            md,
            reg,
            rm: Operand::Reg(ctx.reg(rm_bits | ctx.b(), size)),
        });
    }
    let segment = ctx.segment.map(String::from);
    let (mut base, mut index, mut rip) = (None, None, false);
    if rm_bits == 4 {
        let sib = c.u8()?;
        let scale = 1u8 << (sib >> 6);
        let idx = usize::from((sib >> 3) & 7) | ctx.x();
        let b = usize::from(sib & 7);
        if idx != 4 {
            index = Some((REG64[idx].to_string(), scale));
        }
        if !(b == 5 && md == 0) {
            base = Some(REG64[b | ctx.b()].to_string());
        }
        let disp = match md {
            0 if b == 5 => c.i32()?,
            0 => 0,
            1 => c.i8()?,
            _ => c.i32()?,
        };
        return Ok(ModRm {
            md,
            reg,
            rm: Operand::Mem {
                segment,
                base,
                index,
                disp,
                rip,
            },
        });
    }
    let disp = match md {
        0 if rm_bits == 5 => {
            rip = true;
            c.i32()?
        }
        0 => 0,
        1 => c.i8()?,
        _ => c.i32()?,
    };
    if !rip {
        base = Some(REG64[rm_bits | ctx.b()].to_string());
    }
    Ok(ModRm {
        md,
        reg,
        rm: Operand::Mem {
            segment,
            base,
            index,
            disp,
            rip,
        },
    })
}

/// Immediates keep their encoded width, zero-extended.
fn imm(c: &mut Cursor, size: Size) -> Result<i64, OpflipError> {
    Ok(match size {
        Size::B8 => c.i8()? & 0xff,
        Size::B16 => c.i16()? & 0xffff,
        _ => c.i32()? & 0xffff_ffff,
    })
}

/// Decodes one instruction of the supported subset at `offset`.
pub fn decode(bytes: &[u8], offset: usize) -> Result<Instruction, OpflipError> {
    if offset >= bytes.len() {
        return Err(OpflipError::OffsetOutOfRange { offset, len: bytes.len() });
    }
    let mut c = Cursor {
        buf: bytes,
        pos: offset,
        start: offset,
    };
    let mut prefixes = Vec::new();
    let mut ctx = Ctx {
        rex: 0,
        opsize: false,
        segment: None,
    };
    let mut b = c.u8()?;
    while is_prefix(b) && prefixes.len() < 4 {
        prefixes.push(b);
        if b == 0x66 {
            ctx.opsize = true;
        } else {
            ctx.segment = Some(segment_of_prefix(b));
        }
        b = c.u8()?;
    }
    let mut rex = None;
    if is_rex(b) {
        rex = Some(b);
        ctx.rex = b;
        b = c.u8()?;
    }
    let opcode = b;
    let mut opcode2 = None;
    let size = ctx.size();
    let mut ops = Vec::new();
    let mnemonic: String = match opcode {
        0x04 | 0x0c | 0x34 => {
            ops.push(Operand::Reg("al".into()));
            ops.push(Operand::Imm(imm(&mut c, Size::B8)?));
            alu_name(opcode).into()
        }
        0x05 | 0x0d | 0x35 => {
            ops.push(Operand::Reg(ctx.reg(0, size)));
            ops.push(Operand::Imm(imm(&mut c, size)?));
            alu_name(opcode).into()
        }
        0x08 | 0x09 | 0x0a | 0x0b | 0x30 | 0x31 | 0x32 | 0x33 | 0x84 | 0x85 | 0x87 | 0x88 | 0x89 | 0x8a | 0x8b => {
            let sz = if opcode & 1 == 0 { Size::B8 } else { size };
            let m = modrm(&mut c, &ctx, sz)?;
            let reg = Operand::Reg(ctx.reg(m.reg, sz));
            if matches!(opcode, 0x0a | 0x0b | 0x32 | 0x33 | 0x8a | 0x8b) {
                ops.extend([reg, m.rm]);
            } else {
                ops.extend([m.rm, reg]);
            }
            alu_name(opcode).into()
        }
        0x8c => {
            let m = modrm(&mut c, &ctx, size)?;
            if m.reg & 7 > 5 {
                return Ok(illegal(bytes, offset));
            }
            ops.push(m.rm);
            ops.push(Operand::Reg(SEGMENTS[m.reg & 7].into()));
            "mov".into()
        }
        0x8d => {
            let m = modrm(&mut c, &ctx, size)?;
            if m.md == 3 {
                return Ok(illegal(bytes, offset));
            }
            ops.push(Operand::Reg(ctx.reg(m.reg, size)));
            ops.push(m.rm);
            "lea".into()
        }
        0x50..=0x5f => {
            let n = usize::from(opcode & 7) | ctx.b();
            let sz = if ctx.opsize { Size::B16 } else { Size::B64 };
            ops.push(Operand::Reg(ctx.reg(n, sz)));
            if opcode < 0x58 { "push" } else { "pop" }.into()
        }
        0x70..=0x7f => {
            let d = c.i8()?;
            ops.push(Operand::Target((c.pos as i64 + d) as u64));
            format!("j{}", CONDITIONS[usize::from(opcode & 0xf)])
        }
        0x90 => "nop".into(),
        0xf4 => "hlt".into(),
        0x0f => {
            let b2 = c.u8()?;
            opcode2 = Some(b2);
            if !(0x80..=0x8f).contains(&b2) {
                return Ok(illegal(bytes, offset));
            }
            let d = c.i32()?;
            ops.push(Operand::Target((c.pos as i64 + d) as u64));
            format!("j{}", CONDITIONS[usize::from(b2 & 0xf)])
        }
        _ => return Ok(illegal(bytes, offset)),
    };
    Ok(Instruction {
        bytes: bytes[offset..c.pos].to_vec(),
        prefixes,
        rex,
        opcode,
        opcode2,
        mnemonic,
        operands: ops,
        legal: true,
    })
}

fn alu_name(opcode: u8) -> &'static str {
    match opcode {
        0x04 | 0x05 => "add",
        0x08..=0x0d => "or",
        0x30..=0x35 => "xor",
        0x84 | 0x85 => "test",
        0x87 => "xchg",
        _ => "mov",
    }
}

fn illegal(bytes: &[u8], offset: usize) -> Instruction {
    Instruction {
        bytes: vec![bytes[offset]],
        prefixes: Vec::new(),
        rex: None,
        opcode: bytes[offset],
        opcode2: None,
        mnemonic: "(bad)".into(),
        operands: Vec::new(),
        legal: false,
    }
}
