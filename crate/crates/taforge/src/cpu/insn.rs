//! Decode and execute the supported AArch64 subset. Encodings outside the
//! subset decode to `Unsupported`; the all-zero-top-half UDF space decodes to
//! `Undefined`. See docs/instruction-set.md for the semantics table.

use crate::cpu::{RegisterFile, StepEffects};
use crate::mem::{AccessKind, AddressSpace};

use super::Fault;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeError {
    Undefined,
    Unsupported,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cond {
    Eq,
    Ne,
    Hs,
    Lo,
    Ge,
    Lt,
    Gt,
    Le,
    Al,
}

impl Cond {
    fn from_bits(bits: u32) -> Result<Cond, DecodeError> {
        Ok(match bits {
            0b0000 => Cond::Eq,
            0b0001 => Cond::Ne,
            0b0010 => Cond::Hs,
            0b0011 => Cond::Lo,
            0b1010 => Cond::Ge,
            0b1011 => Cond::Lt,
            0b1100 => Cond::Gt,
            0b1101 => Cond::Le,
            0b1110 => Cond::Al,
            _ => return Err(DecodeError::Unsupported),
        })
    }

    fn holds(self, r: &RegisterFile) -> bool {
        match self {
            Cond::Eq => r.z,
            Cond::Ne => !r.z,
            Cond::Hs => r.c,
            Cond::Lo => !r.c,
            Cond::Ge => r.n == r.v,
            Cond::Lt => r.n != r.v,
            Cond::Gt => !r.z && r.n == r.v,
            Cond::Le => r.z || r.n != r.v,
            Cond::Al => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogOp {
    And,
    Orr,
    Eor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shift {
    Lsl,
    Lsr,
    Asr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMode {
    Post,
    Offset,
    Pre,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Insn {
    MovZ { sf: bool, rd: u8, imm16: u16, hw: u8 },
    MovN { sf: bool, rd: u8, imm16: u16, hw: u8 },
    MovK { sf: bool, rd: u8, imm16: u16, hw: u8 },
    AddSubImm { sf: bool, sub: bool, set_flags: bool, rd: u8, rn: u8, imm12: u32, shift12: bool },
    AddSubReg { sf: bool, sub: bool, set_flags: bool, rd: u8, rn: u8, rm: u8, shift: Shift, amount: u8 },
    LogicalImm { sf: bool, op: LogOp, rd: u8, rn: u8, imm: u64 },
    LogicalReg { sf: bool, op: LogOp, rd: u8, rn: u8, rm: u8, shift: Shift, amount: u8 },
    Ubfm { sf: bool, rd: u8, rn: u8, immr: u8, imms: u8 },
    B { offset: i64 },
    Bl { offset: i64 },
    BCond { cond: Cond, offset: i64 },
    Cbz { sf: bool, nonzero: bool, rt: u8, offset: i64 },
    Br { rn: u8 },
    Blr { rn: u8 },
    Ret { rn: u8 },
    Adr { rd: u8, imm: i64 },
    Adrp { rd: u8, imm: i64 },
    /// size: 0 = byte, 1 = half, 2 = word, 3 = doubleword. `sign_extend`
    /// marks LDRSW (size 2 only).
    LdStImm { size: u8, load: bool, sign_extend: bool, rt: u8, rn: u8, imm12: u32 },
    LdStReg { size: u8, load: bool, sign_extend: bool, rt: u8, rn: u8, rm: u8, scaled: bool },
    LdStPair { sf: bool, load: bool, rt: u8, rt2: u8, rn: u8, imm7: i64, mode: PairMode },
    Nop,
    Svc { imm: u16 },
}

impl Insn {
    pub fn mnemonic(&self) -> String {
        format!("{self:?}")
    }
}

fn sign_extend(value: u64, bits: u32) -> i64 {
    let shift = 64 - bits;
    ((value << shift) as i64) >> shift
}

/// DecodeBitMasks(N, imms, immr) restricted to the wmask result, which is all
/// the logical-immediate instructions need.
fn decode_bit_masks(n: u32, imms: u32, immr: u32, datasize: u32) -> Option<u64> {
    let combined = (n << 6) | (!imms & 0x3F);
    if combined == 0 {
        return None;
    }
    let len = 31 - combined.leading_zeros();
    if len < 1 {
        return None;
    }
    let esize = 1u32 << len;
    if esize > datasize {
        return None;
    }
    let levels = esize - 1;
    let s = imms & levels;
    let r = immr & levels;
    if s == levels {
        return None;
    }
    let welem: u64 = if s + 1 == 64 { u64::MAX } else { (1u64 << (s + 1)) - 1 };
    // Rotate right within the element, then replicate to datasize.
    let elem = if r == 0 {
        welem
    } else {
        let e = esize as u64;
        ((welem >> r) | (welem << (e as u32 - r))) & (if e == 64 { u64::MAX } else { (1u64 << e) - 1 })
    };
    let mut mask = 0u64;
    let mut pos = 0;
    while pos < datasize {
        mask |= elem << pos;
        pos += esize;
    }
    if datasize == 32 {
        mask &= 0xFFFF_FFFF;
    }
    Some(mask)
}

pub fn decode(raw: u32) -> Result<Insn, DecodeError> {
    if raw & 0xFFFF_0000 == 0 {
        return Err(DecodeError::Undefined); // UDF space
    }
    if raw == 0xD503_201F {
        return Ok(Insn::Nop);
    }
    if raw & 0xFFE0_001F == 0xD400_0001 {
        return Ok(Insn::Svc { imm: ((raw >> 5) & 0xFFFF) as u16 });
    }
    match raw & 0xFFFF_FC1F {
        0xD61F_0000 => return Ok(Insn::Br { rn: ((raw >> 5) & 31) as u8 }),
        0xD63F_0000 => return Ok(Insn::Blr { rn: ((raw >> 5) & 31) as u8 }),
        0xD65F_0000 => return Ok(Insn::Ret { rn: ((raw >> 5) & 31) as u8 }),
        _ => {}
    }
    // B / BL
    if raw & 0x7C00_0000 == 0x1400_0000 {
        let offset = sign_extend((raw & 0x03FF_FFFF) as u64, 26) << 2;
        return Ok(if raw >> 31 == 1 { Insn::Bl { offset } } else { Insn::B { offset } });
    }
    // B.cond
    if raw & 0xFF00_0010 == 0x5400_0000 {
        let cond = Cond::from_bits(raw & 0xF)?;
        let offset = sign_extend(((raw >> 5) & 0x7FFFF) as u64, 19) << 2;
        return Ok(Insn::BCond { cond, offset });
    }
    // CBZ / CBNZ
    if raw & 0x7E00_0000 == 0x3400_0000 {
        let sf = raw >> 31 == 1;
        let nonzero = raw & (1 << 24) != 0;
        let rt = (raw & 31) as u8;
        let offset = sign_extend(((raw >> 5) & 0x7FFFF) as u64, 19) << 2;
        return Ok(Insn::Cbz { sf, nonzero, rt, offset });
    }
    // ADR / ADRP
    if raw & 0x1F00_0000 == 0x1000_0000 {
        let rd = (raw & 31) as u8;
        let immlo = (raw >> 29) & 3;
        let immhi = (raw >> 5) & 0x7FFFF;
        let imm = sign_extend(((immhi << 2) | immlo) as u64, 21);
        return Ok(if raw >> 31 == 1 {
            Insn::Adrp { rd, imm: imm << 12 }
        } else {
            Insn::Adr { rd, imm }
        });
    }
    // Add/sub immediate
    if raw & 0x1F80_0000 == 0x1100_0000 {
        let sf = raw >> 31 == 1;
        return Ok(Insn::AddSubImm {
            sf,
            sub: raw & (1 << 30) != 0,
            set_flags: raw & (1 << 29) != 0,
            rd: (raw & 31) as u8,
            rn: ((raw >> 5) & 31) as u8,
            imm12: (raw >> 10) & 0xFFF,
            shift12: raw & (1 << 22) != 0,
        });
    }
    // Move wide
    if raw & 0x1F80_0000 == 0x1280_0000 {
        let sf = raw >> 31 == 1;
        let hw = ((raw >> 21) & 3) as u8;
        if !sf && hw > 1 {
            return Err(DecodeError::Unsupported);
        }
        let rd = (raw & 31) as u8;
        let imm16 = ((raw >> 5) & 0xFFFF) as u16;
        return Ok(match (raw >> 29) & 3 {
            0b00 => Insn::MovN { sf, rd, imm16, hw },
            0b10 => Insn::MovZ { sf, rd, imm16, hw },
            0b11 => Insn::MovK { sf, rd, imm16, hw },
            _ => return Err(DecodeError::Unsupported),
        });
    }
    // Logical immediate
    if raw & 0x1F80_0000 == 0x1200_0000 {
        let sf = raw >> 31 == 1;
        let n = (raw >> 22) & 1;
        if !sf && n == 1 {
            return Err(DecodeError::Unsupported);
        }
        let op = match (raw >> 29) & 3 {
            0b00 => LogOp::And,
            0b01 => LogOp::Orr,
            0b10 => LogOp::Eor,
            _ => return Err(DecodeError::Unsupported), // ANDS outside the subset
        };
        let immr = (raw >> 16) & 0x3F;
        let imms = (raw >> 10) & 0x3F;
        let datasize = if sf { 64 } else { 32 };
        let imm = decode_bit_masks(n, imms, immr, datasize).ok_or(DecodeError::Unsupported)?;
        return Ok(Insn::LogicalImm {
            sf,
            op,
            rd: (raw & 31) as u8,
            rn: ((raw >> 5) & 31) as u8,
            imm,
        });
    }
    // Bitfield (UBFM only; LSL/LSR/UBFX aliases)
    if raw & 0x1F80_0000 == 0x1300_0000 {
        let sf = raw >> 31 == 1;
        if (raw >> 29) & 3 != 0b10 {
            return Err(DecodeError::Unsupported);
        }
        let n = (raw >> 22) & 1;
        if (sf && n != 1) || (!sf && n != 0) {
            return Err(DecodeError::Unsupported);
        }
        return Ok(Insn::Ubfm {
            sf,
            rd: (raw & 31) as u8,
            rn: ((raw >> 5) & 31) as u8,
            immr: ((raw >> 16) & 0x3F) as u8,
            imms: ((raw >> 10) & 0x3F) as u8,
        });
    }
    // Add/sub shifted register
    if raw & 0x1F20_0000 == 0x0B00_0000 {
        let sf = raw >> 31 == 1;
        let shift = match (raw >> 22) & 3 {
            0b00 => Shift::Lsl,
            0b01 => Shift::Lsr,
            0b10 => Shift::Asr,
            _ => return Err(DecodeError::Unsupported),
        };
        let amount = ((raw >> 10) & 0x3F) as u8;
        if !sf && amount >= 32 {
            return Err(DecodeError::Unsupported);
        }
        return Ok(Insn::AddSubReg {
            sf,
            sub: raw & (1 << 30) != 0,
            set_flags: raw & (1 << 29) != 0,
            rd: (raw & 31) as u8,
            rn: ((raw >> 5) & 31) as u8,
            rm: ((raw >> 16) & 31) as u8,
            shift,
            amount,
        });
    }
    // Logical shifted register
    if raw & 0x1F20_0000 == 0x0A00_0000 {
        let sf = raw >> 31 == 1;
        let op = match (raw >> 29) & 3 {
            0b00 => LogOp::And,
            0b01 => LogOp::Orr,
            0b10 => LogOp::Eor,
            _ => return Err(DecodeError::Unsupported),
        };
        let shift = match (raw >> 22) & 3 {
            0b00 => Shift::Lsl,
            0b01 => Shift::Lsr,
            0b10 => Shift::Asr,
            _ => return Err(DecodeError::Unsupported),
        };
        let amount = ((raw >> 10) & 0x3F) as u8;
        if !sf && amount >= 32 {
            return Err(DecodeError::Unsupported);
        }
        return Ok(Insn::LogicalReg {
            sf,
            op,
            rd: (raw & 31) as u8,
            rn: ((raw >> 5) & 31) as u8,
            rm: ((raw >> 16) & 31) as u8,
            shift,
            amount,
        });
    }
    // Load/store register, unsigned immediate
    if raw & 0x3F00_0000 == 0x3900_0000 {
        let size = ((raw >> 30) & 3) as u8;
        let opc = (raw >> 22) & 3;
        let (load, sign_ext) = match (size, opc) {
            (_, 0b00) => (false, false),
            (_, 0b01) => (true, false),
            (2, 0b10) => (true, true), // LDRSW
            _ => return Err(DecodeError::Unsupported),
        };
        return Ok(Insn::LdStImm {
            size,
            load,
            sign_extend: sign_ext,
            rt: (raw & 31) as u8,
            rn: ((raw >> 5) & 31) as u8,
            imm12: (raw >> 10) & 0xFFF,
        });
    }
    // Load/store register, register offset (LSL/UXTX option only)
    if raw & 0x3F20_0C00 == 0x3820_0800 {
        let size = ((raw >> 30) & 3) as u8;
        let opc = (raw >> 22) & 3;
        let (load, sign_ext) = match (size, opc) {
            (_, 0b00) => (false, false),
            (_, 0b01) => (true, false),
            (2, 0b10) => (true, true),
            _ => return Err(DecodeError::Unsupported),
        };
        let option = (raw >> 13) & 7;
        if option != 0b011 {
            return Err(DecodeError::Unsupported);
        }
        return Ok(Insn::LdStReg {
            size,
            load,
            sign_extend: sign_ext,
            rt: (raw & 31) as u8,
            rn: ((raw >> 5) & 31) as u8,
            rm: ((raw >> 16) & 31) as u8,
            scaled: raw & (1 << 12) != 0,
        });
    }
    // Load/store pair
    if raw & 0x3C00_0000 == 0x2800_0000 {
        let sf = match (raw >> 30) & 3 {
            0b00 => false,
            0b10 => true,
            _ => return Err(DecodeError::Unsupported),
        };
        let mode = match (raw >> 23) & 7 {
            0b001 => PairMode::Post,
            0b010 => PairMode::Offset,
            0b011 => PairMode::Pre,
            _ => return Err(DecodeError::Unsupported),
        };
        let scale = if sf { 3 } else { 2 };
        let imm7 = sign_extend(((raw >> 15) & 0x7F) as u64, 7) << scale;
        return Ok(Insn::LdStPair {
            sf,
            load: raw & (1 << 22) != 0,
            rt: (raw & 31) as u8,
            rt2: ((raw >> 10) & 31) as u8,
            rn: ((raw >> 5) & 31) as u8,
            imm7,
            mode,
        });
    }
    Err(DecodeError::Unsupported)
}

fn truncate(val: u64, sf: bool) -> u64 {
    if sf {
        val
    } else {
        val & 0xFFFF_FFFF
    }
}

fn apply_shift(val: u64, shift: Shift, amount: u8, sf: bool) -> u64 {
    let size = if sf { 64 } else { 32 };
    let amount = amount as u32 % size;
    let v = truncate(val, sf);
    let out = match shift {
        Shift::Lsl => v.wrapping_shl(amount),
        Shift::Lsr => v.wrapping_shr(amount),
        Shift::Asr => {
            if sf {
                ((v as i64) >> amount) as u64
            } else {
                (((v as u32) as i32) >> amount) as u32 as u64
            }
        }
    };
    truncate(out, sf)
}

struct Flags {
    n: bool,
    z: bool,
    c: bool,
    v: bool,
}

fn add_with_flags(a: u64, b: u64, carry_in: bool, sf: bool) -> (u64, Flags) {
    if sf {
        let (s1, c1) = a.overflowing_add(b);
        let (sum, c2) = s1.overflowing_add(carry_in as u64);
        let n = sum >> 63 == 1;
        let z = sum == 0;
        let c = c1 || c2;
        let v = ((a ^ sum) & (b ^ sum)) >> 63 == 1;
        (sum, Flags { n, z, c, v })
    } else {
        let a = a as u32;
        let b = b as u32;
        let (s1, c1) = a.overflowing_add(b);
        let (sum, c2) = s1.overflowing_add(carry_in as u32);
        let n = sum >> 31 == 1;
        let z = sum == 0;
        let c = c1 || c2;
        let v = ((a ^ sum) & (b ^ sum)) >> 31 == 1;
        (sum as u64, Flags { n, z, c, v })
    }
}

pub(super) fn execute(
    insn: &Insn,
    regs: &mut RegisterFile,
    space: &mut AddressSpace,
) -> Result<StepEffects, Fault> {
    let pc = regs.pc;
    let mut effects = StepEffects::default();
    let mut next_pc = pc.wrapping_add(4);

    macro_rules! branch_to {
        ($target:expr) => {{
            next_pc = $target;
            effects.branch = Some(next_pc);
        }};
    }

    match *insn {
        Insn::Nop => {}
        Insn::Svc { imm } => {
            // Delivered to Syscall hooks by the run loop; architecturally a
            // no-op in this world.
            effects.syscall = Some(imm);
        }
        Insn::MovZ { sf, rd, imm16, hw } => {
            regs.set_x(rd, truncate((imm16 as u64) << (16 * hw as u64), sf));
        }
        Insn::MovN { sf, rd, imm16, hw } => {
            regs.set_x(rd, truncate(!((imm16 as u64) << (16 * hw as u64)), sf));
        }
        Insn::MovK { sf, rd, imm16, hw } => {
            let shift = 16 * hw as u64;
            let keep = regs.x_or_zero(rd) & !(0xFFFFu64 << shift);
            regs.set_x(rd, truncate(keep | ((imm16 as u64) << shift), sf));
        }
        Insn::AddSubImm { sf, sub, set_flags, rd, rn, imm12, shift12 } => {
            let a = truncate(regs.x_or_sp(rn), sf);
            let imm = (imm12 as u64) << if shift12 { 12 } else { 0 };
            let b = if sub { truncate(!imm, sf) } else { imm };
            let (result, flags) = add_with_flags(a, b, sub, sf);
            if set_flags {
                regs.n = flags.n;
                regs.z = flags.z;
                regs.c = flags.c;
                regs.v = flags.v;
                regs.set_x(rd, result); // Rd = 31 is XZR when flags are set (CMP/CMN)
            } else {
                regs.set_x_or_sp(rd, result);
            }
        }
        Insn::AddSubReg { sf, sub, set_flags, rd, rn, rm, shift, amount } => {
            let a = truncate(regs.x_or_zero(rn), sf);
            let m = apply_shift(regs.x_or_zero(rm), shift, amount, sf);
            let b = if sub { truncate(!m, sf) } else { m };
            let (result, flags) = add_with_flags(a, b, sub, sf);
            if set_flags {
                regs.n = flags.n;
                regs.z = flags.z;
                regs.c = flags.c;
                regs.v = flags.v;
            }
            regs.set_x(rd, result);
        }
        Insn::LogicalImm { sf, op, rd, rn, imm } => {
            let a = truncate(regs.x_or_zero(rn), sf);
            let result = match op {
                LogOp::And => a & imm,
                LogOp::Orr => a | imm,
                LogOp::Eor => a ^ imm,
            };
            regs.set_x_or_sp(rd, truncate(result, sf));
        }
        Insn::LogicalReg { sf, op, rd, rn, rm, shift, amount } => {
            let a = truncate(regs.x_or_zero(rn), sf);
            let m = apply_shift(regs.x_or_zero(rm), shift, amount, sf);
            let result = match op {
                LogOp::And => a & m,
                LogOp::Orr => a | m,
                LogOp::Eor => a ^ m,
            };
            regs.set_x(rd, truncate(result, sf));
        }
        Insn::Ubfm { sf, rd, rn, immr, imms } => {
            let size: u32 = if sf { 64 } else { 32 };
            let src = truncate(regs.x_or_zero(rn), sf);
            let result = if imms >= immr {
                // UBFX / LSR family: extract imms-immr+1 bits from bit immr.
                let width = (imms - immr + 1) as u32;
                let mask = if width == 64 { u64::MAX } else { (1u64 << width) - 1 };
                (src >> immr) & mask
            } else {
                // LSL family: Rd = Rn << (size - immr), keeping imms+1 low bits.
                let width = (imms + 1) as u32;
                let mask = if width == 64 { u64::MAX } else { (1u64 << width) - 1 };
                (src & mask).wrapping_shl(size - immr as u32)
            };
            regs.set_x(rd, truncate(result, sf));
        }
        Insn::B { offset } => branch_to!(pc.wrapping_add(offset as u64)),
        Insn::Bl { offset } => {
            regs.x[30] = pc.wrapping_add(4);
            branch_to!(pc.wrapping_add(offset as u64));
        }
        Insn::BCond { cond, offset } => {
            if cond.holds(regs) {
                branch_to!(pc.wrapping_add(offset as u64));
            }
        }
        Insn::Cbz { sf, nonzero, rt, offset } => {
            let val = truncate(regs.x_or_zero(rt), sf);
            if (val == 0) != nonzero {
                branch_to!(pc.wrapping_add(offset as u64));
            }
        }
        Insn::Br { rn } => branch_to!(regs.x_or_zero(rn)),
        Insn::Blr { rn } => {
            let target = regs.x_or_zero(rn);
            regs.x[30] = pc.wrapping_add(4);
            branch_to!(target);
        }
        Insn::Ret { rn } => branch_to!(regs.x_or_zero(rn)),
        Insn::Adr { rd, imm } => regs.set_x(rd, pc.wrapping_add(imm as u64)),
        Insn::Adrp { rd, imm } => {
            regs.set_x(rd, (pc & !0xFFF).wrapping_add(imm as u64));
        }
        Insn::LdStImm { size, load, sign_extend: sext, rt, rn, imm12 } => {
            let addr = regs.x_or_sp(rn).wrapping_add((imm12 as u64) << size);
            ld_st(regs, space, &mut effects, size, load, sext, rt, addr)?;
        }
        Insn::LdStReg { size, load, sign_extend: sext, rt, rn, rm, scaled } => {
            let offset = regs.x_or_zero(rm) << if scaled { size as u64 } else { 0 };
            let addr = regs.x_or_sp(rn).wrapping_add(offset);
            ld_st(regs, space, &mut effects, size, load, sext, rt, addr)?;
        }
        Insn::LdStPair { sf, load, rt, rt2, rn, imm7, mode } => {
            let base = regs.x_or_sp(rn);
            let addr = match mode {
                PairMode::Post => base,
                PairMode::Offset | PairMode::Pre => base.wrapping_add(imm7 as u64),
            };
            let rsize = if sf { 8u64 } else { 4 };
            if load {
                let lo = read_scalar(space, addr, rsize)?;
                let hi = read_scalar(space, addr + rsize, rsize)?;
                regs.set_x(rt, lo);
                regs.set_x(rt2, hi);
                effects.mem_access = Some((AccessKind::Read, addr, rsize * 2));
            } else {
                let lo = truncate(regs.x_or_zero(rt), sf);
                let hi = truncate(regs.x_or_zero(rt2), sf);
                write_scalar(space, addr, lo, rsize)?;
                write_scalar(space, addr + rsize, hi, rsize)?;
                effects.mem_access = Some((AccessKind::Write, addr, rsize * 2));
            }
            match mode {
                PairMode::Post => regs.set_x_or_sp(rn, base.wrapping_add(imm7 as u64)),
                PairMode::Pre => regs.set_x_or_sp(rn, addr),
                PairMode::Offset => {}
            }
        }
    }

    regs.pc = next_pc;
    Ok(effects)
}

fn read_scalar(space: &AddressSpace, addr: u64, len: u64) -> Result<u64, Fault> {
    let bytes = space.read_bytes(addr, len).map_err(Fault::from)?;
    let mut buf = [0u8; 8];
    buf[..len as usize].copy_from_slice(&bytes);
    Ok(u64::from_le_bytes(buf))
}

fn write_scalar(space: &mut AddressSpace, addr: u64, val: u64, len: u64) -> Result<(), Fault> {
    space
        .write_bytes(addr, &val.to_le_bytes()[..len as usize])
        .map_err(Fault::from)
}

#[allow(clippy::too_many_arguments)]
fn ld_st(
    regs: &mut RegisterFile,
    space: &mut AddressSpace,
    effects: &mut StepEffects,
    size: u8,
    load: bool,
    sext: bool,
    rt: u8,
    addr: u64,
) -> Result<(), Fault> {
    let len = 1u64 << size;
    if load {
        let val = read_scalar(space, addr, len)?;
        let val = if sext {
            val as u32 as i32 as i64 as u64 // LDRSW
        } else {
            val
        };
        regs.set_x(rt, val);
        effects.mem_access = Some((AccessKind::Read, addr, len));
    } else {
        let val = regs.x_or_zero(rt);
        write_scalar(space, addr, val, len)?;
        effects.mem_access = Some((AccessKind::Write, addr, len));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bitmask_decoding_known_patterns() {
        // 0xFFFF0000 (32-bit): 16 ones rotated right by 16.
        assert_eq!(decode_bit_masks(0, 15, 16, 32), Some(0xFFFF_0000));
        // 0xFFF: 12 ones.
        assert_eq!(decode_bit_masks(0, 11, 0, 32), Some(0xFFF));
        // 0xFF
        assert_eq!(decode_bit_masks(0, 7, 0, 32), Some(0xFF));
        // All ones is not encodable.
        assert_eq!(decode_bit_masks(0, 63, 0, 64), None);
    }

    #[test]
    fn undefined_vs_unsupported() {
        assert_eq!(decode(0x0000_DEAD), Err(DecodeError::Undefined));
        // FP instruction (FMOV) is outside the subset.
        assert_eq!(decode(0x1E60_4000), Err(DecodeError::Unsupported));
    }
}
