//! Hand-rolled instruction encoders for the supported subset plus a tiny
//! two-pass label assembler. Fixtures are assembled with these instead of an
//! external toolchain, and the encoders double as decoder test vectors.

use std::collections::HashMap;

pub mod cond {
    pub const EQ: u32 = 0b0000;
    pub const NE: u32 = 0b0001;
    pub const HS: u32 = 0b0010;
    pub const LO: u32 = 0b0011;
    pub const GE: u32 = 0b1010;
    pub const LT: u32 = 0b1011;
    pub const GT: u32 = 0b1100;
    pub const LE: u32 = 0b1101;
    pub const AL: u32 = 0b1110;
}

fn sf_bit(sf: bool) -> u32 {
    (sf as u32) << 31
}

pub fn movz(rd: u32, imm16: u32, hw: u32, sf: bool) -> u32 {
    sf_bit(sf) | 0b10 << 29 | 0b100101 << 23 | hw << 21 | imm16 << 5 | rd
}

pub fn movn(rd: u32, imm16: u32, hw: u32, sf: bool) -> u32 {
    sf_bit(sf) | 0b100101 << 23 | hw << 21 | imm16 << 5 | rd
}

pub fn movk(rd: u32, imm16: u32, hw: u32, sf: bool) -> u32 {
    sf_bit(sf) | 0b11 << 29 | 0b100101 << 23 | hw << 21 | imm16 << 5 | rd
}

fn addsub_imm(rd: u32, rn: u32, imm12: u32, shift12: bool, sub: bool, flags: bool, sf: bool) -> u32 {
    sf_bit(sf)
        | (sub as u32) << 30
        | (flags as u32) << 29
        | 0b100010 << 23
        | (shift12 as u32) << 22
        | imm12 << 10
        | rn << 5
        | rd
}

pub fn add_imm(rd: u32, rn: u32, imm12: u32, shift12: bool, sf: bool) -> u32 {
    addsub_imm(rd, rn, imm12, shift12, false, false, sf)
}

pub fn sub_imm(rd: u32, rn: u32, imm12: u32, shift12: bool, sf: bool) -> u32 {
    addsub_imm(rd, rn, imm12, shift12, true, false, sf)
}

pub fn subs_imm(rd: u32, rn: u32, imm12: u32, sf: bool) -> u32 {
    addsub_imm(rd, rn, imm12, false, true, true, sf)
}

/// CMP Rn, #imm — alias of SUBS with the zero register destination.
pub fn cmp_imm(rn: u32, imm12: u32, sf: bool) -> u32 {
    subs_imm(31, rn, imm12, sf)
}

fn addsub_reg(rd: u32, rn: u32, rm: u32, shift: u32, amount: u32, sub: bool, flags: bool, sf: bool) -> u32 {
    sf_bit(sf)
        | (sub as u32) << 30
        | (flags as u32) << 29
        | 0b01011 << 24
        | shift << 22
        | rm << 16
        | amount << 10
        | rn << 5
        | rd
}

pub fn add_reg(rd: u32, rn: u32, rm: u32, sf: bool) -> u32 {
    addsub_reg(rd, rn, rm, 0, 0, false, false, sf)
}

pub fn add_reg_lsl(rd: u32, rn: u32, rm: u32, amount: u32, sf: bool) -> u32 {
    addsub_reg(rd, rn, rm, 0, amount, false, false, sf)
}

pub fn sub_reg(rd: u32, rn: u32, rm: u32, sf: bool) -> u32 {
    addsub_reg(rd, rn, rm, 0, 0, true, false, sf)
}

pub fn subs_reg(rd: u32, rn: u32, rm: u32, sf: bool) -> u32 {
    addsub_reg(rd, rn, rm, 0, 0, true, true, sf)
}

/// CMP Rn, Rm.
pub fn cmp_reg(rn: u32, rm: u32, sf: bool) -> u32 {
    subs_reg(31, rn, rm, sf)
}

fn logical_imm(opc: u32, rd: u32, rn: u32, n: u32, immr: u32, imms: u32, sf: bool) -> u32 {
    sf_bit(sf) | opc << 29 | 0b100100 << 23 | n << 22 | immr << 16 | imms << 10 | rn << 5 | rd
}

/// AND with a bitmask immediate given as raw (N, immr, imms) fields.
pub fn and_imm(rd: u32, rn: u32, n: u32, immr: u32, imms: u32, sf: bool) -> u32 {
    logical_imm(0b00, rd, rn, n, immr, imms, sf)
}

pub fn orr_imm(rd: u32, rn: u32, n: u32, immr: u32, imms: u32, sf: bool) -> u32 {
    logical_imm(0b01, rd, rn, n, immr, imms, sf)
}

pub fn eor_imm(rd: u32, rn: u32, n: u32, immr: u32, imms: u32, sf: bool) -> u32 {
    logical_imm(0b10, rd, rn, n, immr, imms, sf)
}

fn logical_reg(opc: u32, rd: u32, rn: u32, rm: u32, shift: u32, amount: u32, sf: bool) -> u32 {
    sf_bit(sf) | opc << 29 | 0b01010 << 24 | shift << 22 | rm << 16 | amount << 10 | rn << 5 | rd
}

pub fn and_reg(rd: u32, rn: u32, rm: u32, sf: bool) -> u32 {
    logical_reg(0b00, rd, rn, rm, 0, 0, sf)
}

pub fn orr_reg(rd: u32, rn: u32, rm: u32, sf: bool) -> u32 {
    logical_reg(0b01, rd, rn, rm, 0, 0, sf)
}

pub fn eor_reg(rd: u32, rn: u32, rm: u32, sf: bool) -> u32 {
    logical_reg(0b10, rd, rn, rm, 0, 0, sf)
}

/// MOV Rd, Rm — alias of ORR Rd, ZR, Rm.
pub fn mov_reg(rd: u32, rm: u32, sf: bool) -> u32 {
    orr_reg(rd, 31, rm, sf)
}

pub fn ubfm(rd: u32, rn: u32, immr: u32, imms: u32, sf: bool) -> u32 {
    sf_bit(sf)
        | 0b10 << 29
        | 0b100110 << 23
        | (sf as u32) << 22
        | immr << 16
        | imms << 10
        | rn << 5
        | rd
}

pub fn lsl_imm(rd: u32, rn: u32, shift: u32, sf: bool) -> u32 {
    let size = if sf { 64 } else { 32 };
    ubfm(rd, rn, (size - shift) % size, size - 1 - shift, sf)
}

pub fn lsr_imm(rd: u32, rn: u32, shift: u32, sf: bool) -> u32 {
    let size = if sf { 64 } else { 32 };
    ubfm(rd, rn, shift, size - 1, sf)
}

pub fn b(offset: i64) -> u32 {
    0b000101 << 26 | ((offset >> 2) as u32 & 0x03FF_FFFF)
}

pub fn bl(offset: i64) -> u32 {
    1 << 31 | b(offset)
}

pub fn b_cond(cond: u32, offset: i64) -> u32 {
    0x5400_0000 | (((offset >> 2) as u32 & 0x7FFFF) << 5) | cond
}

pub fn cbz(rt: u32, offset: i64, sf: bool) -> u32 {
    sf_bit(sf) | 0b011010 << 25 | (((offset >> 2) as u32 & 0x7FFFF) << 5) | rt
}

pub fn cbnz(rt: u32, offset: i64, sf: bool) -> u32 {
    cbz(rt, offset, sf) | 1 << 24
}

pub fn br(rn: u32) -> u32 {
    0xD61F_0000 | rn << 5
}

pub fn blr(rn: u32) -> u32 {
    0xD63F_0000 | rn << 5
}

pub fn ret() -> u32 {
    0xD65F_0000 | 30 << 5
}

pub fn adr(rd: u32, imm: i64) -> u32 {
    let imm = imm as u32 & 0x1F_FFFF;
    ((imm & 3) << 29) | 0b10000 << 24 | ((imm >> 2) << 5) | rd
}

pub fn adrp(rd: u32, page_delta: i64) -> u32 {
    1 << 31 | adr(rd, page_delta)
}

fn ldst_imm(size: u32, opc: u32, rt: u32, rn: u32, imm_scaled: u32) -> u32 {
    size << 30 | 0b111001 << 24 | opc << 22 | imm_scaled << 10 | rn << 5 | rt
}

/// LDR with unsigned scaled immediate; `size` selects B/H/W/X (0..3), the
/// immediate is in units of the access size.
pub fn ldr_imm(rt: u32, rn: u32, imm_units: u32, size: u32) -> u32 {
    ldst_imm(size, 0b01, rt, rn, imm_units)
}

pub fn str_imm(rt: u32, rn: u32, imm_units: u32, size: u32) -> u32 {
    ldst_imm(size, 0b00, rt, rn, imm_units)
}

pub fn ldrsw_imm(rt: u32, rn: u32, imm_units: u32) -> u32 {
    ldst_imm(2, 0b10, rt, rn, imm_units)
}

fn ldst_reg(size: u32, opc: u32, rt: u32, rn: u32, rm: u32, scaled: bool) -> u32 {
    size << 30
        | 0b111000 << 24
        | opc << 22
        | 1 << 21
        | rm << 16
        | 0b011 << 13
        | (scaled as u32) << 12
        | 0b10 << 10
        | rn << 5
        | rt
}

pub fn ldr_reg(rt: u32, rn: u32, rm: u32, size: u32, scaled: bool) -> u32 {
    ldst_reg(size, 0b01, rt, rn, rm, scaled)
}

pub fn str_reg(rt: u32, rn: u32, rm: u32, size: u32, scaled: bool) -> u32 {
    ldst_reg(size, 0b00, rt, rn, rm, scaled)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairIdx {
    Post,
    Offset,
    Pre,
}

fn ldst_pair(rt: u32, rt2: u32, rn: u32, imm_bytes: i64, mode: PairIdx, load: bool, sf: bool) -> u32 {
    let opc = if sf { 0b10 } else { 0b00 };
    let mode_bits = match mode {
        PairIdx::Post => 0b001,
        PairIdx::Offset => 0b010,
        PairIdx::Pre => 0b011,
    };
    let scale = if sf { 3 } else { 2 };
    let imm7 = ((imm_bytes >> scale) as u32) & 0x7F;
    opc << 30
        | 0b101 << 27
        | mode_bits << 23
        | (load as u32) << 22
        | imm7 << 15
        | rt2 << 10
        | rn << 5
        | rt
}

pub fn stp(rt: u32, rt2: u32, rn: u32, imm_bytes: i64, mode: PairIdx, sf: bool) -> u32 {
    ldst_pair(rt, rt2, rn, imm_bytes, mode, false, sf)
}

pub fn ldp(rt: u32, rt2: u32, rn: u32, imm_bytes: i64, mode: PairIdx, sf: bool) -> u32 {
    ldst_pair(rt, rt2, rn, imm_bytes, mode, true, sf)
}

pub fn nop() -> u32 {
    0xD503_201F
}

pub fn svc(imm: u32) -> u32 {
    0xD400_0001 | imm << 5
}

pub fn udf() -> u32 {
    0x0000_0000
}

/// Emit MOVZ/MOVK pairs loading an arbitrary 64-bit constant.
pub fn load_imm64(rd: u32, value: u64) -> Vec<u32> {
    let mut words = vec![movz(rd, (value & 0xFFFF) as u32, 0, true)];
    for hw in 1..4u32 {
        let part = ((value >> (16 * hw)) & 0xFFFF) as u32;
        if part != 0 {
            words.push(movk(rd, part, hw, true));
        }
    }
    words
}

#[derive(Debug, Clone, Copy)]
enum Fixup {
    B,
    Bl,
    BCond(u32),
    Cbz { rt: u32, sf: bool, nonzero: bool },
}

/// Two-pass assembler with named labels, used by the fixture generator.
pub struct Assembler {
    base: u64,
    words: Vec<u32>,
    labels: HashMap<String, u64>,
    fixups: Vec<(usize, Fixup, String)>,
}

impl Assembler {
    pub fn new(base: u64) -> Self {
        Assembler { base, words: Vec::new(), labels: HashMap::new(), fixups: Vec::new() }
    }

    pub fn here(&self) -> u64 {
        self.base + self.words.len() as u64 * 4
    }

    pub fn label(&mut self, name: &str) {
        let addr = self.here();
        assert!(
            self.labels.insert(name.to_string(), addr).is_none(),
            "duplicate label {name}"
        );
    }

    pub fn label_addr(&self, name: &str) -> u64 {
        self.labels[name]
    }

    pub fn push(&mut self, word: u32) {
        self.words.push(word);
    }

    pub fn push_all(&mut self, words: &[u32]) {
        self.words.extend_from_slice(words);
    }

    pub fn b_to(&mut self, label: &str) {
        self.fixups.push((self.words.len(), Fixup::B, label.to_string()));
        self.words.push(0);
    }

    pub fn bl_to(&mut self, label: &str) {
        self.fixups.push((self.words.len(), Fixup::Bl, label.to_string()));
        self.words.push(0);
    }

    pub fn b_cond_to(&mut self, cond: u32, label: &str) {
        self.fixups.push((self.words.len(), Fixup::BCond(cond), label.to_string()));
        self.words.push(0);
    }

    pub fn cbz_to(&mut self, rt: u32, sf: bool, label: &str) {
        self.fixups
            .push((self.words.len(), Fixup::Cbz { rt, sf, nonzero: false }, label.to_string()));
        self.words.push(0);
    }

    pub fn cbnz_to(&mut self, rt: u32, sf: bool, label: &str) {
        self.fixups
            .push((self.words.len(), Fixup::Cbz { rt, sf, nonzero: true }, label.to_string()));
        self.words.push(0);
    }

    pub fn finish(mut self) -> (Vec<u32>, HashMap<String, u64>) {
        for (idx, fixup, label) in &self.fixups {
            let target = *self
                .labels
                .get(label)
                .unwrap_or_else(|| panic!("undefined label {label}"));
            let pc = self.base + *idx as u64 * 4;
            let offset = target as i64 - pc as i64;
            self.words[*idx] = match fixup {
                Fixup::B => b(offset),
                Fixup::Bl => bl(offset),
                Fixup::BCond(c) => b_cond(*c, offset),
                Fixup::Cbz { rt, sf, nonzero: false } => cbz(*rt, offset, *sf),
                Fixup::Cbz { rt, sf, nonzero: true } => cbnz(*rt, offset, *sf),
            };
        }
        (self.words, self.labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpu::decode;
    use crate::cpu::insn::Insn;

    #[test]
    fn encoders_round_trip_through_decoder() {
        // One representative per encoding class; the golden-trace suite covers
        // the semantics in depth.
        let words = [
            movz(0, 0x1F2, 0, true),
            movk(3, 0xBEEF, 1, true),
            movn(4, 0, 0, false),
            add_imm(0, 0, 3, false, true),
            sub_imm(2, 2, 1, false, true),
            subs_imm(31, 5, 0x32, false),
            add_reg_lsl(3, 3, 1, 4, true),
            subs_reg(31, 9, 8, false),
            and_imm(9, 8, 0, 16, 15, false),
            orr_reg(1, 31, 2, true),
            eor_reg(5, 5, 5, true),
            ubfm(1, 2, 3, 63, true),
            lsl_imm(1, 2, 4, true),
            lsr_imm(1, 2, 8, false),
            b(-8),
            bl(0x1000),
            b_cond(cond::LE, 16),
            cbz(3, 12, true),
            cbnz(4, -4, false),
            br(7),
            blr(16),
            ret(),
            adr(1, 0x123),
            adrp(2, 0x2000),
            ldr_imm(0, 1, 2, 3),
            str_imm(0, 1, 0, 0),
            ldrsw_imm(2, 3, 1),
            ldr_reg(4, 5, 6, 0, false),
            str_reg(7, 8, 9, 3, true),
            stp(29, 30, 31, -16, PairIdx::Pre, true),
            ldp(29, 30, 31, 16, PairIdx::Post, true),
            nop(),
            svc(0),
        ];
        for w in words {
            decode(w).unwrap_or_else(|e| panic!("{w:#010x} failed to decode: {e:?}"));
        }
        assert!(matches!(decode(movz(7, 0x1F2, 0, true)), Ok(Insn::MovZ { rd: 7, imm16: 0x1F2, hw: 0, sf: true })));
        assert!(matches!(decode(udf()), Err(_)));
    }

    #[test]
    fn assembler_resolves_forward_and_backward_labels() {
        let mut a = Assembler::new(0x1000);
        a.label("start");
        a.b_to("end");
        a.push(nop());
        a.label("end");
        a.b_to("start");
        let (words, labels) = a.finish();
        assert_eq!(labels["end"], 0x1008);
        assert_eq!(words[0], b(8));
        assert_eq!(words[2], b(-8));
    }
}
