//! Typed ELF container parsing driven entirely by the program-header table and
//! the PT_DYNAMIC segment. Section headers are ignored: stripped TAs may not
//! carry any, and the QSEECom load path never looks at them either.

use thiserror::Error;

pub const ELF_MAGIC: [u8; 4] = [0x7F, b'E', b'L', b'F'];

pub const PT_LOAD: u32 = 1;
pub const PT_DYNAMIC: u32 = 2;

pub const PF_X: u32 = 1;
pub const PF_W: u32 = 2;
pub const PF_R: u32 = 4;

pub const DT_NULL: i64 = 0;
pub const DT_PLTRELSZ: i64 = 2;
pub const DT_STRTAB: i64 = 5;
pub const DT_SYMTAB: i64 = 6;
pub const DT_RELA: i64 = 7;
pub const DT_REL: i64 = 17;
pub const DT_JMPREL: i64 = 23;

pub const R_AARCH64_GLOB_DAT: u32 = 1025;
pub const R_AARCH64_JUMP_SLOT: u32 = 1026;

/// Elf64_Sym / Elf64_Rela record sizes.
pub const SYM_ENTRY_SIZE: u64 = 24;
pub const RELA_ENTRY_SIZE: u64 = 24;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ElfError {
    #[error("bad ELF magic")]
    BadMagic,
    #[error("unknown ELF class byte {0:#x}")]
    UnknownClass(u8),
    #[error("only little-endian images are supported (EI_DATA = {0:#x})")]
    UnsupportedEndianness(u8),
    #[error("phnum is the reserved escape value 0xffff")]
    ReservedPhnum,
    #[error("structure extends past end of file ({what} at offset {offset:#x})")]
    Truncated { what: &'static str, offset: u64 },
    #[error("required dynamic tag {0} missing")]
    MissingDynamicTag(&'static str),
    #[error("symbol index {0} out of range")]
    IndexOutOfRange(u64),
    #[error("string at strtab offset {0:#x} is not NUL-terminated within bounds")]
    UnterminatedString(u64),
    #[error("DT_PLTRELSZ {0:#x} is not a multiple of the Elf64_Rela record size")]
    SizeNotMultipleOfRecord(u64),
    #[error("virtual address {0:#x} is not backed by any PT_LOAD file range")]
    AddressNotBacked(u64),
    #[error("DT_REL (non-addend) relocations are not supported")]
    RelNotSupported,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElfClass {
    Elf32,
    Elf64,
}

impl ElfClass {
    pub fn header_size(self) -> usize {
        match self {
            ElfClass::Elf32 => 52,
            ElfClass::Elf64 => 64,
        }
    }

    /// File offset of e_phnum: 0x2C for class 1, 0x38 for class 2.
    pub fn phnum_offset(self) -> usize {
        match self {
            ElfClass::Elf32 => 0x2C,
            ElfClass::Elf64 => 0x38,
        }
    }

    pub fn phdr_size(self) -> usize {
        match self {
            ElfClass::Elf32 => 32,
            ElfClass::Elf64 => 56,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElfIdentity {
    pub class: ElfClass,
    pub machine: u16,
    pub entry: u64,
    pub phoff: u64,
    pub phentsize: u16,
    pub phnum: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramSegment {
    pub p_type: u32,
    pub p_flags: u32,
    pub p_offset: u64,
    pub p_vaddr: u64,
    pub p_paddr: u64,
    pub p_filesz: u64,
    pub p_memsz: u64,
    pub p_align: u64,
}

impl ProgramSegment {
    pub fn is_load(&self) -> bool {
        self.p_type == PT_LOAD
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DynamicEntry {
    pub d_tag: i64,
    pub d_val: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelocationEntry {
    pub r_offset: u64,
    pub r_info: u64,
    pub r_addend: i64,
}

impl RelocationEntry {
    pub fn symbol_index(&self) -> u64 {
        self.r_info >> 32
    }

    pub fn reloc_type(&self) -> u32 {
        self.r_info as u32
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolEntry {
    pub st_name: u32,
    pub st_info: u8,
    pub st_other: u8,
    pub st_shndx: u16,
    pub st_value: u64,
    pub st_size: u64,
    /// Name resolved out of the string table.
    pub name: String,
}

/// A parsed TA container. Immutable after parse; safe to share across readers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaImage {
    pub identity: ElfIdentity,
    pub segments: Vec<ProgramSegment>,
    pub dynamic: Vec<DynamicEntry>,
    pub raw: Vec<u8>,
}

fn read_u16(bytes: &[u8], off: usize, what: &'static str) -> Result<u16, ElfError> {
    let b = bytes
        .get(off..off + 2)
        .ok_or(ElfError::Truncated { what, offset: off as u64 })?;
    Ok(u16::from_le_bytes([b[0], b[1]]))
}

fn read_u32(bytes: &[u8], off: usize, what: &'static str) -> Result<u32, ElfError> {
    let b = bytes
        .get(off..off + 4)
        .ok_or(ElfError::Truncated { what, offset: off as u64 })?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

fn read_u64(bytes: &[u8], off: usize, what: &'static str) -> Result<u64, ElfError> {
    let b = bytes
        .get(off..off + 8)
        .ok_or(ElfError::Truncated { what, offset: off as u64 })?;
    Ok(u64::from_le_bytes(b.try_into().unwrap()))
}

/// Parse an ELF container into a [`TaImage`]. Total over arbitrary byte
/// sequences: returns a typed error rather than reading out of bounds.
pub fn parse_container(bytes: &[u8]) -> Result<TaImage, ElfError> {
    if bytes.len() < 4 || bytes[..4] != ELF_MAGIC {
        return Err(ElfError::BadMagic);
    }
    let class = match bytes.get(4) {
        Some(1) => ElfClass::Elf32,
        Some(2) => ElfClass::Elf64,
        Some(&b) => return Err(ElfError::UnknownClass(b)),
        None => return Err(ElfError::Truncated { what: "e_ident", offset: 4 }),
    };
    match bytes.get(5) {
        Some(1) => {}
        Some(&b) => return Err(ElfError::UnsupportedEndianness(b)),
        None => return Err(ElfError::Truncated { what: "e_ident", offset: 5 }),
    }
    if bytes.len() < class.header_size() {
        return Err(ElfError::Truncated { what: "ELF header", offset: bytes.len() as u64 });
    }

    let (machine, entry, phoff, phentsize) = match class {
        ElfClass::Elf64 => (
            read_u16(bytes, 0x12, "e_machine")?,
            read_u64(bytes, 0x18, "e_entry")?,
            read_u64(bytes, 0x20, "e_phoff")?,
            read_u16(bytes, 0x36, "e_phentsize")?,
        ),
        ElfClass::Elf32 => (
            read_u16(bytes, 0x12, "e_machine")?,
            read_u32(bytes, 0x18, "e_entry")? as u64,
            read_u32(bytes, 0x1C, "e_phoff")? as u64,
            read_u16(bytes, 0x2A, "e_phentsize")?,
        ),
    };
    let phnum = read_u16(bytes, class.phnum_offset(), "e_phnum")?;
    if phnum == 0xFFFF {
        return Err(ElfError::ReservedPhnum);
    }

    let identity = ElfIdentity { class, machine, entry, phoff, phentsize, phnum };

    let mut segments = Vec::with_capacity(phnum as usize);
    for i in 0..phnum as u64 {
        let off = phoff
            .checked_add(i.checked_mul(class.phdr_size() as u64).ok_or(ElfError::Truncated {
                what: "program header",
                offset: phoff,
            })?)
            .ok_or(ElfError::Truncated { what: "program header", offset: phoff })?;
        if off > usize::MAX as u64 {
            return Err(ElfError::Truncated { what: "program header", offset: off });
        }
        segments.push(parse_phdr(bytes, off as usize, class)?);
    }

    let mut dynamic = Vec::new();
    if let Some(dyn_seg) = segments.iter().find(|s| s.p_type == PT_DYNAMIC) {
        // A header-only .mdt carries the program headers but not the segment
        // contents; only parse the dynamic table when its file range is
        // actually present in this buffer.
        let backed = dyn_seg
            .p_offset
            .checked_add(dyn_seg.p_filesz)
            .is_some_and(|end| end <= bytes.len() as u64);
        if backed {
            dynamic = parse_dynamic(bytes, dyn_seg, class)?;
        }
    }

    Ok(TaImage { identity, segments, dynamic, raw: bytes.to_vec() })
}

fn parse_phdr(bytes: &[u8], off: usize, class: ElfClass) -> Result<ProgramSegment, ElfError> {
    Ok(match class {
        ElfClass::Elf64 => ProgramSegment {
            p_type: read_u32(bytes, off, "p_type")?,
            p_flags: read_u32(bytes, off + 4, "p_flags")?,
            p_offset: read_u64(bytes, off + 8, "p_offset")?,
            p_vaddr: read_u64(bytes, off + 16, "p_vaddr")?,
            p_paddr: read_u64(bytes, off + 24, "p_paddr")?,
            p_filesz: read_u64(bytes, off + 32, "p_filesz")?,
            p_memsz: read_u64(bytes, off + 40, "p_memsz")?,
            p_align: read_u64(bytes, off + 48, "p_align")?,
        },
        ElfClass::Elf32 => ProgramSegment {
            p_type: read_u32(bytes, off, "p_type")?,
            p_offset: read_u32(bytes, off + 4, "p_offset")? as u64,
            p_vaddr: read_u32(bytes, off + 8, "p_vaddr")? as u64,
            p_paddr: read_u32(bytes, off + 12, "p_paddr")? as u64,
            p_filesz: read_u32(bytes, off + 16, "p_filesz")? as u64,
            p_memsz: read_u32(bytes, off + 20, "p_memsz")? as u64,
            p_flags: read_u32(bytes, off + 24, "p_flags")?,
            p_align: read_u32(bytes, off + 28, "p_align")? as u64,
        },
    })
}

fn parse_dynamic(
    bytes: &[u8],
    seg: &ProgramSegment,
    class: ElfClass,
) -> Result<Vec<DynamicEntry>, ElfError> {
    let entry_size: u64 = match class {
        ElfClass::Elf64 => 16,
        ElfClass::Elf32 => 8,
    };
    let mut out = Vec::new();
    let end = seg
        .p_offset
        .checked_add(seg.p_filesz)
        .ok_or(ElfError::Truncated { what: "PT_DYNAMIC", offset: seg.p_offset })?;
    let mut off = seg.p_offset;
    loop {
        if off + entry_size > end {
            return Err(ElfError::Truncated { what: "dynamic entry", offset: off });
        }
        let o = off as usize;
        let (tag, val) = match class {
            ElfClass::Elf64 => (
                read_u64(bytes, o, "d_tag")? as i64,
                read_u64(bytes, o + 8, "d_val")?,
            ),
            ElfClass::Elf32 => (
                read_u32(bytes, o, "d_tag")? as i32 as i64,
                read_u32(bytes, o + 4, "d_val")? as u64,
            ),
        };
        if tag == DT_NULL {
            break;
        }
        out.push(DynamicEntry { d_tag: tag, d_val: val });
        off += entry_size;
    }
    Ok(out)
}

impl TaImage {
    pub fn dynamic_value(&self, tag: i64) -> Option<u64> {
        self.dynamic.iter().find(|e| e.d_tag == tag).map(|e| e.d_val)
    }

    /// Translate a virtual address to a file offset via the covering PT_LOAD
    /// segment's file-backed range.
    pub fn vaddr_to_offset(&self, vaddr: u64) -> Result<u64, ElfError> {
        for seg in self.segments.iter().filter(|s| s.is_load()) {
            if vaddr >= seg.p_vaddr && vaddr < seg.p_vaddr + seg.p_filesz {
                return Ok(seg.p_offset + (vaddr - seg.p_vaddr));
            }
        }
        Err(ElfError::AddressNotBacked(vaddr))
    }

    /// Read the symbol record at `symtab + SYM_ENTRY_SIZE * index` plus its
    /// name out of the string table. Index 0 is the ELF null symbol.
    pub fn symbol_at(&self, index: u64) -> Result<SymbolEntry, ElfError> {
        let symtab = self
            .dynamic_value(DT_SYMTAB)
            .ok_or(ElfError::MissingDynamicTag("DT_SYMTAB"))?;
        let strtab = self
            .dynamic_value(DT_STRTAB)
            .ok_or(ElfError::MissingDynamicTag("DT_STRTAB"))?;
        let vaddr = symtab
            .checked_add(index.checked_mul(SYM_ENTRY_SIZE).ok_or(ElfError::IndexOutOfRange(index))?)
            .ok_or(ElfError::IndexOutOfRange(index))?;
        let off = self
            .vaddr_to_offset(vaddr)
            .map_err(|_| ElfError::IndexOutOfRange(index))? as usize;
        // The record must lie entirely within the backing file region.
        if self.vaddr_to_offset(vaddr + SYM_ENTRY_SIZE - 1).is_err()
            || off + SYM_ENTRY_SIZE as usize > self.raw.len()
        {
            return Err(ElfError::IndexOutOfRange(index));
        }
        let st_name = read_u32(&self.raw, off, "st_name")?;
        let sym = SymbolEntry {
            st_name,
            st_info: self.raw[off + 4],
            st_other: self.raw[off + 5],
            st_shndx: read_u16(&self.raw, off + 6, "st_shndx")?,
            st_value: read_u64(&self.raw, off + 8, "st_value")?,
            st_size: read_u64(&self.raw, off + 16, "st_size")?,
            name: self.string_at(strtab, st_name as u64)?,
        };
        Ok(sym)
    }

    fn string_at(&self, strtab: u64, name_off: u64) -> Result<String, ElfError> {
        if name_off == 0 {
            return Ok(String::new());
        }
        let start_vaddr =
            strtab.checked_add(name_off).ok_or(ElfError::UnterminatedString(name_off))?;
        let mut off = self.vaddr_to_offset(start_vaddr)? as usize;
        // Walk within the backing segment's file range.
        let seg = self
            .segments
            .iter()
            .filter(|s| s.is_load())
            .find(|s| start_vaddr >= s.p_vaddr && start_vaddr < s.p_vaddr + s.p_filesz)
            .ok_or(ElfError::AddressNotBacked(start_vaddr))?;
        let end = ((seg.p_offset + seg.p_filesz) as usize).min(self.raw.len());
        let mut name = Vec::new();
        loop {
            if off >= end {
                return Err(ElfError::UnterminatedString(name_off));
            }
            let b = self.raw[off];
            if b == 0 {
                break;
            }
            name.push(b);
            off += 1;
        }
        Ok(String::from_utf8_lossy(&name).into_owned())
    }

    /// Number of symbol records between DT_SYMTAB and DT_STRTAB. The dynamic
    /// section carries no explicit count; the conventional symtab-then-strtab
    /// layout bounds the table.
    pub fn symbol_count(&self) -> Option<u64> {
        let symtab = self.dynamic_value(DT_SYMTAB)?;
        let strtab = self.dynamic_value(DT_STRTAB)?;
        if strtab > symtab {
            Some((strtab - symtab) / SYM_ENTRY_SIZE)
        } else {
            None
        }
    }

    /// JMPREL relocation table: DT_PLTRELSZ / 24 Elf64_Rela records read from
    /// the DT_JMPREL address. Empty when DT_JMPREL is absent.
    pub fn relocation_entries(&self) -> Result<Vec<RelocationEntry>, ElfError> {
        if self.dynamic_value(DT_REL).is_some() {
            return Err(ElfError::RelNotSupported);
        }
        let Some(jmprel) = self.dynamic_value(DT_JMPREL) else {
            return Ok(Vec::new());
        };
        let size = self
            .dynamic_value(DT_PLTRELSZ)
            .ok_or(ElfError::MissingDynamicTag("DT_PLTRELSZ"))?;
        if size % RELA_ENTRY_SIZE != 0 {
            return Err(ElfError::SizeNotMultipleOfRecord(size));
        }
        let count = size / RELA_ENTRY_SIZE;
        // Every record must be backed by file bytes, so a table claiming more
        // records than the file could hold is corrupt; checking here keeps the
        // preallocation bounded.
        if count > (self.raw.len() as u64) / RELA_ENTRY_SIZE {
            return Err(ElfError::Truncated { what: "jmprel table", offset: jmprel });
        }
        let mut out = Vec::with_capacity(count as usize);
        for i in 0..count {
            let off = self.vaddr_to_offset(jmprel + i * RELA_ENTRY_SIZE)? as usize;
            out.push(RelocationEntry {
                r_offset: read_u64(&self.raw, off, "r_offset")?,
                r_info: read_u64(&self.raw, off + 8, "r_info")?,
                r_addend: read_u64(&self.raw, off + 16, "r_addend")? as i64,
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_elf64(phnum: u16) -> Vec<u8> {
        let mut b = vec![0u8; 64 + 56 * phnum as usize];
        b[..4].copy_from_slice(&ELF_MAGIC);
        b[4] = 2; // ELFCLASS64
        b[5] = 1; // little endian
        b[0x12..0x14].copy_from_slice(&0xB7u16.to_le_bytes()); // EM_AARCH64
        b[0x20..0x28].copy_from_slice(&64u64.to_le_bytes()); // phoff
        b[0x36..0x38].copy_from_slice(&56u16.to_le_bytes());
        b[0x38..0x3A].copy_from_slice(&phnum.to_le_bytes());
        b
    }

    #[test]
    fn phnum_read_at_0x38_for_class2() {
        let img = parse_container(&minimal_elf64(3)).unwrap();
        assert_eq!(img.identity.phnum, 3);
        assert_eq!(img.segments.len(), 3);
    }

    #[test]
    fn phnum_read_at_0x2c_for_class1() {
        let mut b = vec![0u8; 52 + 32 * 2];
        b[..4].copy_from_slice(&ELF_MAGIC);
        b[4] = 1;
        b[5] = 1;
        b[0x1C..0x20].copy_from_slice(&52u32.to_le_bytes());
        b[0x2A..0x2C].copy_from_slice(&32u16.to_le_bytes());
        b[0x2C..0x2E].copy_from_slice(&2u16.to_le_bytes());
        let img = parse_container(&b).unwrap();
        assert_eq!(img.identity.class, ElfClass::Elf32);
        assert_eq!(img.identity.phnum, 2);
    }

    #[test]
    fn reserved_phnum_rejected() {
        let mut b = minimal_elf64(0);
        b[0x38..0x3A].copy_from_slice(&0xFFFFu16.to_le_bytes());
        assert_eq!(parse_container(&b), Err(ElfError::ReservedPhnum));
    }

    #[test]
    fn bad_magic_and_class() {
        assert_eq!(parse_container(b"NOPE"), Err(ElfError::BadMagic));
        let mut b = minimal_elf64(0);
        b[4] = 9;
        assert_eq!(parse_container(&b), Err(ElfError::UnknownClass(9)));
        let mut b = minimal_elf64(0);
        b[5] = 2;
        assert_eq!(parse_container(&b), Err(ElfError::UnsupportedEndianness(2)));
    }

    #[test]
    fn truncated_phdr_table() {
        let mut b = minimal_elf64(1);
        b.truncate(80);
        assert!(matches!(parse_container(&b), Err(ElfError::Truncated { .. })));
    }
}
