//! Render a parsed container as a stable, human-readable summary: identity,
//! program headers, dynamic entries, and the symbol/relocation tables when
//! present. Total over arbitrary input by construction — it only consumes
//! what [`crate::elf::parse_container`] produced.

use std::fmt::Write;

use crate::elf::{self, ElfClass, ElfError, TaImage};

fn class_name(class: ElfClass) -> &'static str {
    match class {
        ElfClass::Elf32 => "ELF32",
        ElfClass::Elf64 => "ELF64",
    }
}

fn flags_str(p_flags: u32) -> String {
    let mut s = String::new();
    s.push(if p_flags & elf::PF_R != 0 { 'r' } else { '-' });
    s.push(if p_flags & elf::PF_W != 0 { 'w' } else { '-' });
    s.push(if p_flags & elf::PF_X != 0 { 'x' } else { '-' });
    s
}

fn type_name(p_type: u32) -> String {
    match p_type {
        elf::PT_LOAD => "LOAD".to_string(),
        elf::PT_DYNAMIC => "DYNAMIC".to_string(),
        other => format!("{other:#x}"),
    }
}

fn tag_name(tag: i64) -> String {
    match tag {
        elf::DT_PLTRELSZ => "PLTRELSZ".to_string(),
        elf::DT_STRTAB => "STRTAB".to_string(),
        elf::DT_SYMTAB => "SYMTAB".to_string(),
        elf::DT_RELA => "RELA".to_string(),
        elf::DT_REL => "REL".to_string(),
        elf::DT_JMPREL => "JMPREL".to_string(),
        other => format!("{other:#x}"),
    }
}

pub fn render(bytes: &[u8]) -> Result<String, ElfError> {
    let image = elf::parse_container(bytes)?;
    Ok(render_image(&image))
}

pub fn render_image(image: &TaImage) -> String {
    let mut out = String::new();
    let id = &image.identity;
    let _ = writeln!(
        out,
        "{} machine={:#x} entry={:#x} phoff={:#x} phentsize={} phnum={}",
        class_name(id.class),
        id.machine,
        id.entry,
        id.phoff,
        id.phentsize,
        id.phnum
    );

    let _ = writeln!(out, "segments:");
    for (i, seg) in image.segments.iter().enumerate() {
        let _ = writeln!(
            out,
            "  [{i:2}] {:<8} off={:#010x} vaddr={:#010x} filesz={:#8x} memsz={:#8x} {}",
            type_name(seg.p_type),
            seg.p_offset,
            seg.p_vaddr,
            seg.p_filesz,
            seg.p_memsz,
            flags_str(seg.p_flags)
        );
    }

    if !image.dynamic.is_empty() {
        let _ = writeln!(out, "dynamic:");
        for entry in &image.dynamic {
            let _ = writeln!(out, "  {:<10} {:#x}", tag_name(entry.d_tag), entry.d_val);
        }
    }

    if let Some(count) = image.symbol_count() {
        let _ = writeln!(out, "symbols ({count}):");
        for idx in 0..count {
            match image.symbol_at(idx) {
                Ok(sym) => {
                    let kind = if sym.st_shndx == 0 { "UND" } else { "DEF" };
                    let _ = writeln!(
                        out,
                        "  [{idx:3}] {kind} value={:#010x} {}",
                        sym.st_value,
                        if sym.name.is_empty() { "<anonymous>" } else { &sym.name }
                    );
                }
                Err(e) => {
                    // The count is inferred from strtab - symtab; on corrupt
                    // images it can be absurd, so stop at the first record
                    // that falls outside the file.
                    let _ = writeln!(out, "  [{idx:3}] <unreadable: {e}>");
                    break;
                }
            }
        }
    }

    match image.relocation_entries() {
        Ok(relocs) if !relocs.is_empty() => {
            let _ = writeln!(out, "jmprel relocations ({}):", relocs.len());
            for rel in relocs {
                let name = image
                    .symbol_at(rel.symbol_index())
                    .map(|s| s.name)
                    .unwrap_or_else(|_| "<bad symbol>".to_string());
                let _ = writeln!(
                    out,
                    "  offset={:#010x} type={} sym={} ({name})",
                    rel.r_offset,
                    rel.reloc_type(),
                    rel.symbol_index()
                );
            }
        }
        Ok(_) => {}
        Err(e) => {
            let _ = writeln!(out, "jmprel relocations: <error: {e}>");
        }
    }
    out
}
