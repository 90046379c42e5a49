//! Map PT_LOAD segments into an address space and perform eager symbol
//! resolution: walk the JMPREL relocations, look up names in dependency
//! images, and patch GOT slots. Unresolved imports get synthetic trap stubs
//! that raise a StubCall event instead of an unmapped fetch.
//!
//! Eager (load-time) binding replaces the lazy binding a real runtime linker
//! would perform; no linker exists in the emulated world.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::cpu::RegisterFile;
use crate::elf::{
    ElfError, TaImage, PF_R, PF_W, PF_X, R_AARCH64_GLOB_DAT, R_AARCH64_JUMP_SLOT,
};
use crate::mem::{AddressSpace, MemError, PAGE_SIZE, PERM_R, PERM_W, PERM_X};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error(transparent)]
    Elf(#[from] ElfError),
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error("relocation type {0} is not supported (only JUMP_SLOT/GLOB_DAT semantics)")]
    UnsupportedRelocation(u32),
    #[error("stub page exhausted")]
    StubPageExhausted,
}

#[derive(Debug, Clone)]
pub struct GotPatch {
    pub slot: u64,
    pub resolved: u64,
    pub symbol: String,
    pub via_stub: bool,
}

/// A TA or dependency image mapped into an address space.
pub struct LoadedModule {
    pub image: TaImage,
    pub base: u64,
    pub exports: BTreeMap<String, u64>,
    pub got_patches: Vec<GotPatch>,
}

pub type StubHandler = Box<dyn FnMut(&mut RegisterFile, &mut AddressSpace)>;

/// Registry of synthetic executable addresses standing in for unresolved
/// imports. Executing one raises a StubCall event; a registered handler may
/// write results and force a return to the link register, and the default
/// behavior returns 0 in x0 and resumes at the link register.
pub struct StubRegistry {
    base: u64,
    capacity: u64,
    next: u64,
    bindings: HashMap<u64, String>,
    handlers: HashMap<String, StubHandler>,
}

pub const STUB_REGION_BASE: u64 = 0x7000_0000;

impl StubRegistry {
    /// Create the registry and map its executable trap page.
    pub fn new(space: &mut AddressSpace) -> Result<Self, MemError> {
        space.map_region(STUB_REGION_BASE, PAGE_SIZE, PERM_R | PERM_X, "stubs")?;
        Ok(StubRegistry {
            base: STUB_REGION_BASE,
            capacity: PAGE_SIZE / 8,
            next: 0,
            bindings: HashMap::new(),
            handlers: HashMap::new(),
        })
    }

    /// A registry with no trap page; used where no imports exist.
    pub fn new_unmapped() -> Self {
        StubRegistry {
            base: STUB_REGION_BASE,
            capacity: 0,
            next: 0,
            bindings: HashMap::new(),
            handlers: HashMap::new(),
        }
    }

    pub fn allocate(&mut self, name: &str) -> Result<u64, LoadError> {
        // One stub per name; re-imports share the address.
        if let Some((addr, _)) = self.bindings.iter().find(|(_, n)| n.as_str() == name) {
            return Ok(*addr);
        }
        if self.next >= self.capacity {
            return Err(LoadError::StubPageExhausted);
        }
        let addr = self.base + self.next * 8;
        self.next += 1;
        self.bindings.insert(addr, name.to_string());
        Ok(addr)
    }

    pub fn binding_at(&self, addr: u64) -> Option<String> {
        self.bindings.get(&addr).cloned()
    }

    pub fn register_handler(&mut self, name: &str, handler: StubHandler) {
        self.handlers.insert(name.to_string(), handler);
    }

    /// Run the handler for `name` (or the default stub behavior) and return
    /// control to the link register unless the handler redirected pc itself.
    pub fn invoke(&mut self, name: &str, regs: &mut RegisterFile, space: &mut AddressSpace) {
        let stub_pc = regs.pc;
        match self.handlers.get_mut(name) {
            Some(handler) => handler(regs, space),
            None => regs.x[0] = 0,
        }
        if regs.pc == stub_pc {
            regs.pc = regs.x[30];
        }
    }
}

fn page_down(addr: u64) -> u64 {
    addr & !(PAGE_SIZE - 1)
}

fn page_up(addr: u64) -> u64 {
    addr.checked_add(PAGE_SIZE - 1).map(page_down).unwrap_or(u64::MAX & !(PAGE_SIZE - 1))
}

fn perms_from_flags(p_flags: u32) -> u8 {
    let mut perms = 0;
    if p_flags & PF_R != 0 {
        perms |= PERM_R;
    }
    if p_flags & PF_W != 0 {
        perms |= PERM_W;
    }
    if p_flags & PF_X != 0 {
        perms |= PERM_X;
    }
    perms
}

/// Map each PT_LOAD segment of `image` at `base + p_vaddr` with permissions
/// from p_flags, copy the file bytes, and leave the [filesz, memsz) tail
/// zeroed. Non-PT_LOAD segments are not mapped. Exports are collected from the
/// dynamic symbol table when one is present.
pub fn load_image(
    space: &mut AddressSpace,
    image: TaImage,
    base: u64,
) -> Result<LoadedModule, LoadError> {
    for seg in image.segments.iter().filter(|s| s.is_load()) {
        let vaddr = base + seg.p_vaddr;
        let start = page_down(vaddr);
        let end = page_up(vaddr + seg.p_memsz);
        let label = segment_label(seg.p_flags);
        space.map_region(start, end - start, perms_from_flags(seg.p_flags), label)?;
        let file_start = seg.p_offset as usize;
        let file_end = file_start + seg.p_filesz as usize;
        if file_end > image.raw.len() {
            return Err(LoadError::Elf(ElfError::Truncated {
                what: "segment contents",
                offset: seg.p_offset,
            }));
        }
        write_ignoring_perms(space, vaddr, &image.raw[file_start..file_end]);
    }

    let mut exports = BTreeMap::new();
    if let Some(count) = image.symbol_count() {
        for idx in 0..count {
            match image.symbol_at(idx) {
                Ok(sym) if sym.st_shndx != 0 && sym.st_value != 0 && !sym.name.is_empty() => {
                    exports.insert(sym.name, base + sym.st_value);
                }
                _ => {}
            }
        }
    }

    Ok(LoadedModule { image, base, exports, got_patches: Vec::new() })
}

fn segment_label(p_flags: u32) -> &'static str {
    match (p_flags & PF_X != 0, p_flags & PF_W != 0) {
        (true, _) => "text",
        (false, true) => "data",
        (false, false) => "rodata",
    }
}

/// Initial segment population may target read-only regions; poke the backing
/// bytes through a temporary writable view.
fn write_ignoring_perms(space: &mut AddressSpace, addr: u64, bytes: &[u8]) {
    // Regions are freshly mapped and zero-filled; bypass the permission check
    // by staging through a scratch copy of the region table.
    space.write_bytes_unchecked(addr, bytes);
}

/// Walk the TA's JMPREL relocations: recover the symbol index via
/// `r_info >> 32`, read its name from the string table, search the dependency
/// list in order (first match wins), and patch the GOT slot with the resolved
/// address — or with a freshly allocated stub when no dependency exports the
/// name.
pub fn resolve_imports(
    space: &mut AddressSpace,
    ta: &mut LoadedModule,
    deps: &[&LoadedModule],
    stubs: &mut StubRegistry,
) -> Result<Vec<GotPatch>, LoadError> {
    let relocations = ta.image.relocation_entries()?;
    let mut patches = Vec::with_capacity(relocations.len());
    for rel in relocations {
        match rel.reloc_type() {
            R_AARCH64_JUMP_SLOT | R_AARCH64_GLOB_DAT => {}
            other => return Err(LoadError::UnsupportedRelocation(other)),
        }
        let sym = ta.image.symbol_at(rel.symbol_index())?;
        let slot = ta.base + rel.r_offset;
        let (resolved, via_stub) = match deps.iter().find_map(|d| d.exports.get(&sym.name)) {
            Some(addr) => (*addr, false),
            None => (stubs.allocate(&sym.name)?, true),
        };
        space.write_u64(slot, resolved)?;
        let patch = GotPatch { slot, resolved, symbol: sym.name, via_stub };
        patches.push(patch.clone());
        ta.got_patches.push(patch);
    }
    Ok(patches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elf::parse_container;
    use crate::fixture;

    #[test]
    fn load_maps_only_pt_load_and_zero_fills_bss() {
        let fx = fixture::vulnerable_ta(&fixture::FixtureManifest::vulnerable_ta_default());
        let image = parse_container(&fx.elf).unwrap();
        let mut space = AddressSpace::new();
        let module = load_image(&mut space, image, 0).unwrap();
        // One region per PT_LOAD, none for PT_DYNAMIC.
        let loads = module.image.segments.iter().filter(|s| s.is_load()).count();
        assert_eq!(space.regions().len(), loads);
        // The data segment's memsz tail reads as zeros.
        let data_seg = module
            .image
            .segments
            .iter()
            .find(|s| s.is_load() && s.p_memsz > s.p_filesz)
            .expect("fixture has a bss tail");
        let tail = space
            .read_bytes(data_seg.p_vaddr + data_seg.p_filesz, data_seg.p_memsz - data_seg.p_filesz)
            .unwrap();
        assert!(tail.iter().all(|&b| b == 0));
    }

    #[test]
    fn overlapping_loads_rejected() {
        let fx = fixture::vulnerable_ta(&fixture::FixtureManifest::vulnerable_ta_default());
        let image = parse_container(&fx.elf).unwrap();
        let mut space = AddressSpace::new();
        load_image(&mut space, image.clone(), 0).unwrap();
        assert!(matches!(
            load_image(&mut space, image, 0),
            Err(LoadError::Mem(MemError::Overlap { .. }))
        ));
    }

    #[test]
    fn imports_resolve_against_dep_exports_first_match_wins() {
        let manifest = fixture::FixtureManifest::vulnerable_ta_default();
        let fx = fixture::vulnerable_ta(&manifest);
        let dep = fixture::dependency_lib(&fixture::DepLibManifest::default_lib());
        let mut space = AddressSpace::new();
        let mut ta = load_image(&mut space, parse_container(&fx.elf).unwrap(), 0).unwrap();
        let dep_mod = load_image(&mut space, parse_container(&dep.elf).unwrap(), 0).unwrap();
        let mut stubs = StubRegistry::new(&mut space).unwrap();
        let patches = resolve_imports(&mut space, &mut ta, &[&dep_mod], &mut stubs).unwrap();
        assert_eq!(patches.len(), ta.image.relocation_entries().unwrap().len());
        // Every slot now holds either a dep export address or a stub address.
        for p in &patches {
            let slot_val = space.read_u64(p.slot).unwrap();
            assert_eq!(slot_val, p.resolved);
            if p.via_stub {
                assert!(stubs.binding_at(p.resolved).is_some());
            } else {
                assert_eq!(dep_mod.exports[&p.symbol], p.resolved);
            }
        }
        // The withheld import went to a stub.
        assert!(patches.iter().any(|p| p.symbol == "qsee_log" && p.via_stub));
    }

    #[test]
    fn zero_relocations_is_a_no_op() {
        let dep = fixture::dependency_lib(&fixture::DepLibManifest::default_lib());
        let mut space = AddressSpace::new();
        let mut module = load_image(&mut space, parse_container(&dep.elf).unwrap(), 0).unwrap();
        let mut stubs = StubRegistry::new(&mut space).unwrap();
        let patches = resolve_imports(&mut space, &mut module, &[], &mut stubs).unwrap();
        assert!(patches.is_empty());
    }
}
