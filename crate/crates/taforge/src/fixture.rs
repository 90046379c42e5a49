//! Synthesize miniature TA and dependency-library ELFs used as hermetic test
//! targets: a command-dispatch switch over masked command ids, a command
//! table, import/export pairs resolved through JMPREL relocations, and a
//! deliberately vulnerable unchecked-copy function. Fixtures are assembled
//! from hand-encoded instruction words; no external toolchain is involved.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cpu::asm::{self, cond, Assembler, PairIdx};
use crate::elf::{self, ElfClass, PF_R, PF_W, PF_X, PT_DYNAMIC, PT_LOAD, R_AARCH64_JUMP_SLOT};
use crate::merge;

pub const TEXT_VADDR: u64 = 0x10000;
pub const DATA_VADDR: u64 = 0x20000;
pub const DEP_TEXT_VADDR: u64 = 0x100000;
pub const DEP_DATA_VADDR: u64 = 0x110000;
pub const INPUT_BASE: u64 = 0x200000;
pub const INPUT_REGION_LEN: u64 = 0x10000;
pub const OUTPUT_BASE: u64 = 0x400000;
pub const OUTPUT_REGION_LEN: u64 = 0x1000;
pub const STACK_BASE: u64 = 0x7F0000;
pub const STACK_LEN: u64 = 0x10000;
pub const INPUT_MAX_LEN: u64 = 64;

/// Input layout consumed by the generated command handler:
/// `[0..4)` command id, `[4..8)` session id, `[8..12)` do_decrypt,
/// `[12..16)` output offset, `[16..20)` copy length, `[20..)` payload.
pub const PAYLOAD_OFFSET: usize = 20;

struct SegSpec {
    p_type: u32,
    p_flags: u32,
    p_offset: u64,
    p_vaddr: u64,
    p_filesz: u64,
    p_memsz: u64,
    p_align: u64,
    data: Vec<u8>,
}

fn build_elf64(entry: u64, segments: &[SegSpec]) -> Vec<u8> {
    let phnum = segments.len() as u16;
    let file_len = segments
        .iter()
        .map(|s| s.p_offset + s.data.len() as u64)
        .max()
        .unwrap_or(0)
        .max(64 + 56 * phnum as u64) as usize;
    let mut out = vec![0u8; file_len];
    out[..4].copy_from_slice(&elf::ELF_MAGIC);
    out[4] = 2; // ELFCLASS64
    out[5] = 1; // little endian
    out[6] = 1; // EV_CURRENT
    out[0x10..0x12].copy_from_slice(&3u16.to_le_bytes()); // ET_DYN
    out[0x12..0x14].copy_from_slice(&0xB7u16.to_le_bytes()); // EM_AARCH64
    out[0x14..0x18].copy_from_slice(&1u32.to_le_bytes());
    out[0x18..0x20].copy_from_slice(&entry.to_le_bytes());
    out[0x20..0x28].copy_from_slice(&64u64.to_le_bytes()); // phoff
    out[0x34..0x36].copy_from_slice(&64u16.to_le_bytes()); // ehsize
    out[0x36..0x38].copy_from_slice(&56u16.to_le_bytes()); // phentsize
    out[0x38..0x3A].copy_from_slice(&phnum.to_le_bytes());
    for (i, seg) in segments.iter().enumerate() {
        let o = 64 + 56 * i;
        out[o..o + 4].copy_from_slice(&seg.p_type.to_le_bytes());
        out[o + 4..o + 8].copy_from_slice(&seg.p_flags.to_le_bytes());
        out[o + 8..o + 16].copy_from_slice(&seg.p_offset.to_le_bytes());
        out[o + 16..o + 24].copy_from_slice(&seg.p_vaddr.to_le_bytes());
        out[o + 24..o + 32].copy_from_slice(&seg.p_vaddr.to_le_bytes()); // p_paddr carried
        out[o + 32..o + 40].copy_from_slice(&seg.p_filesz.to_le_bytes());
        out[o + 40..o + 48].copy_from_slice(&seg.p_memsz.to_le_bytes());
        out[o + 48..o + 56].copy_from_slice(&seg.p_align.to_le_bytes());
        let start = seg.p_offset as usize;
        out[start..start + seg.data.len()].copy_from_slice(&seg.data);
    }
    out
}

// ---------------------------------------------------------------------------
// Dependency library
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DepLibManifest {
    pub name: String,
    /// Export name -> constant the function returns in x0.
    pub exports: Vec<(String, u64)>,
}

impl DepLibManifest {
    /// The libcmnlib.so analog the default TA fixture links against.
    pub fn default_lib() -> Self {
        DepLibManifest {
            name: "cmnlib".to_string(),
            exports: vec![
                ("qsee_rsa_encrypt".to_string(), 0x1234),
                ("qsee_rsa_decrypt".to_string(), 0x4321),
                ("qsee_hmac".to_string(), 0x7777),
            ],
        }
    }
}

pub struct DepFixture {
    pub elf: Vec<u8>,
    /// Export name -> st_value recorded in the symbol table (the manifest
    /// oracle loader tests compare against).
    pub exports: HashMap<String, u64>,
}

/// Build a dependency library whose exports are leaf functions returning a
/// recognizable constant.
pub fn dependency_lib(manifest: &DepLibManifest) -> DepFixture {
    let mut asm = Assembler::new(DEP_TEXT_VADDR);
    let mut export_addrs = Vec::new();
    for (name, ret_const) in &manifest.exports {
        export_addrs.push((name.clone(), asm.here()));
        asm.push_all(&asm::load_imm64(0, *ret_const));
        asm.push(asm::ret());
    }
    let (words, _) = asm.finish();
    let text: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();

    let defined: Vec<(String, u64)> = export_addrs.clone();
    let data = DynamicDataBuilder::new(DEP_DATA_VADDR, &[], &defined).build(&[]);

    let segments = [
        SegSpec {
            p_type: PT_LOAD,
            p_flags: PF_R | PF_X,
            p_offset: 0x1000,
            p_vaddr: DEP_TEXT_VADDR,
            p_filesz: text.len() as u64,
            p_memsz: text.len() as u64,
            p_align: 0x1000,
            data: text,
        },
        SegSpec {
            p_type: PT_LOAD,
            p_flags: PF_R | PF_W,
            p_offset: 0x2000,
            p_vaddr: DEP_DATA_VADDR,
            p_filesz: data.bytes.len() as u64,
            p_memsz: data.bytes.len() as u64,
            p_align: 0x1000,
            data: data.bytes.clone(),
        },
        SegSpec {
            p_type: PT_DYNAMIC,
            p_flags: PF_R | PF_W,
            p_offset: 0x2000 + data.dynamic_off,
            p_vaddr: DEP_DATA_VADDR + data.dynamic_off,
            p_filesz: data.dynamic_len,
            p_memsz: data.dynamic_len,
            p_align: 8,
            data: Vec::new(),
        },
    ];
    DepFixture {
        elf: build_elf64(DEP_TEXT_VADDR, &segments),
        exports: export_addrs.into_iter().collect(),
    }
}

// ---------------------------------------------------------------------------
// Dynamic-section data blob (GOT + tables + symtab + strtab + dynamic)
// ---------------------------------------------------------------------------

struct DynamicData {
    bytes: Vec<u8>,
    dynamic_off: u64,
    dynamic_len: u64,
    got_slots: Vec<u64>,
}

struct DynamicDataBuilder {
    base_vaddr: u64,
    imports: Vec<String>,
    defined: Vec<(String, u64)>,
}

impl DynamicDataBuilder {
    fn new(base_vaddr: u64, imports: &[String], defined: &[(String, u64)]) -> Self {
        DynamicDataBuilder {
            base_vaddr,
            imports: imports.to_vec(),
            defined: defined.to_vec(),
        }
    }

    /// Compute the blob layout. `prefix` is opaque content placed at the
    /// front of the segment (GOT, command table, session table).
    fn layout(&self, prefix_len: u64) -> (u64, u64, u64, u64, u64) {
        let rela_off = (prefix_len + 7) & !7;
        let rela_len = self.imports.len() as u64 * elf::RELA_ENTRY_SIZE;
        let symtab_off = rela_off + rela_len;
        let nsyms = 1 + self.imports.len() as u64 + self.defined.len() as u64;
        let strtab_off = symtab_off + nsyms * elf::SYM_ENTRY_SIZE;
        let strtab_len: u64 = 1 + self
            .imports
            .iter()
            .map(|s| s.len() as u64 + 1)
            .chain(self.defined.iter().map(|(s, _)| s.len() as u64 + 1))
            .sum::<u64>();
        let dynamic_off = (strtab_off + strtab_len + 7) & !7;
        (rela_off, symtab_off, strtab_off, strtab_len, dynamic_off)
    }

    fn build(&self, prefix: &[u8]) -> DynamicData {
        let (rela_off, symtab_off, strtab_off, _strtab_len, dynamic_off) =
            self.layout(prefix.len() as u64);
        // GOT slots live inside the prefix at offset 0, one per import.
        let got_slots: Vec<u64> = (0..self.imports.len() as u64)
            .map(|i| self.base_vaddr + i * 8)
            .collect();

        let mut strtab = vec![0u8];
        let mut name_offsets = Vec::new();
        for name in self.imports.iter().chain(self.defined.iter().map(|(n, _)| n)) {
            name_offsets.push(strtab.len() as u32);
            strtab.extend_from_slice(name.as_bytes());
            strtab.push(0);
        }

        let mut symtab = vec![0u8; elf::SYM_ENTRY_SIZE as usize]; // null symbol
        for (i, _name) in self.imports.iter().enumerate() {
            let mut rec = [0u8; 24];
            rec[..4].copy_from_slice(&name_offsets[i].to_le_bytes());
            rec[4] = 0x12; // GLOBAL FUNC
            // st_shndx 0 (undefined), st_value 0
            symtab.extend_from_slice(&rec);
        }
        for (i, (_name, value)) in self.defined.iter().enumerate() {
            let mut rec = [0u8; 24];
            rec[..4].copy_from_slice(&name_offsets[self.imports.len() + i].to_le_bytes());
            rec[4] = 0x12;
            rec[6..8].copy_from_slice(&1u16.to_le_bytes()); // defined
            rec[8..16].copy_from_slice(&value.to_le_bytes());
            symtab.extend_from_slice(&rec);
        }

        let mut rela = Vec::new();
        for (i, slot) in got_slots.iter().enumerate() {
            let sym_index = (i + 1) as u64; // imports follow the null symbol
            rela.extend_from_slice(&slot.to_le_bytes());
            rela.extend_from_slice(
                &((sym_index << 32) | R_AARCH64_JUMP_SLOT as u64).to_le_bytes(),
            );
            rela.extend_from_slice(&0u64.to_le_bytes());
        }

        let mut dynamic = Vec::new();
        let mut dyn_entry = |tag: i64, val: u64| {
            dynamic.extend_from_slice(&(tag as u64).to_le_bytes());
            dynamic.extend_from_slice(&val.to_le_bytes());
        };
        dyn_entry(elf::DT_SYMTAB, self.base_vaddr + symtab_off);
        dyn_entry(elf::DT_STRTAB, self.base_vaddr + strtab_off);
        if !self.imports.is_empty() {
            dyn_entry(elf::DT_JMPREL, self.base_vaddr + rela_off);
            dyn_entry(elf::DT_PLTRELSZ, rela.len() as u64);
        }
        dyn_entry(elf::DT_NULL, 0);
        let dynamic_len = dynamic.len() as u64;

        let mut bytes = vec![0u8; (dynamic_off + dynamic_len) as usize];
        bytes[..prefix.len()].copy_from_slice(prefix);
        bytes[rela_off as usize..rela_off as usize + rela.len()].copy_from_slice(&rela);
        bytes[symtab_off as usize..symtab_off as usize + symtab.len()].copy_from_slice(&symtab);
        bytes[strtab_off as usize..strtab_off as usize + strtab.len()].copy_from_slice(&strtab);
        bytes[dynamic_off as usize..].copy_from_slice(&dynamic);

        DynamicData { bytes, dynamic_off, dynamic_len, got_slots }
    }
}

// ---------------------------------------------------------------------------
// Vulnerable / guard-only TA
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FixtureManifest {
    pub name: String,
    /// When false, the copy path masks offset and length so no input can
    /// leave the mapped output region (the "guard-only" fixture).
    pub vulnerable: bool,
}

impl FixtureManifest {
    pub fn vulnerable_ta_default() -> Self {
        FixtureManifest { name: "widevine_fixture".to_string(), vulnerable: true }
    }

    pub fn guard_only() -> Self {
        FixtureManifest { name: "guarded_fixture".to_string(), vulnerable: false }
    }

    /// Minimal manifest file: `key = value` lines, `#` comments.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut name = None;
        let mut vulnerable = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", lineno + 1))?;
            match key.trim() {
                "name" => name = Some(value.trim().to_string()),
                "vulnerable" => {
                    vulnerable = Some(value.trim().parse::<bool>().map_err(|_| {
                        format!("line {}: vulnerable must be true or false", lineno + 1)
                    })?)
                }
                other => return Err(format!("line {}: unknown key {other:?}", lineno + 1)),
            }
        }
        Ok(FixtureManifest {
            name: name.ok_or("missing key: name")?,
            vulnerable: vulnerable.unwrap_or(true),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ImportRecord {
    pub name: String,
    pub sym_index: u64,
    pub got_slot: u64,
}

#[derive(Debug, Clone)]
pub struct CommandEntry {
    pub id: u32,
    pub handler: u64,
    pub min_len: u32,
}

pub struct TaFixture {
    pub elf: Vec<u8>,
    pub harness_text: String,
    pub imports: Vec<ImportRecord>,
    pub command_table: Vec<CommandEntry>,
    pub labels: HashMap<String, u64>,
    pub session_table_addr: u64,
    pub start_addr: u64,
    pub stop_addr: u64,
    /// Input that deterministically reaches the unchecked copy and faults
    /// (recorded so acceptance can verify reachability without fuzzer luck).
    pub known_crash_input: Vec<u8>,
}

const IMPORTS: [&str; 4] = ["qsee_log", "qsee_rsa_encrypt", "qsee_rsa_decrypt", "qsee_hmac"];
const SESSION_ENTRY_SIZE: u64 = 16;
const SESSION_COUNT: u64 = 0x33;

/// Generate the TA fixture: dispatcher masking the command id with
/// 0xFFFF0000, a command table, OEMCrypto-style wrapper/inner pairs, and the
/// decrypt function whose do_decrypt == 0 path runs an unchecked byte copy to
/// out_buf + offset.
pub fn vulnerable_ta(manifest: &FixtureManifest) -> TaFixture {
    // Data-segment prefix layout: GOT, command table, session table.
    let got_len = IMPORTS.len() as u64 * 8;
    let cmd_table_off = got_len;
    let cmd_entry_size = 24u64;
    let cmd_count = 2u64;
    let session_off = cmd_table_off + (cmd_count + 1) * cmd_entry_size; // + sentinel
    let prefix_len = session_off + SESSION_COUNT * SESSION_ENTRY_SIZE;
    let session_table_addr = DATA_VADDR + session_off;
    let got_slot = |i: usize| DATA_VADDR + i as u64 * 8;
    let cmd_table_addr = DATA_VADDR + cmd_table_off;

    let mut a = Assembler::new(TEXT_VADDR);

    // cmd_handler(x0 = command buffer, x1 = in_buf, x6 = out_buf)
    a.label("cmd_handler");
    a.cbz_to(0, true, "unhandled");
    a.cbz_to(1, true, "unhandled");
    a.cbz_to(6, true, "unhandled");
    a.push(asm::ldr_imm(8, 0, 0, 2)); // w8 = command id
    a.push(asm::and_imm(9, 8, 0, 16, 15, false)); // w9 = w8 & 0xFFFF0000
    a.push(asm::movz(10, 6, 1, false)); // 0x60000
    a.push(asm::cmp_reg(9, 10, false));
    a.b_cond_to(cond::EQ, "widevine");
    a.push(asm::movz(10, 5, 1, false)); // 0x50000
    a.push(asm::cmp_reg(9, 10, false));
    a.b_cond_to(cond::EQ, "drmprov");
    a.cbz_to(9, false, "tzcommon");
    a.label("unhandled");
    a.b_to("stop"); // result returned unchanged
    a.label("tzcommon");
    a.push(asm::movz(0, 0, 0, true));
    a.b_to("stop");
    a.label("drmprov");
    a.push(asm::movz(0, 2, 0, true));
    a.b_to("stop");

    // widevine_dash_cmd_handler: scan the command table for w8.
    a.label("widevine");
    a.push_all(&asm::load_imm64(11, cmd_table_addr));
    a.label("wv_loop");
    a.push(asm::ldr_imm(12, 11, 0, 2)); // entry id
    a.cbz_to(12, false, "wv_done"); // sentinel: no match
    a.push(asm::cmp_reg(12, 8, false));
    a.b_cond_to(cond::EQ, "wv_dispatch");
    a.push(asm::add_imm(11, 11, 24, false, true));
    a.b_to("wv_loop");
    a.label("wv_dispatch");
    a.push(asm::ldr_imm(13, 11, 1, 3)); // handler pointer at entry + 8
    a.push(asm::blr(13));
    a.label("wv_done");
    a.b_to("stop");

    // Wrappers mirror the dash-table pattern: a wv_dash_core_* entry calling
    // an OEMCrypto_* implementation.
    a.label("wv_dash_core_decrypt_ctr");
    a.push(asm::stp(29, 30, 31, -16, PairIdx::Pre, true));
    a.bl_to("OEMCrypto_Decrypt_CTR");
    a.push(asm::ldp(29, 30, 31, 16, PairIdx::Post, true));
    a.push(asm::ret());

    a.label("wv_dash_core_security_patch_level");
    a.push(asm::stp(29, 30, 31, -16, PairIdx::Pre, true));
    a.bl_to("OEMCrypto_Security_Patch_Level");
    a.push(asm::ldp(29, 30, 31, 16, PairIdx::Post, true));
    a.push(asm::ret());

    a.label("OEMCrypto_Security_Patch_Level");
    a.push(asm::movz(0, 0x2021, 0, true));
    a.push(asm::ret());

    // OEMCrypto_Decrypt_CTR: parameter guards, then the copy.
    a.label("OEMCrypto_Decrypt_CTR");
    a.push(asm::ldr_imm(9, 31, 2, 3)); // stack argument at [sp, #16]
    a.cbz_to(9, true, "fail");
    a.push(asm::ldr_imm(1, 0, 1, 2)); // w1 = session_id
    a.push(asm::movz(2, 0x32, 0, false));
    a.push(asm::cmp_reg(2, 1, false)); // 0x32 < session_id -> LO
    a.b_cond_to(cond::LO, "fail");
    a.push_all(&asm::load_imm64(3, session_table_addr));
    a.push(asm::add_reg_lsl(3, 3, 1, 4, true)); // entry = table + session_id * 16
    a.push(asm::ldr_imm(4, 3, 0, 3));
    a.cbz_to(4, true, "fail"); // session slot must be initialized
    a.push(asm::ldr_imm(5, 0, 2, 2)); // w5 = do_decrypt
    a.cbnz_to(5, false, "real_decrypt");
    a.push(asm::ldr_imm(10, 0, 3, 2)); // w10 = output offset
    a.push(asm::ldr_imm(11, 0, 4, 2)); // w11 = copy length
    a.push(asm::and_imm(10, 10, 0, 0, 10, false)); // offset &= 0x7FF
    if !manifest.vulnerable {
        a.push(asm::and_imm(11, 11, 0, 0, 7, false)); // length &= 0xFF
    }
    a.push(asm::add_reg(13, 6, 10, true)); // dest = out_buf + offset
    a.push(asm::add_imm(12, 0, PAYLOAD_OFFSET as u32, false, true)); // src = payload
    a.label("copy_loop");
    a.cbz_to(11, true, "copy_done");
    a.push(asm::ldr_imm(14, 12, 0, 0));
    a.push(asm::str_imm(14, 13, 0, 0)); // no bound check on dest
    a.push(asm::add_imm(12, 12, 1, false, true));
    a.push(asm::add_imm(13, 13, 1, false, true));
    a.push(asm::sub_imm(11, 11, 1, false, true));
    a.b_to("copy_loop");
    a.label("copy_done");
    a.push(asm::movz(0, 0, 0, true));
    a.push(asm::ret());

    // do_decrypt != 0: exercise a resolved import and return its constant.
    a.label("real_decrypt");
    a.push(asm::stp(29, 30, 31, -16, PairIdx::Pre, true));
    a.push_all(&asm::load_imm64(16, got_slot(1))); // qsee_rsa_encrypt slot
    a.push(asm::ldr_imm(16, 16, 0, 3));
    a.push(asm::blr(16));
    a.push(asm::ldp(29, 30, 31, 16, PairIdx::Post, true));
    a.push(asm::ret());

    // Error abort: log through the (stubbed) qsee_log import, return 1.
    a.label("fail");
    a.push(asm::stp(29, 30, 31, -16, PairIdx::Pre, true));
    a.push_all(&asm::load_imm64(16, got_slot(0))); // qsee_log slot
    a.push(asm::ldr_imm(16, 16, 0, 3));
    a.push(asm::blr(16));
    a.push(asm::ldp(29, 30, 31, 16, PairIdx::Post, true));
    a.push(asm::movz(0, 1, 0, true));
    a.push(asm::ret());

    a.label("stop");
    a.push(asm::nop());

    let (words, labels) = a.finish();
    let text: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();

    let command_table = vec![
        CommandEntry { id: 0x0006_0001, handler: labels["wv_dash_core_decrypt_ctr"], min_len: PAYLOAD_OFFSET as u32 },
        CommandEntry { id: 0x0006_0002, handler: labels["wv_dash_core_security_patch_level"], min_len: 4 },
    ];

    let mut prefix = vec![0u8; prefix_len as usize];
    for (i, entry) in command_table.iter().enumerate() {
        let o = (cmd_table_off + i as u64 * cmd_entry_size) as usize;
        prefix[o..o + 4].copy_from_slice(&entry.id.to_le_bytes());
        prefix[o + 8..o + 16].copy_from_slice(&entry.handler.to_le_bytes());
        prefix[o + 16..o + 20].copy_from_slice(&entry.min_len.to_le_bytes());
    }
    // Sentinel entry (id 0) terminates the scan; session table starts zeroed
    // and the harness marks session 0 live before each run.

    let imports: Vec<String> = IMPORTS.iter().map(|s| s.to_string()).collect();
    let defined: Vec<(String, u64)> = [
        "cmd_handler",
        "wv_dash_core_decrypt_ctr",
        "wv_dash_core_security_patch_level",
        "OEMCrypto_Decrypt_CTR",
        "OEMCrypto_Security_Patch_Level",
    ]
    .iter()
    .map(|n| (n.to_string(), labels[*n]))
    .collect();
    let data = DynamicDataBuilder::new(DATA_VADDR, &imports, &defined).build(&prefix);

    let import_records: Vec<ImportRecord> = imports
        .iter()
        .enumerate()
        .map(|(i, name)| ImportRecord {
            name: name.clone(),
            sym_index: (i + 1) as u64,
            got_slot: data.got_slots[i],
        })
        .collect();

    let data_filesz = data.bytes.len() as u64;
    let segments = [
        SegSpec {
            p_type: PT_LOAD,
            p_flags: PF_R | PF_X,
            p_offset: 0x1000,
            p_vaddr: TEXT_VADDR,
            p_filesz: text.len() as u64,
            p_memsz: text.len() as u64,
            p_align: 0x1000,
            data: text,
        },
        SegSpec {
            p_type: PT_LOAD,
            p_flags: PF_R | PF_W,
            p_offset: 0x2000,
            p_vaddr: DATA_VADDR,
            p_filesz: data_filesz,
            p_memsz: data_filesz + 0x100, // bss tail
            p_align: 0x1000,
            data: data.bytes.clone(),
        },
        SegSpec {
            p_type: PT_DYNAMIC,
            p_flags: PF_R | PF_W,
            p_offset: 0x2000 + data.dynamic_off,
            p_vaddr: DATA_VADDR + data.dynamic_off,
            p_filesz: data.dynamic_len,
            p_memsz: data.dynamic_len,
            p_align: 8,
            data: Vec::new(),
        },
    ];
    let elf_bytes = build_elf64(labels["cmd_handler"], &segments);

    let sp = STACK_BASE + STACK_LEN - 512;
    let harness_text = format!(
        "# Generated harness for {name}\n\
         [run]\n\
         start = {start:#x}\n\
         stop = {stop:#x}\n\
         input_location = {input:#x}\n\
         input_max_len = {max_len:#x}\n\
         null_terminate = true\n\
         budget = 200000\n\
         stack = {stack_base:#x} {stack_len:#x}\n\
         map = {input:#x} {input_len:#x} rw input\n\
         map = {out:#x} {out_len:#x} rw output\n\
         \n\
         [registers]\n\
         x0 = INPUT_PTR\n\
         x1 = {input:#x}\n\
         x6 = {out:#x}\n\
         \n\
         [stack]\n\
         {sp0:#x} = 0xf0\n\
         {sp1:#x} = 0xf1\n\
         {sp2:#x} = 0x1f2\n\
         {sp3:#x} = 0xf3\n\
         \n\
         [memory]\n\
         {session:#x} = 01\n",
        name = manifest.name,
        start = labels["cmd_handler"],
        stop = labels["stop"],
        input = INPUT_BASE,
        max_len = INPUT_MAX_LEN,
        input_len = INPUT_REGION_LEN,
        out = OUTPUT_BASE,
        out_len = OUTPUT_REGION_LEN,
        stack_base = STACK_BASE,
        stack_len = STACK_LEN,
        sp0 = sp,
        sp1 = sp + 8,
        sp2 = sp + 16,
        sp3 = sp + 24,
        session = session_table_addr,
    );

    let mut known_crash_input = vec![0u8; 32];
    known_crash_input[0..4].copy_from_slice(&0x0006_0001u32.to_le_bytes());
    // session 0, do_decrypt 0, offset 0 — length 0x8000 walks the copy off
    // the end of the output region.
    known_crash_input[16..20].copy_from_slice(&0x8000u32.to_le_bytes());
    known_crash_input[20..].fill(0xAA);

    TaFixture {
        elf: elf_bytes,
        harness_text,
        imports: import_records,
        command_table,
        labels: labels.clone(),
        session_table_addr,
        start_addr: labels["cmd_handler"],
        stop_addr: labels["stop"],
        known_crash_input,
    }
}

/// Write a fixture's split form (`<name>.mdt`, `<name>.bXX`) plus the merged
/// ELF and generated harness spec into `dir`.
pub fn emit_split(elf_bytes: &[u8], name: &str, dir: &Path) -> std::io::Result<Vec<String>> {
    let split_out = merge::split(elf_bytes)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    let mut written = Vec::new();
    let mdt_name = format!("{name}.mdt");
    std::fs::write(dir.join(&mdt_name), &split_out.mdt)?;
    written.push(mdt_name);
    for (i, seg) in split_out.segment_files.iter().enumerate() {
        let file_name = format!("{name}.b{i:02}");
        std::fs::write(dir.join(&file_name), seg)?;
        written.push(file_name);
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// Randomized containers for merge-fidelity testing
// ---------------------------------------------------------------------------

/// A randomized well-formed container with `nsegs` segments, used by the
/// split/merge round-trip properties. Contents are arbitrary; only the header
/// and program-header table need to be coherent.
pub fn random_container(seed: u64, nsegs: usize, class: ElfClass) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    build_random(&mut rng, nsegs, class, false)
}

/// Variant guaranteeing at least one p_filesz == 0 (bss-only) segment.
pub fn random_container_with_bss(seed: u64, class: ElfClass) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB55_B55);
    build_random(&mut rng, 3, class, true)
}

fn build_random(rng: &mut ChaCha8Rng, nsegs: usize, class: ElfClass, force_bss: bool) -> Vec<u8> {
    let header_end = class.header_size() as u64 + class.phdr_size() as u64 * nsegs as u64;
    let mut offset = (header_end + 0xFF) & !0xFF;
    let mut segs = Vec::new();
    for i in 0..nsegs {
        let bss_only = force_bss && i == 1;
        let len = if bss_only { 0 } else { rng.gen_range(0x20..0x100u64) };
        let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        segs.push((offset, data, 0x1000 * (i as u64 + 1) + 0x1000000));
        offset = (offset + len + rng.gen_range(0..0x40u64) + 0xF) & !0xF;
    }

    let total = offset as usize;
    let mut out = vec![0u8; total];
    out[..4].copy_from_slice(&elf::ELF_MAGIC);
    out[5] = 1;
    out[6] = 1;
    match class {
        ElfClass::Elf64 => {
            out[4] = 2;
            out[0x12..0x14].copy_from_slice(&0xB7u16.to_le_bytes());
            out[0x20..0x28].copy_from_slice(&64u64.to_le_bytes());
            out[0x36..0x38].copy_from_slice(&56u16.to_le_bytes());
            out[0x38..0x3A].copy_from_slice(&(nsegs as u16).to_le_bytes());
            for (i, (off, data, vaddr)) in segs.iter().enumerate() {
                let o = 64 + 56 * i;
                out[o..o + 4].copy_from_slice(&PT_LOAD.to_le_bytes());
                out[o + 4..o + 8].copy_from_slice(&(PF_R | PF_W).to_le_bytes());
                out[o + 8..o + 16].copy_from_slice(&off.to_le_bytes());
                out[o + 16..o + 24].copy_from_slice(&vaddr.to_le_bytes());
                out[o + 24..o + 32].copy_from_slice(&vaddr.to_le_bytes());
                out[o + 32..o + 40].copy_from_slice(&(data.len() as u64).to_le_bytes());
                out[o + 40..o + 48].copy_from_slice(&(data.len() as u64 + 0x10).to_le_bytes());
                out[o + 48..o + 56].copy_from_slice(&0x1000u64.to_le_bytes());
                out[*off as usize..*off as usize + data.len()].copy_from_slice(data);
            }
        }
        ElfClass::Elf32 => {
            out[4] = 1;
            out[0x12..0x14].copy_from_slice(&0x28u16.to_le_bytes()); // EM_ARM
            out[0x1C..0x20].copy_from_slice(&52u32.to_le_bytes());
            out[0x2A..0x2C].copy_from_slice(&32u16.to_le_bytes());
            out[0x2C..0x2E].copy_from_slice(&(nsegs as u16).to_le_bytes());
            for (i, (off, data, vaddr)) in segs.iter().enumerate() {
                let o = 52 + 32 * i;
                out[o..o + 4].copy_from_slice(&PT_LOAD.to_le_bytes());
                out[o + 4..o + 8].copy_from_slice(&(*off as u32).to_le_bytes());
                out[o + 8..o + 12].copy_from_slice(&(*vaddr as u32).to_le_bytes());
                out[o + 12..o + 16].copy_from_slice(&(*vaddr as u32).to_le_bytes());
                out[o + 16..o + 20].copy_from_slice(&(data.len() as u32).to_le_bytes());
                out[o + 20..o + 24].copy_from_slice(&(data.len() as u32 + 0x10).to_le_bytes());
                out[o + 24..o + 28].copy_from_slice(&(PF_R | PF_W).to_le_bytes());
                out[o + 28..o + 32].copy_from_slice(&0x1000u32.to_le_bytes());
                out[*off as usize..*off as usize + data.len()].copy_from_slice(data);
            }
        }
    }
    out
}

/// Compare two containers over the header region plus every segment-backed
/// file range (bytes outside those ranges are unconstrained by the merge
/// contract).
pub fn assert_backed_ranges_equal(original: &[u8], merged: &[u8]) {
    let image = elf::parse_container(original).expect("original must parse");
    let id = &image.identity;
    let header_end = (id.phoff + id.phentsize as u64 * id.phnum as u64) as usize;
    assert_eq!(
        &original[..header_end],
        &merged[..header_end],
        "header region differs"
    );
    for (i, seg) in image.segments.iter().enumerate() {
        let start = seg.p_offset as usize;
        let end = start + seg.p_filesz as usize;
        assert_eq!(
            &original[start..end],
            &merged[start..end],
            "segment {i} contents differ"
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elf::parse_container;

    #[test]
    fn generated_ta_parses_and_carries_expected_dynamic_info() {
        let fx = vulnerable_ta(&FixtureManifest::vulnerable_ta_default());
        let image = parse_container(&fx.elf).unwrap();
        assert_eq!(image.identity.phnum as usize, image.segments.len());
        let relocs = image.relocation_entries().unwrap();
        assert_eq!(relocs.len(), fx.imports.len());
        for (rel, imp) in relocs.iter().zip(&fx.imports) {
            assert_eq!(rel.symbol_index(), imp.sym_index);
            assert_eq!(rel.r_offset, imp.got_slot);
            let sym = image.symbol_at(rel.symbol_index()).unwrap();
            assert_eq!(sym.name, imp.name);
        }
    }

    #[test]
    fn null_symbol_and_named_export() {
        let fx = dependency_lib(&DepLibManifest::default_lib());
        let image = parse_container(&fx.elf).unwrap();
        let null = image.symbol_at(0).unwrap();
        assert_eq!(null.name, "");
        assert_eq!(null.st_value, 0);
        let named = (0..image.symbol_count().unwrap())
            .filter_map(|i| image.symbol_at(i).ok())
            .find(|s| s.name == "qsee_rsa_encrypt")
            .expect("export present");
        assert_eq!(named.st_value, fx.exports["qsee_rsa_encrypt"]);
        // Past the table end.
        assert!(image.symbol_at(image.symbol_count().unwrap() + 10).is_err());
    }

    #[test]
    fn oemcrypto_wrapper_symbols_present() {
        let fx = vulnerable_ta(&FixtureManifest::vulnerable_ta_default());
        let image = parse_container(&fx.elf).unwrap();
        let names: Vec<String> = (0..image.symbol_count().unwrap())
            .filter_map(|i| image.symbol_at(i).ok())
            .map(|s| s.name)
            .collect();
        assert!(names.iter().any(|n| n == "OEMCrypto_Security_Patch_Level"));
        assert!(names.iter().any(|n| n == "wv_dash_core_security_patch_level"));
    }

    #[test]
    fn manifest_file_round_trip() {
        let m = FixtureManifest::parse("name = demo\nvulnerable = false\n").unwrap();
        assert_eq!(m.name, "demo");
        assert!(!m.vulnerable);
        assert!(FixtureManifest::parse("bogus = 1").is_err());
    }
}
