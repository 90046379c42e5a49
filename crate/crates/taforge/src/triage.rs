//! Turn raw run outcomes into classified, deduplicated crash reports. Dedup
//! is page-granular on the fault address: a copy loop overrunning a buffer
//! produces one report no matter how far individual inputs walk.

use std::collections::BTreeMap;
use std::fmt;

use crate::cpu::{dump_registers, Exit, Fault};
use crate::harness::RunOutcome;
use crate::mem::{AccessKind, PAGE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CrashKind {
    UnmappedWrite,
    UnmappedRead,
    UnmappedFetch,
    PermissionDenied,
    UndefinedInstruction,
    /// Instruction budget exhausted: reported as a hang, not a fault.
    Hang,
}

impl fmt::Display for CrashKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CrashKind::UnmappedWrite => "UnmappedWrite",
            CrashKind::UnmappedRead => "UnmappedRead",
            CrashKind::UnmappedFetch => "UnmappedFetch",
            CrashKind::PermissionDenied => "PermissionDenied",
            CrashKind::UndefinedInstruction => "UndefinedInstruction",
            CrashKind::Hang => "Hang",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrashReport {
    pub kind: CrashKind,
    pub pc: u64,
    /// Faulting data address; None for hangs and undefined instructions.
    pub fault_addr: Option<u64>,
    pub registers: String,
    pub input: Vec<u8>,
    pub seed: u64,
    pub rand_offset: u64,
    pub instructions_executed: u64,
}

impl CrashReport {
    /// Stable identity: kind, faulting pc, and the page of the fault address.
    pub fn dedup_key(&self) -> String {
        match self.fault_addr {
            Some(addr) => format!("{}:{:#x}:{:#x}", self.kind, self.pc, addr & !(PAGE_SIZE - 1)),
            None => format!("{}:{:#x}", self.kind, self.pc),
        }
    }

    /// Human-readable report: headline, register dump, hex dump of the input,
    /// and a replay line carrying everything needed to reproduce the run.
    pub fn render(&self) -> String {
        let mut out = String::new();
        match self.fault_addr {
            Some(addr) => {
                out.push_str(&format!("CRASH {} pc={:#x} addr={:#x}\n", self.kind, self.pc, addr))
            }
            None => out.push_str(&format!("CRASH {} pc={:#x}\n", self.kind, self.pc)),
        }
        out.push_str(&format!("instructions: {}\n", self.instructions_executed));
        out.push_str(&self.registers);
        out.push_str(&format!("input ({} bytes):\n", self.input.len()));
        out.push_str(&hex_dump(&self.input));
        out.push_str(&format!(
            "replay: seed={} rand_offset={:#x} input={}\n",
            self.seed,
            self.rand_offset,
            hex_string(&self.input)
        ));
        out
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hex_dump(bytes: &[u8]) -> String {
    let mut out = String::new();
    for (i, chunk) in bytes.chunks(16).enumerate() {
        let hex: Vec<String> = chunk.iter().map(|b| format!("{b:02x}")).collect();
        let ascii: String = chunk
            .iter()
            .map(|&b| if (0x20..0x7F).contains(&b) { b as char } else { '.' })
            .collect();
        out.push_str(&format!("{:08x}  {:<47}  |{}|\n", i * 16, hex.join(" "), ascii));
    }
    out
}

/// Classify a run outcome. Clean exits (reached stop, hook stop) are not
/// crashes; faults map to a [`CrashKind`] and budget exhaustion to a hang.
pub fn classify(outcome: &RunOutcome, seed: u64) -> Option<CrashReport> {
    let (kind, fault_addr) = match &outcome.result.exit {
        Exit::ReachedStop(_) | Exit::HookStop => return None,
        Exit::InstructionBudget => (CrashKind::Hang, None),
        Exit::Fault(fault) => match fault {
            Fault::UnmappedAccess { addr, kind, .. } => {
                let k = match kind {
                    AccessKind::Write => CrashKind::UnmappedWrite,
                    AccessKind::Read => CrashKind::UnmappedRead,
                    AccessKind::Fetch => CrashKind::UnmappedFetch,
                };
                (k, Some(*addr))
            }
            Fault::PermissionDenied { addr, .. } => (CrashKind::PermissionDenied, Some(*addr)),
            Fault::UndefinedInstruction { .. } | Fault::UnsupportedInstruction { .. } => {
                (CrashKind::UndefinedInstruction, None)
            }
        },
    };
    Some(CrashReport {
        kind,
        pc: outcome.final_regs.pc,
        fault_addr,
        registers: dump_registers(&outcome.final_regs),
        input: outcome.input.clone(),
        seed,
        rand_offset: outcome.rand_offset,
        instructions_executed: outcome.result.instructions_executed,
    })
}

/// Deduplicated crash set: one representative per key plus an occurrence
/// count.
#[derive(Default)]
pub struct CrashSet {
    entries: BTreeMap<String, (CrashReport, u64)>,
}

impl CrashSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a report; returns true when its key was new.
    pub fn insert(&mut self, report: CrashReport) -> bool {
        let key = report.dedup_key();
        match self.entries.get_mut(&key) {
            Some((_, count)) => {
                *count += 1;
                false
            }
            None => {
                self.entries.insert(key, (report, 1));
                true
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &CrashReport, u64)> {
        self.entries.iter().map(|(k, (r, c))| (k.as_str(), r, *c))
    }

    pub fn reports(&self) -> Vec<CrashReport> {
        self.entries.values().map(|(r, _)| r.clone()).collect()
    }

    pub fn merge(&mut self, other: CrashSet) {
        for (key, (report, count)) in other.entries {
            match self.entries.get_mut(&key) {
                Some((_, c)) => *c += count,
                None => {
                    self.entries.insert(key, (report, count));
                }
            }
        }
    }
}
