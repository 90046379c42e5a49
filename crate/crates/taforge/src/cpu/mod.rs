//! Pluggable CPU execution engine interface plus a reference interpreter for a
//! documented AArch64 subset. The interpreter is deliberately a direct
//! interpreter, not a binary translator: determinism and debuggability are the
//! point, and the `step`/`run`/hook surface is the seam where a full
//! third-party emulator could be adapted.
//!
//! The supported encoding subset and its semantics are documented in
//! `docs/instruction-set.md`; the golden-trace test suite pins every class.

pub mod asm;
mod insn;

pub use insn::{decode, Insn};

use std::collections::BTreeSet;

use crate::loader::StubRegistry;
use crate::mem::{AccessKind, AddressSpace, MemError};

pub const DEFAULT_BUDGET: u64 = 10_000_000;

/// General-purpose register file. Writes to a w-view zero-extend into the
/// 64-bit register; the interpreter enforces that in its execute paths.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RegisterFile {
    pub x: [u64; 31],
    pub sp: u64,
    pub pc: u64,
    pub n: bool,
    pub z: bool,
    pub c: bool,
    pub v: bool,
}

impl RegisterFile {
    /// Read Xn with register 31 as the zero register.
    pub fn x_or_zero(&self, n: u8) -> u64 {
        if n == 31 {
            0
        } else {
            self.x[n as usize]
        }
    }

    /// Write Xn, discarding writes to the zero register.
    pub fn set_x(&mut self, n: u8, val: u64) {
        if n != 31 {
            self.x[n as usize] = val;
        }
    }

    /// Read Xn with register 31 as SP (add/sub immediate, ld/st base).
    pub fn x_or_sp(&self, n: u8) -> u64 {
        if n == 31 {
            self.sp
        } else {
            self.x[n as usize]
        }
    }

    pub fn set_x_or_sp(&mut self, n: u8, val: u64) {
        if n == 31 {
            self.sp = val;
        } else {
            self.x[n as usize] = val;
        }
    }
}

/// Stable text block: one line per register `xN=0x<16 hex>`, then sp, pc, and
/// the NZCV flags.
pub fn dump_registers(regs: &RegisterFile) -> String {
    let mut out = String::with_capacity(34 * 24);
    for (i, v) in regs.x.iter().enumerate() {
        out.push_str(&format!("x{i}=0x{v:016x}\n"));
    }
    out.push_str(&format!("sp=0x{:016x}\n", regs.sp));
    out.push_str(&format!("pc=0x{:016x}\n", regs.pc));
    out.push_str(&format!(
        "flags=N:{} Z:{} C:{} V:{}\n",
        regs.n as u8, regs.z as u8, regs.c as u8, regs.v as u8
    ));
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fault {
    UnmappedAccess { addr: u64, len: u64, kind: AccessKind },
    PermissionDenied { addr: u64, kind: AccessKind },
    UndefinedInstruction { pc: u64, raw: u32 },
    UnsupportedInstruction { pc: u64, raw: u32 },
}

impl From<MemError> for Fault {
    fn from(e: MemError) -> Self {
        match e {
            MemError::UnmappedAccess { addr, len, kind } => Fault::UnmappedAccess { addr, len, kind },
            MemError::PermissionDenied { addr, kind, .. } => Fault::PermissionDenied { addr, kind },
            // Remaining variants cannot arise from plain accesses.
            other => panic!("unexpected memory error during execution: {other}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Exit {
    ReachedStop(u64),
    InstructionBudget,
    Fault(Fault),
    HookStop,
}

#[derive(Debug, Clone)]
pub struct TraceEntry {
    pub pc: u64,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub exit: Exit,
    pub instructions_executed: u64,
    pub trace: Option<Vec<TraceEntry>>,
}

/// Events delivered to hooks. AddressHit and EveryInstruction fire before the
/// instruction's architectural effect; MemRead/MemWrite fire after.
#[derive(Debug, Clone)]
pub enum HookEvent {
    Instruction { pc: u64 },
    AddressHit { pc: u64 },
    MemRead { addr: u64, len: u64 },
    MemWrite { addr: u64, len: u64 },
    Unmapped { addr: u64, kind: AccessKind },
    StubCall { name: String, addr: u64 },
    Syscall { pc: u64, imm: u16 },
    BranchTaken { from: u64, to: u64 },
}

#[derive(Debug, Clone)]
pub enum HookKind {
    EveryInstruction,
    AddressHit(BTreeSet<u64>),
    MemRead,
    MemWrite,
    UnmappedAccess,
    StubCall,
    Syscall,
    BranchTaken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookAction {
    Continue,
    Stop,
}

pub type HookFn = Box<dyn FnMut(&HookEvent, &mut RegisterFile, &mut AddressSpace) -> HookAction>;

pub struct HookSlot {
    id: u64,
    kind: HookKind,
    callback: HookFn,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("unknown hook id {0}")]
pub struct UnknownHookId(pub u64);

/// Memory side effect of a single step, reported to MemRead/MemWrite hooks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepEffects {
    pub mem_access: Option<(AccessKind, u64, u64)>,
    /// Target of a taken non-sequential control transfer.
    pub branch: Option<u64>,
    /// SVC immediate, when the step executed a supervisor call.
    pub syscall: Option<u16>,
}

#[derive(Default)]
pub struct Engine {
    hooks: Vec<HookSlot>,
    next_hook_id: u64,
    pub trace_enabled: bool,
}

impl Engine {
    pub fn new() -> Self {
        Engine::default()
    }

    pub fn add_hook(&mut self, kind: HookKind, callback: HookFn) -> u64 {
        let id = self.next_hook_id;
        self.next_hook_id += 1;
        self.hooks.push(HookSlot { id, kind, callback });
        id
    }

    pub fn remove_hook(&mut self, id: u64) -> Result<(), UnknownHookId> {
        let before = self.hooks.len();
        self.hooks.retain(|h| h.id != id);
        if self.hooks.len() == before {
            Err(UnknownHookId(id))
        } else {
            Ok(())
        }
    }

    fn fire(
        hooks: &mut [HookSlot],
        event: &HookEvent,
        regs: &mut RegisterFile,
        space: &mut AddressSpace,
    ) -> HookAction {
        let mut action = HookAction::Continue;
        for slot in hooks.iter_mut() {
            let matches = match (&slot.kind, event) {
                (HookKind::EveryInstruction, HookEvent::Instruction { .. }) => true,
                (HookKind::AddressHit(addrs), HookEvent::AddressHit { pc }) => addrs.contains(pc),
                (HookKind::MemRead, HookEvent::MemRead { .. }) => true,
                (HookKind::MemWrite, HookEvent::MemWrite { .. }) => true,
                (HookKind::UnmappedAccess, HookEvent::Unmapped { .. }) => true,
                (HookKind::StubCall, HookEvent::StubCall { .. }) => true,
                (HookKind::Syscall, HookEvent::Syscall { .. }) => true,
                (HookKind::BranchTaken, HookEvent::BranchTaken { .. }) => true,
                _ => false,
            };
            if matches && (slot.callback)(event, regs, space) == HookAction::Stop {
                action = HookAction::Stop;
            }
        }
        action
    }

    /// Execute exactly one instruction at `regs.pc`.
    pub fn step(
        &mut self,
        space: &mut AddressSpace,
        regs: &mut RegisterFile,
    ) -> Result<StepEffects, Fault> {
        let pc = regs.pc;
        let raw = space.fetch_u32(pc).map_err(Fault::from)?;
        let insn = decode(raw).map_err(|f| match f {
            insn::DecodeError::Undefined => Fault::UndefinedInstruction { pc, raw },
            insn::DecodeError::Unsupported => Fault::UnsupportedInstruction { pc, raw },
        })?;
        insn::execute(&insn, regs, space)
    }

    /// Run until a stop address is reached (checked before executing that
    /// address), the budget is exhausted, a fault occurs, or a hook requests a
    /// stop.
    pub fn run(
        &mut self,
        space: &mut AddressSpace,
        regs: &mut RegisterFile,
        stubs: &mut StubRegistry,
        stop_addrs: &BTreeSet<u64>,
        budget: u64,
    ) -> RunResult {
        let mut executed = 0u64;
        let mut trace = if self.trace_enabled { Some(Vec::new()) } else { None };
        let exit = loop {
            let pc = regs.pc;
            if stop_addrs.contains(&pc) {
                break Exit::ReachedStop(pc);
            }
            if executed >= budget {
                break Exit::InstructionBudget;
            }

            // Synthetic import stubs trap before any fetch happens.
            if let Some(name) = stubs.binding_at(pc) {
                let ev = HookEvent::StubCall { name: name.clone(), addr: pc };
                let act = Self::fire(&mut self.hooks, &ev, regs, space);
                stubs.invoke(&name, regs, space);
                executed += 1;
                if act == HookAction::Stop {
                    break Exit::HookStop;
                }
                continue;
            }

            let pre = Self::fire(&mut self.hooks, &HookEvent::Instruction { pc }, regs, space);
            let pre_hit = Self::fire(&mut self.hooks, &HookEvent::AddressHit { pc }, regs, space);
            if pre == HookAction::Stop || pre_hit == HookAction::Stop {
                break Exit::HookStop;
            }

            if let Some(t) = trace.as_mut() {
                let text = match space.fetch_u32(regs.pc).ok().and_then(|w| decode(w).ok()) {
                    Some(i) => i.mnemonic(),
                    None => "<?>".to_string(),
                };
                t.push(TraceEntry { pc: regs.pc, text });
            }

            match self.step(space, regs) {
                Ok(effects) => {
                    executed += 1;
                    if let Some((kind, addr, len)) = effects.mem_access {
                        let ev = match kind {
                            AccessKind::Read => HookEvent::MemRead { addr, len },
                            _ => HookEvent::MemWrite { addr, len },
                        };
                        if Self::fire(&mut self.hooks, &ev, regs, space) == HookAction::Stop {
                            break Exit::HookStop;
                        }
                    }
                    if let Some(to) = effects.branch {
                        let ev = HookEvent::BranchTaken { from: pc, to };
                        if Self::fire(&mut self.hooks, &ev, regs, space) == HookAction::Stop {
                            break Exit::HookStop;
                        }
                    }
                    if let Some(imm) = effects.syscall {
                        let ev = HookEvent::Syscall { pc, imm };
                        if Self::fire(&mut self.hooks, &ev, regs, space) == HookAction::Stop {
                            break Exit::HookStop;
                        }
                    }
                }
                Err(fault) => {
                    if let Fault::UnmappedAccess { addr, kind, .. } = &fault {
                        let ev = HookEvent::Unmapped { addr: *addr, kind: *kind };
                        Self::fire(&mut self.hooks, &ev, regs, space);
                    }
                    break Exit::Fault(fault);
                }
            }
        };
        RunResult { exit, instructions_executed: executed, trace }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpu::asm::*;
    use crate::mem::{PERM_R, PERM_W, PERM_X};

    fn code_space(words: &[u32]) -> (AddressSpace, RegisterFile) {
        let bytes: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
        let mut space = AddressSpace::new();
        space.map_region(0x1000, 0x1000, PERM_R | PERM_W | PERM_X, "text").unwrap();
        space.map_region(0x20000, 0x1000, PERM_R | PERM_W, "data").unwrap();
        space.write_bytes(0x1000, &bytes).unwrap();
        let regs = RegisterFile { pc: 0x1000, ..Default::default() };
        (space, regs)
    }

    fn run_to(words: &[u32], stop: u64) -> (RunResult, RegisterFile, AddressSpace) {
        let (mut space, mut regs) = code_space(words);
        let mut engine = Engine::new();
        let mut stubs = StubRegistry::new_unmapped();
        let res = engine.run(
            &mut space,
            &mut regs,
            &mut stubs,
            &BTreeSet::from([stop]),
            DEFAULT_BUDGET,
        );
        (res, regs, space)
    }

    #[test]
    fn movz_then_add() {
        let words = [movz(0, 5, 0, true), add_imm(0, 0, 3, false, true)];
        let (res, regs, _) = run_to(&words, 0x1008);
        assert!(matches!(res.exit, Exit::ReachedStop(0x1008)));
        assert_eq!(regs.x[0], 8);
        assert_eq!(res.instructions_executed, 2);
    }

    #[test]
    fn store_to_unmapped_faults() {
        let words = [
            movz(2, 5, 2, true), // x2 = 0x5_0000... actually 5 << 32
            str_imm(1, 2, 0, 3),
        ];
        let (res, _, _) = run_to(&words, 0x1008);
        match res.exit {
            Exit::Fault(Fault::UnmappedAccess { kind: AccessKind::Write, .. }) => {}
            other => panic!("expected unmapped write, got {other:?}"),
        }
    }

    #[test]
    fn cmp_beq_sets_z_and_branches() {
        let words = [
            cmp_imm(0, 0, true),
            b_cond(cond::EQ, 8), // skip next insn
            movz(1, 0xDEAD, 0, true),
            movz(2, 1, 0, true),
        ];
        let (res, regs, _) = run_to(&words, 0x1010);
        assert!(matches!(res.exit, Exit::ReachedStop(_)));
        assert!(regs.z);
        assert_eq!(regs.x[1], 0); // skipped
        assert_eq!(regs.x[2], 1);
    }

    #[test]
    fn budget_bounds_infinite_loop() {
        let words = [b(0)]; // branch to self
        let (mut space, mut regs) = code_space(&words);
        let mut engine = Engine::new();
        let mut stubs = StubRegistry::new_unmapped();
        let res = engine.run(&mut space, &mut regs, &mut stubs, &BTreeSet::new(), 1000);
        assert!(matches!(res.exit, Exit::InstructionBudget));
        assert_eq!(res.instructions_executed, 1000);
    }

    #[test]
    fn every_instruction_hook_counts_and_is_side_effect_free() {
        let words = [movz(0, 1, 0, true), movz(1, 2, 0, true), movz(2, 3, 0, true)];
        let (mut space, mut regs) = code_space(&words);
        let mut engine = Engine::new();
        let mut stubs = StubRegistry::new_unmapped();
        let count = std::rc::Rc::new(std::cell::Cell::new(0u64));
        let c2 = count.clone();
        engine.add_hook(
            HookKind::EveryInstruction,
            Box::new(move |_, _, _| {
                c2.set(c2.get() + 1);
                HookAction::Continue
            }),
        );
        let res = engine.run(
            &mut space,
            &mut regs,
            &mut stubs,
            &BTreeSet::from([0x100C]),
            DEFAULT_BUDGET,
        );
        assert_eq!(count.get(), res.instructions_executed);

        // Same program without the hook: identical result and final state.
        let (mut space2, mut regs2) = code_space(&words);
        let mut engine2 = Engine::new();
        let res2 = engine2.run(
            &mut space2,
            &mut regs2,
            &mut stubs,
            &BTreeSet::from([0x100C]),
            DEFAULT_BUDGET,
        );
        assert_eq!(res.instructions_executed, res2.instructions_executed);
        assert_eq!(regs, regs2);
    }

    #[test]
    fn address_hit_hook_fires_at_target() {
        let words = [movz(0, 7, 0, true), movz(0, 9, 0, true)];
        let (mut space, mut regs) = code_space(&words);
        let mut engine = Engine::new();
        let mut stubs = StubRegistry::new_unmapped();
        let seen = std::rc::Rc::new(std::cell::RefCell::new(Vec::new()));
        let s2 = seen.clone();
        engine.add_hook(
            HookKind::AddressHit(BTreeSet::from([0x1004])),
            Box::new(move |ev, regs, _| {
                if let HookEvent::AddressHit { pc } = ev {
                    s2.borrow_mut().push((*pc, regs.x[0]));
                }
                HookAction::Continue
            }),
        );
        engine.run(&mut space, &mut regs, &mut stubs, &BTreeSet::from([0x1008]), 100);
        // Fired before the second MOVZ executed: x0 still holds 7.
        assert_eq!(seen.borrow().as_slice(), &[(0x1004, 7)]);
    }

    #[test]
    fn remove_hook_unknown_id() {
        let mut engine = Engine::new();
        let id = engine.add_hook(HookKind::MemWrite, Box::new(|_, _, _| HookAction::Continue));
        assert!(engine.remove_hook(id).is_ok());
        assert_eq!(engine.remove_hook(id), Err(UnknownHookId(id)));
    }

    #[test]
    fn fetch_from_non_exec_region_is_permission_denied() {
        let mut space = AddressSpace::new();
        space.map_region(0x20000, 0x1000, PERM_R | PERM_W, "data").unwrap();
        let mut regs = RegisterFile { pc: 0x20000, ..Default::default() };
        let mut engine = Engine::new();
        let err = engine.step(&mut space, &mut regs).unwrap_err();
        assert!(matches!(err, Fault::PermissionDenied { kind: AccessKind::Fetch, .. }));
    }

    #[test]
    fn dump_format_is_stable() {
        let mut regs = RegisterFile::default();
        let dump = dump_registers(&regs);
        assert!(dump.contains("x0=0x0000000000000000\n"));
        regs.x[7] = 0x1F2;
        let dump = dump_registers(&regs);
        assert!(dump.contains("x7=0x00000000000001f2\n"));
        assert_eq!(dump, dump_registers(&regs.clone()));
    }
}
