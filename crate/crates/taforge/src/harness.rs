//! Declarative harness: an INI-style spec file names the entry point, stop
//! addresses, input placement, register/stack/memory presets, and extra
//! mappings. A [`Session`] applies the spec once, snapshots the prepared
//! state, and then replays inputs persistent-mode style — restore, write
//! input, run — without reloading the image.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cpu::{
    dump_registers, Engine, HookAction, HookKind, RegisterFile, RunResult, DEFAULT_BUDGET,
};
use crate::elf::parse_container;
use crate::fuzz::CoverageMap;
use crate::loader::{self, LoadError, LoadedModule, StubRegistry};
use crate::mem::{AddressSpace, MemError, Snapshot, PERM_R, PERM_W, PERM_X};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("spec syntax error on line {line}: {msg}")]
    SpecSyntax { line: usize, msg: String },
    #[error("unknown register {0:?}")]
    UnknownRegister(String),
    #[error("preset address {0:#x} is not inside any mapped region")]
    UnmappedPresetAddress(u64),
    #[error("input is {len} bytes but input_max_len is {max}")]
    InputTooLong { len: usize, max: u64 },
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error(transparent)]
    Elf(#[from] crate::elf::ElfError),
}

/// Value expression a register preset can take.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueExpr {
    Literal(u64),
    /// Address the input was written to.
    InputPtr,
    /// Length of the current input in bytes.
    InputLen,
    /// `base + RAND_OFFSET(bound)`: base plus the session's single random
    /// draw reduced modulo `bound`.
    RandOffset { base: u64, bound: u64 },
}

#[derive(Debug, Clone)]
pub struct MemMap {
    pub base: u64,
    pub length: u64,
    pub perms: u8,
    pub label: String,
}

#[derive(Debug, Clone)]
pub struct HarnessSpec {
    pub start: u64,
    pub stops: BTreeSet<u64>,
    pub input_location: u64,
    pub input_max_len: u64,
    pub null_terminate: bool,
    pub budget: u64,
    /// Stack mapping as (base, length); sp starts at base + length - 512.
    pub stack: Option<(u64, u64)>,
    pub maps: Vec<MemMap>,
    pub registers: Vec<(u8, ValueExpr)>,
    /// 64-bit values written at absolute addresses inside the stack region.
    pub stack_presets: Vec<(u64, u64)>,
    /// Raw bytes written at absolute addresses before the snapshot.
    pub memory_presets: Vec<(u64, Vec<u8>)>,
}

impl HarnessSpec {
    pub fn stack_pointer(&self) -> u64 {
        match self.stack {
            Some((base, len)) => base + len - 512,
            None => 0,
        }
    }
}

fn parse_u64(s: &str) -> Option<u64> {
    let s = s.trim();
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).ok()
    } else {
        s.parse().ok()
    }
}

fn syntax(line: usize, msg: impl Into<String>) -> HarnessError {
    HarnessError::SpecSyntax { line, msg: msg.into() }
}

fn parse_perms(s: &str, line: usize) -> Result<u8, HarnessError> {
    let mut perms = 0;
    for c in s.chars() {
        perms |= match c {
            'r' => PERM_R,
            'w' => PERM_W,
            'x' => PERM_X,
            other => return Err(syntax(line, format!("unknown permission flag {other:?}"))),
        };
    }
    Ok(perms)
}

fn parse_register_name(name: &str) -> Option<u8> {
    let idx: u8 = name.strip_prefix('x')?.parse().ok()?;
    (idx <= 30).then_some(idx)
}

fn parse_value_expr(value: &str, line: usize) -> Result<ValueExpr, HarnessError> {
    let value = value.trim();
    if value == "INPUT_PTR" {
        return Ok(ValueExpr::InputPtr);
    }
    if value == "INPUT_LEN" {
        return Ok(ValueExpr::InputLen);
    }
    let (base_part, rand_part) = match value.split_once('+') {
        Some((b, r)) => (Some(b.trim()), r.trim()),
        None => (None, value),
    };
    if let Some(arg) = rand_part
        .strip_prefix("RAND_OFFSET(")
        .and_then(|r| r.strip_suffix(')'))
    {
        let bound = parse_u64(arg)
            .filter(|&b| b > 0)
            .ok_or_else(|| syntax(line, "RAND_OFFSET bound must be a positive integer"))?;
        let base = match base_part {
            Some(b) => parse_u64(b).ok_or_else(|| syntax(line, "bad base value"))?,
            None => 0,
        };
        return Ok(ValueExpr::RandOffset { base, bound });
    }
    if base_part.is_some() {
        return Err(syntax(line, "only `base + RAND_OFFSET(bound)` sums are supported"));
    }
    parse_u64(value)
        .map(ValueExpr::Literal)
        .ok_or_else(|| syntax(line, format!("bad value {value:?}")))
}

/// Parse a harness spec. Unknown sections, unknown keys, and malformed values
/// are hard errors: a typo'd spec must not silently run with defaults.
pub fn parse_spec(text: &str) -> Result<HarnessSpec, HarnessError> {
    #[derive(PartialEq)]
    enum Section {
        None,
        Run,
        Registers,
        Stack,
        Memory,
    }
    let mut section = Section::None;
    let mut start = None;
    let mut stops = BTreeSet::new();
    let mut input_location = None;
    let mut input_max_len = None;
    let mut null_terminate = false;
    let mut budget = DEFAULT_BUDGET;
    let mut stack = None;
    let mut maps = Vec::new();
    let mut registers = Vec::new();
    let mut stack_presets = Vec::new();
    let mut memory_presets = Vec::new();

    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw_line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = match name {
                "run" => Section::Run,
                "registers" => Section::Registers,
                "stack" => Section::Stack,
                "memory" => Section::Memory,
                other => return Err(syntax(line_no, format!("unknown section [{other}]"))),
            };
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| syntax(line_no, "expected `key = value`"))?;
        let (key, value) = (key.trim(), value.trim());
        match section {
            Section::None => return Err(syntax(line_no, "key outside any section")),
            Section::Run => match key {
                "start" => {
                    start = Some(parse_u64(value).ok_or_else(|| syntax(line_no, "bad start"))?)
                }
                "stop" => {
                    stops.insert(parse_u64(value).ok_or_else(|| syntax(line_no, "bad stop"))?);
                }
                "input_location" => {
                    input_location =
                        Some(parse_u64(value).ok_or_else(|| syntax(line_no, "bad input_location"))?)
                }
                "input_max_len" => {
                    input_max_len =
                        Some(parse_u64(value).ok_or_else(|| syntax(line_no, "bad input_max_len"))?)
                }
                "null_terminate" => {
                    null_terminate = value
                        .parse()
                        .map_err(|_| syntax(line_no, "null_terminate must be true or false"))?
                }
                "budget" => {
                    budget = parse_u64(value).ok_or_else(|| syntax(line_no, "bad budget"))?
                }
                "stack" => {
                    let mut parts = value.split_whitespace();
                    let base = parts.next().and_then(parse_u64);
                    let len = parts.next().and_then(parse_u64);
                    match (base, len, parts.next()) {
                        (Some(b), Some(l), None) => stack = Some((b, l)),
                        _ => return Err(syntax(line_no, "expected `stack = base length`")),
                    }
                }
                "map" => {
                    let parts: Vec<&str> = value.split_whitespace().collect();
                    let [base, len, perms, label] = parts.as_slice() else {
                        return Err(syntax(line_no, "expected `map = base length perms label`"));
                    };
                    maps.push(MemMap {
                        base: parse_u64(base).ok_or_else(|| syntax(line_no, "bad map base"))?,
                        length: parse_u64(len).ok_or_else(|| syntax(line_no, "bad map length"))?,
                        perms: parse_perms(perms, line_no)?,
                        label: label.to_string(),
                    });
                }
                other => return Err(syntax(line_no, format!("unknown [run] key {other:?}"))),
            },
            Section::Registers => {
                let reg = parse_register_name(key)
                    .ok_or_else(|| HarnessError::UnknownRegister(key.to_string()))?;
                registers.push((reg, parse_value_expr(value, line_no)?));
            }
            Section::Stack => {
                let addr = parse_u64(key).ok_or_else(|| syntax(line_no, "bad stack address"))?;
                let val = parse_u64(value).ok_or_else(|| syntax(line_no, "bad stack value"))?;
                stack_presets.push((addr, val));
            }
            Section::Memory => {
                let addr = parse_u64(key).ok_or_else(|| syntax(line_no, "bad memory address"))?;
                let hex = value.trim_start_matches("0x");
                if hex.is_empty() || hex.len() % 2 != 0 || !hex.bytes().all(|b| b.is_ascii_hexdigit())
                {
                    return Err(syntax(line_no, "memory value must be an even-length hex string"));
                }
                let bytes: Vec<u8> = (0..hex.len())
                    .step_by(2)
                    .map(|j| u8::from_str_radix(&hex[j..j + 2], 16).unwrap())
                    .collect();
                memory_presets.push((addr, bytes));
            }
        }
    }

    let start = start.ok_or_else(|| syntax(0, "missing required [run] key: start"))?;
    if stops.is_empty() {
        return Err(syntax(0, "at least one stop address is required"));
    }
    let input_location =
        input_location.ok_or_else(|| syntax(0, "missing required [run] key: input_location"))?;
    let input_max_len =
        input_max_len.ok_or_else(|| syntax(0, "missing required [run] key: input_max_len"))?;
    // Stack presets must land inside the declared stack region.
    if let Some((base, len)) = stack {
        for &(addr, _) in &stack_presets {
            if addr < base || addr + 8 > base + len {
                return Err(HarnessError::UnmappedPresetAddress(addr));
            }
        }
    } else if let Some(&(addr, _)) = stack_presets.first() {
        return Err(HarnessError::UnmappedPresetAddress(addr));
    }

    Ok(HarnessSpec {
        start,
        stops,
        input_location,
        input_max_len,
        null_terminate,
        budget,
        stack,
        maps,
        registers,
        stack_presets,
        memory_presets,
    })
}

/// Command-id routing model mirroring the dispatcher the fixtures implement:
/// the TA switches on `id & 0xFFFF0000`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandClass {
    Widevine,
    DrmProv,
    TzCommon,
    Unhandled,
}

pub fn model_command_dispatch(id: u32) -> CommandClass {
    match id & 0xFFFF_0000 {
        0x0006_0000 => CommandClass::Widevine,
        0x0005_0000 => CommandClass::DrmProv,
        0x0000_0000 => CommandClass::TzCommon,
        _ => CommandClass::Unhandled,
    }
}

/// One prepared execution context: loaded modules, the prepared baseline
/// snapshot, and a coverage map refreshed per run.
pub struct Session {
    pub engine: Engine,
    pub space: AddressSpace,
    pub stubs: StubRegistry,
    pub modules: Vec<LoadedModule>,
    pub coverage: Rc<RefCell<CoverageMap>>,
    baseline: Snapshot,
    baseline_regs: RegisterFile,
    /// The session's single random draw; every RAND_OFFSET expression reduces
    /// this one value modulo its own bound so a (seed, input) pair replays
    /// identically.
    pub rand_offset: u64,
    pub seed: u64,
}

/// Outcome of one input: the engine result, the registers at exit, and the
/// nonzero per-run coverage cells as (edge index, hit count).
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub result: RunResult,
    pub final_regs: RegisterFile,
    pub input: Vec<u8>,
    pub rand_offset: u64,
    pub coverage: Vec<(u16, u8)>,
}

impl RunOutcome {
    pub fn register_dump(&self) -> String {
        dump_registers(&self.final_regs)
    }
}

impl Session {
    /// Load the TA and its dependency libraries, apply the harness spec's
    /// mappings and presets, resolve imports, and snapshot the prepared state.
    pub fn build(
        ta_elf: &[u8],
        dep_elfs: &[&[u8]],
        spec: &HarnessSpec,
        seed: u64,
    ) -> Result<Session, HarnessError> {
        let mut space = AddressSpace::new();
        let mut ta = loader::load_image(&mut space, parse_container(ta_elf)?, 0)?;
        let mut deps = Vec::new();
        for dep in dep_elfs {
            deps.push(loader::load_image(&mut space, parse_container(dep)?, 0)?);
        }
        let mut stubs = StubRegistry::new(&mut space)?;
        {
            let dep_refs: Vec<&LoadedModule> = deps.iter().collect();
            loader::resolve_imports(&mut space, &mut ta, &dep_refs, &mut stubs)?;
        }

        for m in &spec.maps {
            space.map_region(m.base, m.length, m.perms, &m.label)?;
        }
        if let Some((base, len)) = spec.stack {
            space.map_region(base, len, PERM_R | PERM_W, "stack")?;
        }
        for &(addr, val) in &spec.stack_presets {
            space
                .write_u64(addr, val)
                .map_err(|_| HarnessError::UnmappedPresetAddress(addr))?;
        }
        for (addr, bytes) in &spec.memory_presets {
            space
                .write_bytes(*addr, bytes)
                .map_err(|_| HarnessError::UnmappedPresetAddress(*addr))?;
        }

        // One draw per session; shared across every RAND_OFFSET expression.
        let rand_offset = ChaCha8Rng::seed_from_u64(seed).gen::<u64>();

        let baseline_regs = RegisterFile {
            sp: spec.stack_pointer(),
            pc: spec.start,
            ..Default::default()
        };

        let mut engine = Engine::new();
        let coverage = Rc::new(RefCell::new(CoverageMap::new()));
        let cov = coverage.clone();
        engine.add_hook(
            HookKind::BranchTaken,
            Box::new(move |ev, _, _| {
                if let crate::cpu::HookEvent::BranchTaken { from, to } = ev {
                    cov.borrow_mut().observe(*from, *to);
                }
                HookAction::Continue
            }),
        );

        let baseline = space.snapshot();
        let mut modules = vec![ta];
        modules.extend(deps);
        Ok(Session {
            engine,
            space,
            stubs,
            modules,
            coverage,
            baseline,
            baseline_regs,
            rand_offset,
            seed,
        })
    }

    fn eval(&self, expr: ValueExpr, spec: &HarnessSpec, input_len: u64) -> u64 {
        match expr {
            ValueExpr::Literal(v) => v,
            ValueExpr::InputPtr => spec.input_location,
            ValueExpr::InputLen => input_len,
            ValueExpr::RandOffset { base, bound } => base + self.rand_offset % bound,
        }
    }

    /// Restore the baseline, place `input`, preset registers, and execute.
    /// Post-run state is left in place for inspection; the next call restores.
    pub fn run_once(
        &mut self,
        spec: &HarnessSpec,
        input: &[u8],
    ) -> Result<RunOutcome, HarnessError> {
        if input.len() as u64 > spec.input_max_len {
            return Err(HarnessError::InputTooLong {
                len: input.len(),
                max: spec.input_max_len,
            });
        }
        self.space.restore(&self.baseline)?;
        self.coverage.borrow_mut().clear();

        let mut input = input.to_vec();
        if spec.null_terminate {
            match input.last_mut() {
                Some(last) => *last = 0,
                None => input.push(0),
            }
        }
        self.space.write_bytes(spec.input_location, &input)?;

        let mut regs = self.baseline_regs.clone();
        for &(reg, expr) in &spec.registers {
            let val = self.eval(expr, spec, input.len() as u64);
            regs.set_x(reg, val);
        }
        regs.pc = spec.start;

        let result = self.engine.run(
            &mut self.space,
            &mut regs,
            &mut self.stubs,
            &spec.stops,
            spec.budget,
        );
        let coverage = self.coverage.borrow().nonzero();
        Ok(RunOutcome {
            result,
            final_regs: regs,
            input,
            rand_offset: self.rand_offset,
            coverage,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpu::{Exit, Fault};
    use crate::fixture::{self, FixtureManifest};
    use crate::mem::AccessKind;

    fn fixture_session(seed: u64) -> (Session, HarnessSpec, fixture::TaFixture) {
        let fx = fixture::vulnerable_ta(&FixtureManifest::vulnerable_ta_default());
        let dep = fixture::dependency_lib(&fixture::DepLibManifest::default_lib());
        let spec = parse_spec(&fx.harness_text).unwrap();
        let session = Session::build(&fx.elf, &[&dep.elf], &spec, seed).unwrap();
        (session, spec, fx)
    }

    #[test]
    fn spec_parses_generated_harness() {
        let fx = fixture::vulnerable_ta(&FixtureManifest::vulnerable_ta_default());
        let spec = parse_spec(&fx.harness_text).unwrap();
        assert_eq!(spec.start, fx.start_addr);
        assert!(spec.stops.contains(&fx.stop_addr));
        assert_eq!(spec.input_location, fixture::INPUT_BASE);
        assert!(spec.null_terminate);
        assert_eq!(spec.maps.len(), 2);
    }

    #[test]
    fn spec_rejects_unknowns() {
        assert!(matches!(
            parse_spec("[bogus]\n"),
            Err(HarnessError::SpecSyntax { line: 1, .. })
        ));
        assert!(matches!(
            parse_spec("[run]\nwarp = 9\n"),
            Err(HarnessError::SpecSyntax { line: 2, .. })
        ));
        assert!(matches!(
            parse_spec("[registers]\nq7 = 0\n"),
            Err(HarnessError::UnknownRegister(_))
        ));
        // No stop address.
        assert!(parse_spec("[run]\nstart = 0x1000\ninput_location = 0\ninput_max_len = 8\n").is_err());
    }

    #[test]
    fn stack_preset_outside_stack_region_rejected() {
        let text = "[run]\nstart = 0x1000\nstop = 0x1004\ninput_location = 0x2000\n\
                    input_max_len = 8\nstack = 0x7f0000 0x10000\n[stack]\n0x100 = 0x1\n";
        assert!(matches!(
            parse_spec(text),
            Err(HarnessError::UnmappedPresetAddress(0x100))
        ));
    }

    #[test]
    fn rand_offset_expression_forms() {
        let spec = parse_spec(
            "[run]\nstart = 0\nstop = 4\ninput_location = 0x2000\ninput_max_len = 8\n\
             [registers]\nx2 = 0x4000 + RAND_OFFSET(0x100)\nx3 = RAND_OFFSET(16)\n",
        )
        .unwrap();
        assert_eq!(
            spec.registers[0].1,
            ValueExpr::RandOffset { base: 0x4000, bound: 0x100 }
        );
        assert_eq!(spec.registers[1].1, ValueExpr::RandOffset { base: 0, bound: 16 });
        assert!(parse_spec(
            "[run]\nstart = 0\nstop = 4\ninput_location = 0\ninput_max_len = 8\n\
             [registers]\nx2 = RAND_OFFSET(0)\n"
        )
        .is_err());
    }

    #[test]
    fn benign_input_reaches_stop() {
        let (mut session, spec, fx) = fixture_session(1);
        let mut input = vec![0u8; 24];
        input[0..4].copy_from_slice(&0x0006_0002u32.to_le_bytes());
        let outcome = session.run_once(&spec, &input).unwrap();
        assert_eq!(outcome.result.exit, Exit::ReachedStop(fx.stop_addr));
        // Patch-level query returns its constant.
        assert_eq!(outcome.final_regs.x[0], 0x2021);
        assert!(!outcome.coverage.is_empty());
    }

    #[test]
    fn command_classes_route_as_modeled() {
        let (mut session, spec, _fx) = fixture_session(2);
        for (id, expected_x0) in [
            (0x0005_1234u32, 2u64), // DrmProv
            (0x0000_0007, 0),       // TzCommon
            (0x0999_0000, 0xAB),    // Unhandled: x0 preserved... x0 is INPUT_PTR
        ] {
            let mut input = vec![0u8; 24];
            input[0..4].copy_from_slice(&id.to_le_bytes());
            let outcome = session.run_once(&spec, &input).unwrap();
            assert!(matches!(outcome.result.exit, Exit::ReachedStop(_)));
            if expected_x0 != 0xAB {
                assert_eq!(outcome.final_regs.x[0], expected_x0);
            } else {
                // Unhandled leaves x0 untouched (still the input pointer).
                assert_eq!(outcome.final_regs.x[0], spec.input_location);
            }
        }
        assert_eq!(model_command_dispatch(0x0006_0001), CommandClass::Widevine);
        assert_eq!(model_command_dispatch(0x0005_0000), CommandClass::DrmProv);
        assert_eq!(model_command_dispatch(0x42), CommandClass::TzCommon);
        assert_eq!(model_command_dispatch(0x0100_0000), CommandClass::Unhandled);
    }

    #[test]
    fn known_crash_input_faults_with_unmapped_write() {
        let (mut session, spec, fx) = fixture_session(3);
        let outcome = session.run_once(&spec, &fx.known_crash_input).unwrap();
        match &outcome.result.exit {
            Exit::Fault(Fault::UnmappedAccess { addr, kind: AccessKind::Write, .. }) => {
                assert_eq!(
                    *addr,
                    fixture::OUTPUT_BASE + fixture::OUTPUT_REGION_LEN,
                    "overrun faults at the first byte past the output region"
                );
            }
            other => panic!("expected unmapped write, got {other:?}"),
        }
    }

    #[test]
    fn runs_are_isolated_by_restore() {
        let (mut session, spec, fx) = fixture_session(4);
        // Crash once, then a benign run must behave as if it were first.
        session.run_once(&spec, &fx.known_crash_input).unwrap();
        let mut input = vec![0u8; 24];
        input[0..4].copy_from_slice(&0x0006_0002u32.to_le_bytes());
        let a = session.run_once(&spec, &input).unwrap();
        let b = session.run_once(&spec, &input).unwrap();
        assert_eq!(a.result.exit, b.result.exit);
        assert_eq!(a.final_regs, b.final_regs);
        assert_eq!(a.coverage, b.coverage);
    }

    #[test]
    fn guard_paths_fail_cleanly() {
        let (mut session, spec, fx) = fixture_session(5);
        // session_id 0x33 > 0x32: guard trips, x0 = 1, no fault.
        let mut input = vec![0u8; 24];
        input[0..4].copy_from_slice(&0x0006_0001u32.to_le_bytes());
        input[4..8].copy_from_slice(&0x33u32.to_le_bytes());
        let outcome = session.run_once(&spec, &input).unwrap();
        assert_eq!(outcome.result.exit, Exit::ReachedStop(fx.stop_addr));
        assert_eq!(outcome.final_regs.x[0], 1);
    }

    #[test]
    fn null_terminate_rewrites_last_byte() {
        let (mut session, spec, _fx) = fixture_session(6);
        let input = vec![0xFFu8; 32];
        let outcome = session.run_once(&spec, &input).unwrap();
        assert_eq!(*outcome.input.last().unwrap(), 0);
        let written = session
            .space
            .read_bytes(spec.input_location, input.len() as u64)
            .unwrap();
        assert_eq!(*written.last().unwrap(), 0);
    }

    #[test]
    fn oversized_input_rejected() {
        let (mut session, spec, _fx) = fixture_session(7);
        let input = vec![0u8; spec.input_max_len as usize + 1];
        assert!(matches!(
            session.run_once(&spec, &input),
            Err(HarnessError::InputTooLong { .. })
        ));
    }

    #[test]
    fn rand_offset_is_one_draw_per_seed() {
        let (s1, _, _) = fixture_session(42);
        let (s2, _, _) = fixture_session(42);
        let (s3, _, _) = fixture_session(43);
        assert_eq!(s1.rand_offset, s2.rand_offset);
        assert_ne!(s1.rand_offset, s3.rand_offset);
    }
}
