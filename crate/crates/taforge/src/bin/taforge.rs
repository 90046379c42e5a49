//! Command-line front end for the TA toolkit pipeline: merge split images,
//! inspect/load containers, run a harnessed input, fuzz, triage crash inputs,
//! and generate test fixtures.
//!
//! Exit codes: 0 ok; 1 usage; 2 parse/format error; 3 crash(es) found;
//! 4 internal error. Reports go to stdout (machine-readable lines prefixed
//! `##`); diagnostics go to stderr.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};

use taforge::cpu::Exit;
use taforge::elf::ElfClass;
use taforge::fixture::{self, DepLibManifest, FixtureManifest};
use taforge::fuzz::{self, FuzzConfig};
use taforge::harness::{self, Session};
use taforge::loader;
use taforge::mem::AddressSpace;
use taforge::triage::{self, CrashSet};
use taforge::{inspect, merge};

#[derive(Parser)]
#[command(name = "taforge", version, about = "TrustZone TA merge/load/run/fuzz toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Merge NAME.mdt + NAME.bXX back into one ELF.
    Merge {
        /// Path prefix of the split image (without .mdt/.bXX extension).
        prefix: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Print headers, dynamic entries, symbols, and relocations.
    Inspect { elf: PathBuf },
    /// Load an image plus dependencies and print the GOT patch table.
    Load {
        elf: PathBuf,
        /// Dependency libraries, searched in order (first match wins).
        #[arg(long = "dep")]
        deps: Vec<PathBuf>,
    },
    /// Execute one input under a harness spec and print the outcome.
    Run {
        elf: PathBuf,
        #[arg(long)]
        harness: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "dep")]
        deps: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Coverage-guided fuzzing campaign.
    Fuzz {
        elf: PathBuf,
        #[arg(long)]
        harness: PathBuf,
        /// Directory of seed inputs (every regular file is a seed).
        #[arg(long)]
        seeds: PathBuf,
        #[arg(long = "dep")]
        deps: Vec<PathBuf>,
        /// Dictionary file: one hex token per line.
        #[arg(long)]
        dict: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long, default_value_t = 50_000)]
        max_iters: u64,
        #[arg(long)]
        max_seconds: Option<u64>,
        #[arg(long)]
        max_crashes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for corpus/ and crashes/.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Replay crash inputs (*.bin) and print a deduplicated summary.
    Triage {
        crash_dir: PathBuf,
        #[arg(long)]
        elf: PathBuf,
        #[arg(long)]
        harness: PathBuf,
        #[arg(long = "dep")]
        deps: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate TA + dependency fixtures from a manifest.
    GenFixture {
        manifest: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
}

/// Tool failure with its process exit code; "crashes found" (3) is a success
/// path and returned directly by the command handlers.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn data(message: impl ToString) -> Self {
        CliError { code: 2, message: message.to_string() }
    }

    fn internal(message: impl ToString) -> Self {
        CliError { code: 4, message: message.to_string() }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn read_deps(paths: &[PathBuf]) -> Result<Vec<Vec<u8>>, CliError> {
    paths.iter().map(|p| read_file(p)).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::internal(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::internal(format!("{}: {e}", path.display())))
}

/// TAFORGE_SEED overrides any --seed flag.
fn effective_seed(flag: u64) -> Result<u64, CliError> {
    match std::env::var("TAFORGE_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::data(format!("TAFORGE_SEED is not an integer: {v:?}"))),
        Err(_) => Ok(flag),
    }
}

fn build_session(
    elf_path: &Path,
    harness_path: &Path,
    dep_paths: &[PathBuf],
    seed: u64,
) -> Result<(Session, harness::HarnessSpec), CliError> {
    let ta = read_file(elf_path)?;
    let deps = read_deps(dep_paths)?;
    let spec_text = std::fs::read_to_string(harness_path)
        .map_err(|e| CliError::data(format!("{}: {e}", harness_path.display())))?;
    let spec = harness::parse_spec(&spec_text).map_err(CliError::data)?;
    let dep_refs: Vec<&[u8]> = deps.iter().map(|d| d.as_slice()).collect();
    let session = Session::build(&ta, &dep_refs, &spec, seed).map_err(CliError::data)?;
    Ok((session, spec))
}

fn cmd_merge(prefix: &Path, output: &Path) -> Result<u8, CliError> {
    let mdt_path = prefix.with_extension("mdt");
    let mdt = read_file(&mdt_path)?;
    let plan = merge::plan_merge(&mdt).map_err(CliError::data)?;
    let mut files = BTreeMap::new();
    for placement in &plan.placements {
        let path = prefix.with_extension(format!("b{:02}", placement.file_index));
        match std::fs::read(&path) {
            Ok(bytes) => {
                files.insert(placement.file_index, bytes);
            }
            Err(_) if placement.expected_len == 0 => {}
            Err(e) => return Err(CliError::data(format!("{}: {e}", path.display()))),
        }
    }
    let merged = merge::merge(&plan, &mdt, &files).map_err(CliError::data)?;
    write_file(output, &merged)?;
    let class = match plan.class {
        ElfClass::Elf32 => 1,
        ElfClass::Elf64 => 2,
    };
    println!(
        "## merge class={} segments={} files={} bytes={}",
        class,
        plan.bxx_count,
        plan.total_files(),
        merged.len()
    );
    Ok(0)
}

fn cmd_inspect(elf_path: &Path) -> Result<u8, CliError> {
    let bytes = read_file(elf_path)?;
    let text = inspect::render(&bytes).map_err(CliError::data)?;
    print!("{text}");
    println!("## inspect bytes={}", bytes.len());
    Ok(0)
}

fn cmd_load(elf_path: &Path, dep_paths: &[PathBuf]) -> Result<u8, CliError> {
    let ta_bytes = read_file(elf_path)?;
    let deps = read_deps(dep_paths)?;
    let mut space = AddressSpace::new();
    let image = taforge::elf::parse_container(&ta_bytes).map_err(CliError::data)?;
    let mut ta = loader::load_image(&mut space, image, 0).map_err(CliError::data)?;
    let mut dep_modules = Vec::new();
    for dep in &deps {
        let image = taforge::elf::parse_container(dep).map_err(CliError::data)?;
        dep_modules.push(loader::load_image(&mut space, image, 0).map_err(CliError::data)?);
    }
    let mut stubs = loader::StubRegistry::new(&mut space).map_err(CliError::data)?;
    let dep_refs: Vec<&loader::LoadedModule> = dep_modules.iter().collect();
    let patches =
        loader::resolve_imports(&mut space, &mut ta, &dep_refs, &mut stubs).map_err(CliError::data)?;
    for region in space.regions() {
        println!(
            "region base={:#x} len={:#x} perms={:#x} label={}",
            region.base, region.length, region.perms, region.label
        );
    }
    for patch in &patches {
        println!(
            "## got slot={:#x} symbol={} resolved={:#x} stub={}",
            patch.slot, patch.symbol, patch.resolved, patch.via_stub
        );
    }
    println!("## load modules={} patches={}", 1 + dep_modules.len(), patches.len());
    Ok(0)
}

fn cmd_run(
    elf_path: &Path,
    harness_path: &Path,
    input_path: &Path,
    dep_paths: &[PathBuf],
    seed: u64,
) -> Result<u8, CliError> {
    let seed = effective_seed(seed)?;
    let (mut session, spec) = build_session(elf_path, harness_path, dep_paths, seed)?;
    let input = read_file(input_path)?;
    let outcome = session.run_once(&spec, &input).map_err(CliError::data)?;
    let exit = match &outcome.result.exit {
        Exit::ReachedStop(pc) => format!("stop:{pc:#x}"),
        Exit::HookStop => "hook-stop".to_string(),
        Exit::InstructionBudget => "budget".to_string(),
        Exit::Fault(_) => "fault".to_string(),
    };
    println!(
        "## run exit={} instructions={} coverage_cells={}",
        exit,
        outcome.result.instructions_executed,
        outcome.coverage.len()
    );
    match triage::classify(&outcome, seed) {
        Some(report) => {
            print!("{}", report.render());
            println!("## crash key={}", report.dedup_key());
            Ok(3)
        }
        None => {
            print!("{}", outcome.register_dump());
            Ok(0)
        }
    }
}

fn read_seed_dir(dir: &Path) -> Result<Vec<Vec<u8>>, CliError> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    entries.iter().map(|p| read_file(p)).collect()
}

fn read_dictionary(path: &Path) -> Result<Vec<Vec<u8>>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut tokens = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let hex = line.trim_start_matches("0x");
        if hex.len() % 2 != 0 || !hex.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(CliError::data(format!(
                "{}:{}: dictionary tokens are even-length hex strings",
                path.display(),
                i + 1
            )));
        }
        tokens.push(
            (0..hex.len())
                .step_by(2)
                .map(|j| u8::from_str_radix(&hex[j..j + 2], 16).unwrap())
                .collect(),
        );
    }
    Ok(tokens)
}

#[allow(clippy::too_many_arguments)]
fn cmd_fuzz(
    elf_path: &Path,
    harness_path: &Path,
    seeds_dir: &Path,
    dep_paths: &[PathBuf],
    dict_path: Option<&Path>,
    workers: usize,
    max_iters: u64,
    max_seconds: Option<u64>,
    max_crashes: Option<usize>,
    seed: u64,
    output: &Path,
) -> Result<u8, CliError> {
    let seed = effective_seed(seed)?;
    let ta = read_file(elf_path)?;
    let deps = read_deps(dep_paths)?;
    let spec_text = std::fs::read_to_string(harness_path)
        .map_err(|e| CliError::data(format!("{}: {e}", harness_path.display())))?;
    let spec = harness::parse_spec(&spec_text).map_err(CliError::data)?;
    let seeds = read_seed_dir(seeds_dir)?;
    let dictionary = match dict_path {
        Some(p) => read_dictionary(p)?,
        None => fuzz::default_dictionary(),
    };
    let config = FuzzConfig {
        seed,
        max_iters,
        max_unique_crashes: max_crashes,
        time_limit: max_seconds.map(Duration::from_secs),
        dictionary,
        workers,
        ..Default::default()
    };
    let dep_refs: Vec<&[u8]> = deps.iter().map(|d| d.as_slice()).collect();
    let report = fuzz::fuzz(&ta, &dep_refs, &spec, &seeds, &config).map_err(CliError::data)?;

    for (i, entry) in report.corpus.entries.iter().enumerate() {
        write_file(&output.join(format!("corpus/{i:05}.bin")), &entry.input)?;
    }
    for (i, (key, crash, count)) in report.crashes.iter().enumerate() {
        write_file(&output.join(format!("crashes/{i:03}.bin")), &crash.input)?;
        write_file(
            &output.join(format!("crashes/{i:03}.txt")),
            format!("key: {key}\noccurrences: {count}\n{}", crash.render()).as_bytes(),
        )?;
    }
    eprintln!("execs/sec: {:.0}", report.execs_per_second());
    println!(
        "## fuzz iterations={} corpus={} unique_crashes={}",
        report.iterations,
        report.corpus.len(),
        report.crashes.len()
    );
    for (key, _, count) in report.crashes.iter() {
        println!("## crash key={key} count={count}");
    }
    Ok(if report.crashes.is_empty() { 0 } else { 3 })
}

fn cmd_triage(
    crash_dir: &Path,
    elf_path: &Path,
    harness_path: &Path,
    dep_paths: &[PathBuf],
    seed: u64,
) -> Result<u8, CliError> {
    let seed = effective_seed(seed)?;
    let (mut session, spec) = build_session(elf_path, harness_path, dep_paths, seed)?;
    let mut inputs: Vec<PathBuf> = std::fs::read_dir(crash_dir)
        .map_err(|e| CliError::data(format!("{}: {e}", crash_dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|ext| ext == "bin"))
        .collect();
    inputs.sort();
    let mut set = CrashSet::new();
    let mut replayed = 0usize;
    for path in &inputs {
        let input = read_file(path)?;
        let outcome = session.run_once(&spec, &input).map_err(CliError::data)?;
        if let Some(report) = triage::classify(&outcome, seed) {
            set.insert(report);
        }
        replayed += 1;
    }
    for (key, report, count) in set.iter() {
        println!("## crash key={key} count={count}");
        print!("{}", report.render());
    }
    println!("## triage inputs={} unique_crashes={}", replayed, set.len());
    Ok(if set.is_empty() { 0 } else { 3 })
}

fn cmd_gen_fixture(manifest_path: &Path, output: &Path) -> Result<u8, CliError> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| CliError::data(format!("{}: {e}", manifest_path.display())))?;
    let manifest = FixtureManifest::parse(&text).map_err(CliError::data)?;
    let fx = fixture::vulnerable_ta(&manifest);
    let dep = fixture::dependency_lib(&DepLibManifest::default_lib());

    std::fs::create_dir_all(output)
        .map_err(|e| CliError::internal(format!("{}: {e}", output.display())))?;
    write_file(&output.join(format!("{}.elf", manifest.name)), &fx.elf)?;
    let split_files = fixture::emit_split(&fx.elf, &manifest.name, output)
        .map_err(|e| CliError::internal(e.to_string()))?;
    write_file(
        &output.join(format!("{}.harness", manifest.name)),
        fx.harness_text.as_bytes(),
    )?;
    write_file(&output.join("cmnlib.elf"), &dep.elf)?;
    write_file(&output.join("seeds/00000.bin"), &vec![0u8; 64])?;
    if manifest.vulnerable {
        write_file(&output.join("known_crash.bin"), &fx.known_crash_input)?;
    }
    println!(
        "## gen-fixture name={} vulnerable={} split_files={} start={:#x} stop={:#x}",
        manifest.name,
        manifest.vulnerable,
        split_files.len(),
        fx.start_addr,
        fx.stop_addr
    );
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<u8, CliError> {
    match cli.cmd {
        Cmd::Merge { prefix, output } => cmd_merge(&prefix, &output),
        Cmd::Inspect { elf } => cmd_inspect(&elf),
        Cmd::Load { elf, deps } => cmd_load(&elf, &deps),
        Cmd::Run { elf, harness, input, deps, seed } => {
            cmd_run(&elf, &harness, &input, &deps, seed)
        }
        Cmd::Fuzz {
            elf,
            harness,
            seeds,
            deps,
            dict,
            workers,
            max_iters,
            max_seconds,
            max_crashes,
            seed,
            output,
        } => cmd_fuzz(
            &elf,
            &harness,
            &seeds,
            &deps,
            dict.as_deref(),
            workers,
            max_iters,
            max_seconds,
            max_crashes,
            seed,
            &output,
        ),
        Cmd::Triage { crash_dir, elf, harness, deps, seed } => {
            cmd_triage(&crash_dir, &elf, &harness, &deps, seed)
        }
        Cmd::GenFixture { manifest, output } => cmd_gen_fixture(&manifest, &output),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own message (help/version go to stdout).
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
