//! Coverage-guided fuzzing: an edge-counter map with AFL-style bucketing, a
//! corpus admitting inputs that light up a new (edge, bucket) pair, and a
//! deterministic mutation schedule (walking bit flips, dictionary placement,
//! then havoc batches) per corpus entry.
//!
//! Workers are data-parallel: each builds its own [`Session`] over the same
//! images and fuzzes an iteration slice with a per-worker RNG stream; reports
//! are merged afterwards. The `parallel` feature (default) fans workers out
//! over rayon; without it the same workers run back to back.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::harness::{HarnessError, HarnessSpec, Session};
use crate::mutate::{self};
use crate::triage::{self, CrashSet};

pub const MAP_SIZE: usize = 1 << 16;

/// Golden-ratio multiplicative hash of a pc into the coverage index space.
fn hash_pc(pc: u64) -> u16 {
    (pc.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 48) as u16
}

/// 64Ki saturating edge counters indexed by hash(from) ^ hash(to).
pub struct CoverageMap {
    counts: Vec<u8>,
}

impl Default for CoverageMap {
    fn default() -> Self {
        Self::new()
    }
}

impl CoverageMap {
    pub fn new() -> Self {
        CoverageMap { counts: vec![0; MAP_SIZE] }
    }

    pub fn edge_index(from: u64, to: u64) -> u16 {
        hash_pc(from) ^ hash_pc(to)
    }

    pub fn observe(&mut self, from: u64, to: u64) {
        let idx = Self::edge_index(from, to) as usize;
        self.counts[idx] = self.counts[idx].saturating_add(1);
    }

    pub fn clear(&mut self) {
        self.counts.fill(0);
    }

    /// Nonzero cells as (index, count).
    pub fn nonzero(&self) -> Vec<(u16, u8)> {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0)
            .map(|(i, &c)| (i as u16, c))
            .collect()
    }
}

/// AFL-style hit-count bucket: 1, 2, 3, 4-7, 8-15, 16-31, 32-127, 128-255
/// collapse to indices 0..=7.
pub fn bucket(count: u8) -> u8 {
    match count {
        0 => unreachable!("bucket of a zero count"),
        1 => 0,
        2 => 1,
        3 => 2,
        4..=7 => 3,
        8..=15 => 4,
        16..=31 => 5,
        32..=127 => 6,
        _ => 7,
    }
}

#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub input: Vec<u8>,
    pub coverage: Vec<(u16, u8)>,
}

/// Inputs retained because they produced a previously unseen (edge, bucket)
/// pair; `seen` is a per-edge bitmask over the eight buckets.
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
    seen: Vec<u8>,
}

impl Default for Corpus {
    fn default() -> Self {
        Self::new()
    }
}

impl Corpus {
    pub fn new() -> Self {
        Corpus { entries: Vec::new(), seen: vec![0; MAP_SIZE] }
    }

    /// Admit when any covered cell sets a new bucket bit. Always records the
    /// bits either way.
    pub fn admit(&mut self, input: &[u8], coverage: &[(u16, u8)]) -> bool {
        let mut novel = false;
        for &(idx, count) in coverage {
            let bit = 1u8 << bucket(count);
            if self.seen[idx as usize] & bit == 0 {
                self.seen[idx as usize] |= bit;
                novel = true;
            }
        }
        if novel {
            self.entries.push(CorpusEntry {
                input: input.to_vec(),
                coverage: coverage.to_vec(),
            });
        }
        novel
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Dictionary seeded with the fixture protocol's magic values: the Widevine
/// and DrmProv command ids, the session-id bound, and an oversized length.
pub fn default_dictionary() -> Vec<Vec<u8>> {
    vec![
        0x0006_0001u32.to_le_bytes().to_vec(),
        0x0006_0002u32.to_le_bytes().to_vec(),
        0x0005_0001u32.to_le_bytes().to_vec(),
        0x32u32.to_le_bytes().to_vec(),
        vec![0xFF, 0xFF],
    ]
}

#[derive(Debug, Clone)]
pub struct FuzzConfig {
    pub seed: u64,
    pub max_iters: u64,
    /// Stop once this many unique crash keys have been seen.
    pub max_unique_crashes: Option<usize>,
    pub time_limit: Option<Duration>,
    pub dictionary: Vec<Vec<u8>>,
    pub havoc_stacked: usize,
    pub workers: usize,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig {
            seed: 0,
            max_iters: 50_000,
            max_unique_crashes: None,
            time_limit: None,
            dictionary: default_dictionary(),
            havoc_stacked: 6,
            workers: 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum FuzzError {
    #[error("the fuzzer needs at least one seed input")]
    NoSeeds,
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

pub struct FuzzReport {
    pub iterations: u64,
    pub corpus: Corpus,
    pub crashes: CrashSet,
    pub elapsed: Duration,
}

impl FuzzReport {
    pub fn execs_per_second(&self) -> f64 {
        self.iterations as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }
}

const BITFLIP_WIDTHS: [u8; 3] = [1, 2, 4];
const HAVOC_BATCH: usize = 128;

enum Stage {
    BitFlip { width_idx: usize, cursor: usize },
    Dict { token: usize, offset: usize },
    Havoc { remaining: usize },
}

/// Deterministic per-entry mutation schedule. Walks each corpus entry through
/// 1/2/4-bit flips, every dictionary token at every offset, then a havoc
/// batch, and moves to the next entry (wrapping, so newly admitted entries
/// get their turn).
struct StageScheduler {
    entry: usize,
    stage: Stage,
}

impl StageScheduler {
    fn new() -> Self {
        StageScheduler { entry: 0, stage: Stage::BitFlip { width_idx: 0, cursor: 0 } }
    }

    fn next(
        &mut self,
        corpus: &Corpus,
        rng: &mut ChaCha8Rng,
        dictionary: &[Vec<u8>],
        max_len: usize,
        havoc_stacked: usize,
    ) -> Vec<u8> {
        loop {
            self.entry %= corpus.entries.len();
            let base = &corpus.entries[self.entry].input;
            match &mut self.stage {
                Stage::BitFlip { width_idx, cursor } => {
                    let width = BITFLIP_WIDTHS[*width_idx];
                    if let Some(out) = mutate::bit_flip(base, width, *cursor) {
                        *cursor += 1;
                        return out;
                    }
                    *cursor = 0;
                    *width_idx += 1;
                    if *width_idx == BITFLIP_WIDTHS.len() {
                        self.stage = Stage::Dict { token: 0, offset: 0 };
                    }
                }
                Stage::Dict { token, offset } => {
                    if *token >= dictionary.len() {
                        self.stage = Stage::Havoc { remaining: HAVOC_BATCH };
                        continue;
                    }
                    if *offset > base.len() {
                        *offset = 0;
                        *token += 1;
                        continue;
                    }
                    let placed =
                        mutate::dictionary_place(base, &dictionary[*token], *offset, max_len);
                    *offset += 1;
                    if let Some(out) = placed {
                        return out;
                    }
                }
                Stage::Havoc { remaining } => {
                    if *remaining == 0 {
                        self.entry += 1;
                        self.stage = Stage::BitFlip { width_idx: 0, cursor: 0 };
                        continue;
                    }
                    *remaining -= 1;
                    return mutate::havoc(base, rng, dictionary, max_len, havoc_stacked);
                }
            }
        }
    }
}

struct WorkerReport {
    iterations: u64,
    corpus: Vec<CorpusEntry>,
    crashes: CrashSet,
}

#[allow(clippy::too_many_arguments)]
fn run_worker(
    ta_elf: &[u8],
    dep_elfs: &[&[u8]],
    spec: &HarnessSpec,
    seeds: &[Vec<u8>],
    config: &FuzzConfig,
    worker_index: u64,
    iter_budget: u64,
    deadline: Option<Instant>,
) -> Result<WorkerReport, FuzzError> {
    let mut session = Session::build(ta_elf, dep_elfs, spec, config.seed)?;
    // Distinct RNG stream per worker; the session seed stays shared so replay
    // lines are uniform across workers.
    let mut rng =
        ChaCha8Rng::seed_from_u64(config.seed ^ worker_index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let max_len = spec.input_max_len as usize;
    let mut corpus = Corpus::new();
    let mut crashes = CrashSet::new();
    let mut scheduler = StageScheduler::new();
    let mut iterations = 0u64;

    let execute = |session: &mut Session,
                       input: &[u8],
                       corpus: &mut Corpus,
                       crashes: &mut CrashSet|
     -> Result<(), FuzzError> {
        let mut input = input.to_vec();
        input.truncate(max_len);
        let outcome = session.run_once(spec, &input)?;
        match triage::classify(&outcome, config.seed) {
            Some(report) => {
                crashes.insert(report);
            }
            None => {
                corpus.admit(&outcome.input, &outcome.coverage);
            }
        }
        Ok(())
    };

    for seed_input in seeds {
        execute(&mut session, seed_input, &mut corpus, &mut crashes)?;
        iterations += 1;
    }
    // Keep at least one corpus entry so the scheduler has a base to mutate.
    if corpus.is_empty() {
        corpus.entries.push(CorpusEntry { input: seeds[0].clone(), coverage: Vec::new() });
    }

    while iterations < iter_budget {
        if let Some(d) = deadline {
            if Instant::now() >= d {
                break;
            }
        }
        if let Some(limit) = config.max_unique_crashes {
            if crashes.len() >= limit {
                break;
            }
        }
        let input =
            scheduler.next(&corpus, &mut rng, &config.dictionary, max_len, config.havoc_stacked);
        execute(&mut session, &input, &mut corpus, &mut crashes)?;
        iterations += 1;
    }

    Ok(WorkerReport { iterations, corpus: corpus.entries, crashes })
}

fn merge_reports(workers: Vec<WorkerReport>, elapsed: Duration) -> FuzzReport {
    let mut corpus = Corpus::new();
    let mut crashes = CrashSet::new();
    let mut iterations = 0;
    for w in workers {
        iterations += w.iterations;
        for entry in w.corpus {
            corpus.admit(&entry.input, &entry.coverage);
        }
        crashes.merge(w.crashes);
    }
    FuzzReport { iterations, corpus, crashes, elapsed }
}

fn worker_budgets(config: &FuzzConfig) -> Vec<u64> {
    let workers = config.workers.max(1) as u64;
    let per = config.max_iters / workers;
    let mut budgets = vec![per; workers as usize];
    budgets[0] += config.max_iters % workers;
    budgets
}

/// Run the campaign with every worker executed sequentially on the calling
/// thread. Always available; the semantics baseline the parallel path is
/// measured against.
pub fn fuzz_sequential(
    ta_elf: &[u8],
    dep_elfs: &[&[u8]],
    spec: &HarnessSpec,
    seeds: &[Vec<u8>],
    config: &FuzzConfig,
) -> Result<FuzzReport, FuzzError> {
    if seeds.is_empty() {
        return Err(FuzzError::NoSeeds);
    }
    let start = Instant::now();
    let deadline = config.time_limit.map(|d| start + d);
    let mut reports = Vec::new();
    for (i, budget) in worker_budgets(config).into_iter().enumerate() {
        reports.push(run_worker(
            ta_elf, dep_elfs, spec, seeds, config, i as u64, budget, deadline,
        )?);
    }
    Ok(merge_reports(reports, start.elapsed()))
}

/// Run the campaign with workers fanned out over rayon.
#[cfg(feature = "parallel")]
pub fn fuzz_parallel(
    ta_elf: &[u8],
    dep_elfs: &[&[u8]],
    spec: &HarnessSpec,
    seeds: &[Vec<u8>],
    config: &FuzzConfig,
) -> Result<FuzzReport, FuzzError> {
    use rayon::prelude::*;

    if seeds.is_empty() {
        return Err(FuzzError::NoSeeds);
    }
    let start = Instant::now();
    let deadline = config.time_limit.map(|d| start + d);
    let reports: Result<Vec<WorkerReport>, FuzzError> = worker_budgets(config)
        .into_par_iter()
        .enumerate()
        .map(|(i, budget)| {
            run_worker(ta_elf, dep_elfs, spec, seeds, config, i as u64, budget, deadline)
        })
        .collect();
    Ok(merge_reports(reports?, start.elapsed()))
}

/// Campaign entry point: parallel when the `parallel` feature is enabled,
/// sequential otherwise.
pub fn fuzz(
    ta_elf: &[u8],
    dep_elfs: &[&[u8]],
    spec: &HarnessSpec,
    seeds: &[Vec<u8>],
    config: &FuzzConfig,
) -> Result<FuzzReport, FuzzError> {
    #[cfg(feature = "parallel")]
    {
        fuzz_parallel(ta_elf, dep_elfs, spec, seeds, config)
    }
    #[cfg(not(feature = "parallel"))]
    {
        fuzz_sequential(ta_elf, dep_elfs, spec, seeds, config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::{self, FixtureManifest};
    use crate::harness::parse_spec;
    use crate::triage::CrashKind;

    #[test]
    fn bucketing_matches_the_documented_ranges() {
        let cases = [
            (1u8, 0u8),
            (2, 1),
            (3, 2),
            (4, 3),
            (7, 3),
            (8, 4),
            (15, 4),
            (16, 5),
            (31, 5),
            (32, 6),
            (127, 6),
            (128, 7),
            (255, 7),
        ];
        for (count, expected) in cases {
            assert_eq!(bucket(count), expected, "count {count}");
        }
    }

    #[test]
    fn coverage_map_is_deterministic_and_clearable() {
        let mut a = CoverageMap::new();
        let mut b = CoverageMap::new();
        for (f, t) in [(0x1000u64, 0x2000u64), (0x2000, 0x1000), (0x1000, 0x2000)] {
            a.observe(f, t);
            b.observe(f, t);
        }
        assert_eq!(a.nonzero(), b.nonzero());
        assert!(!a.nonzero().is_empty());
        a.clear();
        assert!(a.nonzero().is_empty());
    }

    #[test]
    fn corpus_admits_new_edges_then_new_buckets_only() {
        let mut corpus = Corpus::new();
        assert!(corpus.admit(b"a", &[(5, 1)]));
        assert!(!corpus.admit(b"b", &[(5, 1)]));
        // Same edge, higher bucket: novel.
        assert!(corpus.admit(b"c", &[(5, 4)]));
        assert!(!corpus.admit(b"d", &[(5, 5)])); // 4 and 5 share bucket 3
        assert_eq!(corpus.len(), 2);
    }

    #[test]
    fn no_seeds_is_an_error() {
        let fx = fixture::vulnerable_ta(&FixtureManifest::vulnerable_ta_default());
        let spec = parse_spec(&fx.harness_text).unwrap();
        let config = FuzzConfig { max_iters: 10, workers: 1, ..Default::default() };
        assert!(matches!(
            fuzz_sequential(&fx.elf, &[], &spec, &[], &config),
            Err(FuzzError::NoSeeds)
        ));
    }

    #[test]
    fn campaign_finds_the_unchecked_copy_crash() {
        let fx = fixture::vulnerable_ta(&FixtureManifest::vulnerable_ta_default());
        let dep = fixture::dependency_lib(&fixture::DepLibManifest::default_lib());
        let spec = parse_spec(&fx.harness_text).unwrap();
        let config = FuzzConfig {
            seed: 1,
            max_iters: 20_000,
            max_unique_crashes: Some(1),
            workers: 1,
            ..Default::default()
        };
        let seeds = vec![vec![0u8; 24]];
        let report =
            fuzz_sequential(&fx.elf, &[dep.elf.as_slice()], &spec, &seeds, &config).unwrap();
        assert!(
            report.crashes.iter().any(|(_, r, _)| r.kind == CrashKind::UnmappedWrite),
            "expected an unmapped write among {} unique crashes after {} iters",
            report.crashes.len(),
            report.iterations
        );
        assert!(report.corpus.len() > 1, "coverage feedback should grow the corpus");
    }

    #[test]
    fn campaigns_replay_identically_for_a_seed() {
        let fx = fixture::vulnerable_ta(&FixtureManifest::vulnerable_ta_default());
        let dep = fixture::dependency_lib(&fixture::DepLibManifest::default_lib());
        let spec = parse_spec(&fx.harness_text).unwrap();
        let config = FuzzConfig { seed: 7, max_iters: 1500, workers: 1, ..Default::default() };
        let seeds = vec![vec![0u8; 24]];
        let a = fuzz_sequential(&fx.elf, &[dep.elf.as_slice()], &spec, &seeds, &config).unwrap();
        let b = fuzz_sequential(&fx.elf, &[dep.elf.as_slice()], &spec, &seeds, &config).unwrap();
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.corpus.len(), b.corpus.len());
        assert_eq!(
            a.crashes.iter().map(|(k, _, c)| (k.to_string(), c)).collect::<Vec<_>>(),
            b.crashes.iter().map(|(k, _, c)| (k.to_string(), c)).collect::<Vec<_>>()
        );
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_and_sequential_agree_on_unique_crashes() {
        let fx = fixture::vulnerable_ta(&FixtureManifest::vulnerable_ta_default());
        let dep = fixture::dependency_lib(&fixture::DepLibManifest::default_lib());
        let spec = parse_spec(&fx.harness_text).unwrap();
        let config = FuzzConfig { seed: 3, max_iters: 8_000, workers: 2, ..Default::default() };
        let seeds = vec![vec![0u8; 24]];
        let seq = fuzz_sequential(&fx.elf, &[dep.elf.as_slice()], &spec, &seeds, &config).unwrap();
        let par = fuzz_parallel(&fx.elf, &[dep.elf.as_slice()], &spec, &seeds, &config).unwrap();
        assert_eq!(seq.iterations, par.iterations);
        assert_eq!(
            seq.crashes.iter().map(|(k, _, _)| k.to_string()).collect::<Vec<_>>(),
            par.crashes.iter().map(|(k, _, _)| k.to_string()).collect::<Vec<_>>()
        );
    }
}
