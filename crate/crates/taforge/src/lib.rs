//! taforge: reconstruct split TrustZone trusted-application images, load and
//! partially emulate them with dependency-symbol resolution, and drive a
//! coverage-guided persistent-mode fuzzer with crash triage.
//!
//! The crate is organized as a pipeline:
//!
//! * [`elf`] / [`merge`] — parse ELF containers and rebuild them from the
//!   scattered `NAME.mdt` + `NAME.bXX` on-disk layout.
//! * [`mem`] / [`loader`] / [`cpu`] — sparse emulated memory, PT_LOAD mapping
//!   with eager GOT patching, and a reference AArch64 interpreter subset.
//! * [`harness`] / [`fuzz`] / [`triage`] — declarative pre-run environment,
//!   the persistent fuzzing loop, and crash classification/dedup.
//! * [`fixture`] — synthesizes miniature TA / dependency-library ELFs used as
//!   hermetic test targets, including a deliberately vulnerable unchecked copy.

pub mod cpu;
pub mod elf;
pub mod fixture;
pub mod fuzz;
pub mod harness;
pub mod inspect;
pub mod loader;
pub mod mem;
pub mod merge;
pub mod mutate;
pub mod triage;
