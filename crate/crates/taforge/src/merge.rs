//! Reconstruct one ELF from the scattered `NAME.mdt` + `NAME.b00..bNN` layout
//! used by the QSEECom load path, and split an ELF back into that layout for
//! fixture creation. File-to-segment correspondence is by index: bXX backs
//! program header XX.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::elf::{self, ElfClass, ElfError};

#[derive(Debug, Error)]
pub enum MergeError {
    #[error(transparent)]
    Elf(#[from] ElfError),
    #[error("missing segment file b{0:02} for a segment with p_filesz > 0")]
    MissingSegmentFile(usize),
    #[error("segment file b{index:02} is {got:#x} bytes, expected at most {expected:#x}")]
    SegmentFileTooLarge { index: usize, got: u64, expected: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub file_index: usize,
    pub target_offset: u64,
    pub expected_len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergePlan {
    pub class: ElfClass,
    /// Segment count read from the header; the scattered layout has
    /// bxx_count + 1 files in total (the extra one is the .mdt).
    pub bxx_count: usize,
    pub placements: Vec<Placement>,
}

impl MergePlan {
    pub fn total_files(&self) -> usize {
        self.bxx_count + 1
    }
}

/// Build a merge plan from the `.mdt` header file: one placement per program
/// header, targeting that header's p_offset.
pub fn plan_merge(mdt_bytes: &[u8]) -> Result<MergePlan, MergeError> {
    let image = elf::parse_container(mdt_bytes)?;
    let placements = image
        .segments
        .iter()
        .enumerate()
        .map(|(i, seg)| Placement {
            file_index: i,
            target_offset: seg.p_offset,
            expected_len: seg.p_filesz,
        })
        .collect();
    Ok(MergePlan {
        class: image.identity.class,
        bxx_count: image.identity.phnum as usize,
        placements,
    })
}

/// Merge the scattered files back into a single ELF. The output buffer is
/// zero-initialized and sized to the furthest segment-backed byte; the mdt is
/// copied at offset 0 first, then each bXX in ascending index order (later
/// writes win overlaps).
pub fn merge(
    plan: &MergePlan,
    mdt_bytes: &[u8],
    files: &BTreeMap<usize, Vec<u8>>,
) -> Result<Vec<u8>, MergeError> {
    for p in &plan.placements {
        match files.get(&p.file_index) {
            Some(data) if data.len() as u64 > p.expected_len => {
                return Err(MergeError::SegmentFileTooLarge {
                    index: p.file_index,
                    got: data.len() as u64,
                    expected: p.expected_len,
                });
            }
            Some(_) => {}
            None if p.expected_len > 0 => {
                return Err(MergeError::MissingSegmentFile(p.file_index));
            }
            None => {}
        }
    }

    let out_len = plan
        .placements
        .iter()
        .map(|p| p.target_offset + p.expected_len)
        .max()
        .unwrap_or(0)
        .max(mdt_bytes.len() as u64) as usize;
    let mut out = vec![0u8; out_len];
    out[..mdt_bytes.len()].copy_from_slice(mdt_bytes);
    for p in &plan.placements {
        if let Some(data) = files.get(&p.file_index) {
            let start = p.target_offset as usize;
            out[start..start + data.len()].copy_from_slice(data);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SplitOutput {
    /// Header + program-header table (+ bytes up to the first segment's
    /// p_offset).
    pub mdt: Vec<u8>,
    /// One entry per program header: `elf[p_offset .. p_offset + p_filesz]`.
    pub segment_files: Vec<Vec<u8>>,
}

impl SplitOutput {
    /// On-disk names: `<name>.mdt`, `<name>.b00` ... `<name>.bNN`.
    pub fn file_names(&self, name: &str) -> Vec<String> {
        let mut names = vec![format!("{name}.mdt")];
        for i in 0..self.segment_files.len() {
            names.push(format!("{name}.b{i:02}"));
        }
        names
    }
}

/// Split an ELF into the scattered mdt/bXX layout. Inverse of [`merge`] over
/// the header region and all segment-backed ranges.
pub fn split(elf_bytes: &[u8]) -> Result<SplitOutput, MergeError> {
    let image = elf::parse_container(elf_bytes)?;
    let id = &image.identity;
    let header_end = id.phoff + id.phentsize as u64 * id.phnum as u64;
    let first_seg_offset = image
        .segments
        .iter()
        .map(|s| s.p_offset)
        .min()
        .unwrap_or(header_end);
    let mdt_len = header_end.max(first_seg_offset).min(elf_bytes.len() as u64) as usize;
    let mdt = elf_bytes[..mdt_len].to_vec();

    let mut segment_files = Vec::with_capacity(image.segments.len());
    for seg in &image.segments {
        let start = seg.p_offset as usize;
        let end = (seg.p_offset + seg.p_filesz) as usize;
        if end > elf_bytes.len() {
            return Err(MergeError::Elf(ElfError::Truncated {
                what: "segment contents",
                offset: seg.p_offset,
            }));
        }
        segment_files.push(elf_bytes[start..end].to_vec());
    }
    Ok(SplitOutput { mdt, segment_files })
}

/// Convenience round trip used by tests and the CLI: split then re-merge.
pub fn remerge(split_out: &SplitOutput) -> Result<Vec<u8>, MergeError> {
    let plan = plan_merge(&split_out.mdt)?;
    let files: BTreeMap<usize, Vec<u8>> = split_out
        .segment_files
        .iter()
        .cloned()
        .enumerate()
        .collect();
    merge(&plan, &split_out.mdt, &files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture;

    #[test]
    fn plan_counts_match_header() {
        let elf = fixture::random_container(7, 4, ElfClass::Elf64);
        let out = split(&elf).unwrap();
        let plan = plan_merge(&out.mdt).unwrap();
        assert_eq!(plan.bxx_count, 4);
        assert_eq!(plan.total_files(), 5);
    }

    #[test]
    fn reserved_phnum_propagates() {
        let mut elf = fixture::random_container(1, 1, ElfClass::Elf64);
        elf[0x38..0x3A].copy_from_slice(&0xFFFFu16.to_le_bytes());
        assert!(matches!(
            plan_merge(&elf),
            Err(MergeError::Elf(ElfError::ReservedPhnum))
        ));
    }

    #[test]
    fn missing_segment_file_detected() {
        let elf = fixture::random_container(2, 3, ElfClass::Elf64);
        let out = split(&elf).unwrap();
        let plan = plan_merge(&out.mdt).unwrap();
        let mut files: BTreeMap<usize, Vec<u8>> =
            out.segment_files.iter().cloned().enumerate().collect();
        files.remove(&2);
        assert!(matches!(
            merge(&plan, &out.mdt, &files),
            Err(MergeError::MissingSegmentFile(2))
        ));
    }

    #[test]
    fn oversized_segment_file_rejected() {
        let elf = fixture::random_container(3, 2, ElfClass::Elf32);
        let out = split(&elf).unwrap();
        let plan = plan_merge(&out.mdt).unwrap();
        let mut files: BTreeMap<usize, Vec<u8>> =
            out.segment_files.iter().cloned().enumerate().collect();
        files.get_mut(&0).unwrap().push(0xAA);
        assert!(matches!(
            merge(&plan, &out.mdt, &files),
            Err(MergeError::SegmentFileTooLarge { index: 0, .. })
        ));
    }

    #[test]
    fn split_merge_round_trip_both_classes() {
        for class in [ElfClass::Elf32, ElfClass::Elf64] {
            for seed in 0..20u64 {
                let elf = fixture::random_container(seed, 1 + (seed % 8) as usize, class);
                let out = split(&elf).unwrap();
                let merged = remerge(&out).unwrap();
                fixture::assert_backed_ranges_equal(&elf, &merged);
            }
        }
    }

    #[test]
    fn filesz_zero_segment_yields_empty_file() {
        let elf = fixture::random_container_with_bss(11, ElfClass::Elf64);
        let out = split(&elf).unwrap();
        assert!(out.segment_files.iter().any(|f| f.is_empty()));
        let merged = remerge(&out).unwrap();
        fixture::assert_backed_ranges_equal(&elf, &merged);
    }
}
