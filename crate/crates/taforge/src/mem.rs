//! Sparse emulated memory with page-granular permissions, bounds-checked
//! access, and whole-space snapshot/restore for persistent-mode fuzzing.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

pub const PAGE_SIZE: u64 = 4096;

pub const PERM_R: u8 = 1;
pub const PERM_W: u8 = 2;
pub const PERM_X: u8 = 4;

static NEXT_SPACE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Read,
    Write,
    Fetch,
}

impl std::fmt::Display for AccessKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AccessKind::Read => write!(f, "read"),
            AccessKind::Write => write!(f, "write"),
            AccessKind::Fetch => write!(f, "fetch"),
        }
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum MemError {
    #[error("{kind} of {len:#x} bytes hits unmapped address {addr:#x}")]
    UnmappedAccess { addr: u64, len: u64, kind: AccessKind },
    #[error("{kind} denied at {addr:#x} (region perms {perms:#x})")]
    PermissionDenied { addr: u64, perms: u8, kind: AccessKind },
    #[error("region [{base:#x}, {base:#x}+{length:#x}) overlaps an existing region")]
    Overlap { base: u64, length: u64 },
    #[error("region [{base:#x}, {base:#x}+{length:#x}) is not page-aligned")]
    Misaligned { base: u64, length: u64 },
    #[error("snapshot was taken from a different address space")]
    ForeignSnapshot,
}

#[derive(Debug, Clone)]
pub struct Region {
    pub base: u64,
    pub length: u64,
    pub perms: u8,
    pub label: String,
    data: Vec<u8>,
}

impl Region {
    pub fn end(&self) -> u64 {
        self.base + self.length
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.end()
    }
}

/// Snapshot of all regions and their contents. Restoring makes every mapped
/// byte and the region table equal their values at capture time.
#[derive(Clone)]
pub struct Snapshot {
    space_id: u64,
    regions: Vec<Region>,
}

#[derive(Debug)]
pub struct AddressSpace {
    id: u64,
    /// Sorted by base; regions never overlap.
    regions: Vec<Region>,
}

impl Default for AddressSpace {
    fn default() -> Self {
        Self::new()
    }
}

impl AddressSpace {
    pub fn new() -> Self {
        AddressSpace {
            id: NEXT_SPACE_ID.fetch_add(1, Ordering::Relaxed),
            regions: Vec::new(),
        }
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn map_region(
        &mut self,
        base: u64,
        length: u64,
        perms: u8,
        label: &str,
    ) -> Result<(), MemError> {
        if base % PAGE_SIZE != 0 || length % PAGE_SIZE != 0 || length == 0 {
            return Err(MemError::Misaligned { base, length });
        }
        let end = base.checked_add(length).ok_or(MemError::Misaligned { base, length })?;
        if self.regions.iter().any(|r| base < r.end() && r.base < end) {
            return Err(MemError::Overlap { base, length });
        }
        let region = Region {
            base,
            length,
            perms,
            label: label.to_string(),
            data: vec![0; length as usize],
        };
        let idx = self.regions.partition_point(|r| r.base < base);
        self.regions.insert(idx, region);
        Ok(())
    }

    pub fn region_at(&self, addr: u64) -> Option<&Region> {
        self.regions.iter().find(|r| r.contains(addr))
    }

    fn region_index_at(&self, addr: u64) -> Option<usize> {
        self.regions.iter().position(|r| r.contains(addr))
    }

    /// True when [addr, addr+len) lies entirely in mapped regions carrying
    /// every bit of `perms` (contiguous regions may be crossed).
    pub fn is_mapped(&self, addr: u64, len: u64, perms: u8) -> bool {
        let mut cur = addr;
        let end = match addr.checked_add(len) {
            Some(e) => e,
            None => return false,
        };
        while cur < end {
            match self.region_at(cur) {
                Some(r) if r.perms & perms == perms => cur = r.end(),
                _ => return false,
            }
        }
        true
    }

    pub fn read_bytes(&self, addr: u64, len: u64) -> Result<Vec<u8>, MemError> {
        let mut out = vec![0u8; len as usize];
        self.read_into(addr, &mut out, AccessKind::Read, PERM_R)?;
        Ok(out)
    }

    fn read_into(
        &self,
        addr: u64,
        out: &mut [u8],
        kind: AccessKind,
        perm: u8,
    ) -> Result<(), MemError> {
        let len = out.len() as u64;
        let mut cur = addr;
        let end = addr
            .checked_add(len)
            .ok_or(MemError::UnmappedAccess { addr, len, kind })?;
        let mut filled = 0usize;
        while cur < end {
            let r = self
                .region_at(cur)
                .ok_or(MemError::UnmappedAccess { addr: cur, len, kind })?;
            if r.perms & perm != perm {
                return Err(MemError::PermissionDenied { addr: cur, perms: r.perms, kind });
            }
            let take = ((r.end() - cur).min(end - cur)) as usize;
            let off = (cur - r.base) as usize;
            out[filled..filled + take].copy_from_slice(&r.data[off..off + take]);
            filled += take;
            cur += take as u64;
        }
        Ok(())
    }

    pub fn write_bytes(&mut self, addr: u64, bytes: &[u8]) -> Result<(), MemError> {
        let len = bytes.len() as u64;
        let end = addr.checked_add(len).ok_or(MemError::UnmappedAccess {
            addr,
            len,
            kind: AccessKind::Write,
        })?;
        // Validate the whole span before mutating anything.
        let mut cur = addr;
        while cur < end {
            let r = self.region_at(cur).ok_or(MemError::UnmappedAccess {
                addr: cur,
                len,
                kind: AccessKind::Write,
            })?;
            if r.perms & PERM_W == 0 {
                return Err(MemError::PermissionDenied {
                    addr: cur,
                    perms: r.perms,
                    kind: AccessKind::Write,
                });
            }
            cur = r.end();
        }
        let mut cur = addr;
        let mut consumed = 0usize;
        while cur < end {
            let idx = self.region_index_at(cur).unwrap();
            let r = &mut self.regions[idx];
            let take = ((r.end() - cur).min(end - cur)) as usize;
            let off = (cur - r.base) as usize;
            r.data[off..off + take].copy_from_slice(&bytes[consumed..consumed + take]);
            consumed += take;
            cur += take as u64;
        }
        Ok(())
    }

    /// Populate freshly mapped regions ignoring the permission bits (segment
    /// contents go into R+X text regions at load time). Panics if the span is
    /// not fully mapped; callers map first.
    pub(crate) fn write_bytes_unchecked(&mut self, addr: u64, bytes: &[u8]) {
        let end = addr + bytes.len() as u64;
        let mut cur = addr;
        let mut consumed = 0usize;
        while cur < end {
            let idx = self
                .region_index_at(cur)
                .unwrap_or_else(|| panic!("unmapped address {cur:#x} during load"));
            let r = &mut self.regions[idx];
            let take = ((r.end() - cur).min(end - cur)) as usize;
            let off = (cur - r.base) as usize;
            r.data[off..off + take].copy_from_slice(&bytes[consumed..consumed + take]);
            consumed += take;
            cur += take as u64;
        }
    }

    pub fn read_u32(&self, addr: u64) -> Result<u32, MemError> {
        let mut b = [0u8; 4];
        self.read_into(addr, &mut b, AccessKind::Read, PERM_R)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn read_u64(&self, addr: u64) -> Result<u64, MemError> {
        let mut b = [0u8; 8];
        self.read_into(addr, &mut b, AccessKind::Read, PERM_R)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn write_u32(&mut self, addr: u64, val: u32) -> Result<(), MemError> {
        self.write_bytes(addr, &val.to_le_bytes())
    }

    pub fn write_u64(&mut self, addr: u64, val: u64) -> Result<(), MemError> {
        self.write_bytes(addr, &val.to_le_bytes())
    }

    /// Instruction fetch: requires X permission on the covering region.
    pub fn fetch_u32(&self, addr: u64) -> Result<u32, MemError> {
        let mut b = [0u8; 4];
        self.read_into(addr, &mut b, AccessKind::Fetch, PERM_X)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot { space_id: self.id, regions: self.regions.clone() }
    }

    pub fn restore(&mut self, snapshot: &Snapshot) -> Result<(), MemError> {
        if snapshot.space_id != self.id {
            return Err(MemError::ForeignSnapshot);
        }
        // Fast path: same region table, copy contents in place.
        let same_layout = self.regions.len() == snapshot.regions.len()
            && self
                .regions
                .iter()
                .zip(&snapshot.regions)
                .all(|(a, b)| a.base == b.base && a.length == b.length && a.perms == b.perms);
        if same_layout {
            for (dst, src) in self.regions.iter_mut().zip(&snapshot.regions) {
                dst.data.copy_from_slice(&src.data);
            }
        } else {
            self.regions = snapshot.regions.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mapped_region_reads_zero() {
        let mut s = AddressSpace::new();
        s.map_region(0x7F0000, 0x10000, PERM_R | PERM_W, "stack").unwrap();
        assert_eq!(s.read_bytes(0x7F0000, 16).unwrap(), vec![0u8; 16]);
    }

    #[test]
    fn overlap_and_misalignment_rejected() {
        let mut s = AddressSpace::new();
        s.map_region(0x1000, 0x2000, PERM_R, "a").unwrap();
        assert!(matches!(
            s.map_region(0x2000, 0x1000, PERM_R, "b"),
            Err(MemError::Overlap { .. })
        ));
        assert!(matches!(
            s.map_region(0x1001, 0x1000, PERM_R, "c"),
            Err(MemError::Misaligned { .. })
        ));
    }

    #[test]
    fn read_your_write() {
        let mut s = AddressSpace::new();
        s.map_region(0x1000, 0x1000, PERM_R | PERM_W, "d").unwrap();
        s.write_bytes(0x1100, &[1, 2, 3, 4]).unwrap();
        assert_eq!(s.read_bytes(0x1100, 4).unwrap(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn unmapped_write_is_the_crash_signal() {
        let mut s = AddressSpace::new();
        let err = s.write_bytes(0x500000, &[0xFF]).unwrap_err();
        assert_eq!(
            err,
            MemError::UnmappedAccess { addr: 0x500000, len: 1, kind: AccessKind::Write }
        );
    }

    #[test]
    fn boundary_crossing_read_reports_first_unmapped_addr() {
        let mut s = AddressSpace::new();
        s.map_region(0x1000, 0x1000, PERM_R, "e").unwrap();
        let err = s.read_bytes(0x1FFC, 8).unwrap_err();
        assert!(matches!(err, MemError::UnmappedAccess { addr: 0x2000, .. }));
    }

    #[test]
    fn contiguous_regions_can_be_crossed() {
        let mut s = AddressSpace::new();
        s.map_region(0x1000, 0x1000, PERM_R | PERM_W, "lo").unwrap();
        s.map_region(0x2000, 0x1000, PERM_R | PERM_W, "hi").unwrap();
        s.write_bytes(0x1FFE, &[9, 8, 7, 6]).unwrap();
        assert_eq!(s.read_bytes(0x1FFE, 4).unwrap(), vec![9, 8, 7, 6]);
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let mut s = AddressSpace::new();
        s.map_region(0x1000, 0x1000, PERM_R | PERM_W, "f").unwrap();
        s.write_bytes(0x1000, &[0x11]).unwrap();
        let snap = s.snapshot();
        s.write_bytes(0x1000, &[0xFF]).unwrap();
        s.restore(&snap).unwrap();
        assert_eq!(s.read_bytes(0x1000, 1).unwrap(), vec![0x11]);
        // Idempotent.
        s.restore(&snap).unwrap();
        assert_eq!(s.read_bytes(0x1000, 1).unwrap(), vec![0x11]);
    }

    #[test]
    fn restore_drops_regions_mapped_after_snapshot() {
        let mut s = AddressSpace::new();
        s.map_region(0x1000, 0x1000, PERM_R, "g").unwrap();
        let snap = s.snapshot();
        s.map_region(0x3000, 0x1000, PERM_R, "late").unwrap();
        s.restore(&snap).unwrap();
        assert_eq!(s.regions().len(), 1);
    }

    #[test]
    fn foreign_snapshot_rejected() {
        let s1 = AddressSpace::new();
        let mut s2 = AddressSpace::new();
        let snap = s1.snapshot();
        assert_eq!(s2.restore(&snap), Err(MemError::ForeignSnapshot));
    }

    #[test]
    fn fetch_requires_exec() {
        let mut s = AddressSpace::new();
        s.map_region(0x1000, 0x1000, PERM_R | PERM_W, "data").unwrap();
        assert!(matches!(
            s.fetch_u32(0x1000),
            Err(MemError::PermissionDenied { kind: AccessKind::Fetch, .. })
        ));
    }
}
