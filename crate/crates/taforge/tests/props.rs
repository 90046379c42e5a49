//! Property-based invariants over the parser, the split/merge pair, sparse
//! memory snapshots, and the deterministic mutators.

use proptest::prelude::*;

use taforge::elf::{parse_container, ElfClass};
use taforge::fixture;
use taforge::mem::{AddressSpace, PERM_R, PERM_W};
use taforge::merge;
use taforge::mutate;

proptest! {
    // parse_container is total: arbitrary bytes produce Ok or a typed error,
    // never a panic or out-of-bounds read.
    #[test]
    fn parse_container_total(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
        let _ = parse_container(&bytes);
    }

    // Same, with a valid magic/class prefix so deeper code paths are reached.
    #[test]
    fn parse_container_total_with_magic(
        class in 0u8..4,
        data in 0u8..3,
        rest in proptest::collection::vec(any::<u8>(), 0..512),
    ) {
        let mut bytes = vec![0x7F, b'E', b'L', b'F', class, data];
        bytes.extend(rest);
        let _ = parse_container(&bytes);
    }

    // split |> merge reproduces the header and every segment-backed byte
    // range of the original container, for both classes.
    #[test]
    fn split_merge_round_trip(seed in any::<u64>(), nsegs in 1usize..8, elf64 in any::<bool>()) {
        let class = if elf64 { ElfClass::Elf64 } else { ElfClass::Elf32 };
        let elf = fixture::random_container(seed, nsegs, class);
        let split = merge::split(&elf).unwrap();
        let merged = merge::remerge(&split).unwrap();
        fixture::assert_backed_ranges_equal(&elf, &merged);
    }

    // Snapshot/restore puts every mapped byte back, regardless of what was
    // written in between.
    #[test]
    fn snapshot_restore_is_exact(
        writes in proptest::collection::vec((0u64..0x2000, any::<u8>()), 0..64),
    ) {
        let mut space = AddressSpace::new();
        space.map_region(0x1000, 0x1000, PERM_R | PERM_W, "a").unwrap();
        space.map_region(0x4000, 0x1000, PERM_R | PERM_W, "b").unwrap();
        space.write_bytes(0x1000, &[0x11; 0x20]).unwrap();
        let before_a = space.read_bytes(0x1000, 0x1000).unwrap();
        let before_b = space.read_bytes(0x4000, 0x1000).unwrap();
        let snap = space.snapshot();

        for (off, val) in writes {
            let addr = if off < 0x1000 { 0x1000 + off } else { 0x3000 + off };
            let _ = space.write_bytes(addr, &[val]);
        }

        space.restore(&snap).unwrap();
        prop_assert_eq!(space.read_bytes(0x1000, 0x1000).unwrap(), before_a);
        prop_assert_eq!(space.read_bytes(0x4000, 0x1000).unwrap(), before_b);
    }

    // Applying the same single-bit flip twice is the identity.
    #[test]
    fn bit_flip_involution(
        input in proptest::collection::vec(any::<u8>(), 1..64),
        cursor in any::<usize>(),
    ) {
        let cursor = cursor % (input.len() * 8);
        let once = mutate::bit_flip(&input, 1, cursor).unwrap();
        let twice = mutate::bit_flip(&once, 1, cursor).unwrap();
        prop_assert_eq!(twice, input);
    }

    // Dictionary placement never exceeds max_len and always embeds the token.
    #[test]
    fn dictionary_place_bounds(
        input in proptest::collection::vec(any::<u8>(), 0..48),
        token in proptest::collection::vec(any::<u8>(), 1..8),
        offset in 0usize..64,
    ) {
        let max_len = 64usize;
        if let Some(out) = mutate::dictionary_place(&input, &token, offset, max_len) {
            prop_assert!(out.len() <= max_len);
            prop_assert_eq!(&out[offset..offset + token.len()], token.as_slice());
        }
    }
}
