//! Input mutation primitives. The deterministic stages (bit flips, dictionary
//! placement) are pure functions of (input, cursor) so a fuzzing campaign
//! replays exactly; havoc stacks randomized edits drawn from a seeded RNG.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Boundary values that historically shake out comparison bugs; spliced over
/// 1/2/4-byte windows by havoc.
pub const INTERESTING: [u64; 10] = [
    0,
    1,
    0x7F,
    0x80,
    0xFF,
    0x7FFF,
    0x8000,
    0xFFFF,
    0x7FFF_FFFF,
    0x8000_0000,
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MutationStrategy {
    /// Replace the input with fresh random bytes of random length.
    RandomBytes,
    /// Deterministic walking flip of `width` consecutive bits.
    BitFlip { width: u8 },
    /// Deterministic token-at-offset placement.
    Dictionary,
    /// Stacked randomized edits.
    Havoc { max_stacked: usize },
}

/// Flip `width` consecutive bits starting at `bit_cursor`, MSB-first within
/// each byte: cursor 0 targets bit 7 of byte 0. Returns None when the cursor
/// has walked past the input.
pub fn bit_flip(input: &[u8], width: u8, bit_cursor: usize) -> Option<Vec<u8>> {
    let total_bits = input.len() * 8;
    if bit_cursor + width as usize > total_bits {
        return None;
    }
    let mut out = input.to_vec();
    for i in 0..width as usize {
        let bit = bit_cursor + i;
        out[bit / 8] ^= 0x80 >> (bit % 8);
    }
    Some(out)
}

/// Overwrite the token's bytes at `offset`, growing the input if the token
/// extends past the end (never past `max_len`). Returns None when the token
/// cannot be placed at all.
pub fn dictionary_place(
    input: &[u8],
    token: &[u8],
    offset: usize,
    max_len: usize,
) -> Option<Vec<u8>> {
    if offset + token.len() > max_len || token.is_empty() {
        return None;
    }
    let mut out = input.to_vec();
    if offset + token.len() > out.len() {
        out.resize(offset + token.len(), 0);
    }
    out[offset..offset + token.len()].copy_from_slice(token);
    Some(out)
}

pub fn random_bytes(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<u8> {
    let len = rng.gen_range(1..=max_len.max(1));
    (0..len).map(|_| rng.gen()).collect()
}

fn write_le(out: &mut [u8], offset: usize, width: usize, value: u64) {
    let bytes = value.to_le_bytes();
    out[offset..offset + width].copy_from_slice(&bytes[..width]);
}

fn read_le(buf: &[u8], offset: usize, width: usize) -> u64 {
    let mut b = [0u8; 8];
    b[..width].copy_from_slice(&buf[offset..offset + width]);
    u64::from_le_bytes(b)
}

/// One randomized havoc pass: up to `max_stacked` stacked edits chosen from
/// bit flips, byte sets, small little-endian add/sub, interesting-value
/// splices, block deletion/duplication, and dictionary placement.
pub fn havoc(
    input: &[u8],
    rng: &mut ChaCha8Rng,
    dictionary: &[Vec<u8>],
    max_len: usize,
    max_stacked: usize,
) -> Vec<u8> {
    let mut out = input.to_vec();
    if out.is_empty() {
        out.push(0);
    }
    let stacked = rng.gen_range(1..=max_stacked.max(1));
    for _ in 0..stacked {
        let len = out.len();
        match rng.gen_range(0..8u32) {
            0 => {
                let bit = rng.gen_range(0..len * 8);
                out[bit / 8] ^= 0x80 >> (bit % 8);
            }
            1 => {
                let i = rng.gen_range(0..len);
                out[i] = rng.gen();
            }
            2 | 3 => {
                // add/sub up to 35 over a 1/2/4-byte little-endian window.
                let width = [1usize, 2, 4][rng.gen_range(0..3)];
                if len < width {
                    continue;
                }
                let offset = rng.gen_range(0..=len - width);
                let delta = rng.gen_range(1..=35u64);
                let cur = read_le(&out, offset, width);
                let next = if rng.gen() { cur.wrapping_add(delta) } else { cur.wrapping_sub(delta) };
                write_le(&mut out, offset, width, next);
            }
            4 => {
                let width = [1usize, 2, 4][rng.gen_range(0..3)];
                if len < width {
                    continue;
                }
                let offset = rng.gen_range(0..=len - width);
                let value = INTERESTING[rng.gen_range(0..INTERESTING.len())];
                write_le(&mut out, offset, width, value);
            }
            5 => {
                // delete a block
                if len > 1 {
                    let start = rng.gen_range(0..len);
                    let count = rng.gen_range(1..=(len - start).min(8));
                    out.drain(start..start + count);
                }
            }
            6 => {
                // duplicate a block
                let start = rng.gen_range(0..len);
                let count = rng.gen_range(1..=(len - start).min(8));
                let block: Vec<u8> = out[start..start + count].to_vec();
                let at = rng.gen_range(0..=len);
                for (i, b) in block.into_iter().enumerate() {
                    out.insert(at + i, b);
                }
                out.truncate(max_len);
            }
            _ => {
                if let Some(token) = dictionary.get(rng.gen_range(0..dictionary.len().max(1))) {
                    let offset = rng.gen_range(0..=out.len().saturating_sub(1));
                    if let Some(placed) = dictionary_place(&out, token, offset, max_len) {
                        out = placed;
                    }
                }
            }
        }
        if out.is_empty() {
            out.push(0);
        }
    }
    out.truncate(max_len);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn bit_flip_is_msb_first() {
        assert_eq!(bit_flip(&[0x00], 1, 0).unwrap(), vec![0x80]);
        assert_eq!(bit_flip(&[0x00], 1, 7).unwrap(), vec![0x01]);
        assert_eq!(bit_flip(&[0x00, 0x00], 2, 7).unwrap(), vec![0x01, 0x80]);
        assert_eq!(bit_flip(&[0xFF], 4, 0).unwrap(), vec![0x0F]);
        assert!(bit_flip(&[0x00], 1, 8).is_none());
        assert!(bit_flip(&[0x00], 4, 5).is_none());
    }

    #[test]
    fn bit_flip_is_involutive() {
        let input = vec![0xA5, 0x3C, 0x99];
        for cursor in 0..22 {
            let once = bit_flip(&input, 2, cursor).unwrap();
            let twice = bit_flip(&once, 2, cursor).unwrap();
            assert_eq!(twice, input);
        }
    }

    #[test]
    fn dictionary_place_grows_but_respects_max() {
        let out = dictionary_place(&[1, 2], &[9, 9, 9], 1, 8).unwrap();
        assert_eq!(out, vec![1, 9, 9, 9]);
        assert!(dictionary_place(&[1, 2], &[9, 9, 9], 6, 8).is_none());
        let inside = dictionary_place(&[1, 2, 3, 4], &[7], 2, 8).unwrap();
        assert_eq!(inside, vec![1, 2, 7, 4]);
    }

    #[test]
    fn havoc_respects_max_len_and_is_seeded() {
        let dict = vec![vec![0xDE, 0xAD]];
        let input = vec![0x41; 16];
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let a = havoc(&input, &mut r1, &dict, 24, 6);
            let b = havoc(&input, &mut r2, &dict, 24, 6);
            assert_eq!(a, b);
            assert!(a.len() <= 24 && !a.is_empty());
        }
    }

    #[test]
    fn random_bytes_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let v = random_bytes(&mut rng, 32);
            assert!(!v.is_empty() && v.len() <= 32);
        }
    }
}
