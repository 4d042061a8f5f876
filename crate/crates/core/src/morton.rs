//! Lebesgue (Z-order) keys.
//!
//! Bit `j` of x lands on key bit `3j`, bit `j` of y on `3j + 1` and bit `j`
//! of z on `3j + 2`, so x is the least significant axis.

use crate::error::{Error, Result};

/// Largest supported bit count per axis (3 * 21 = 63 key bits).
pub const MAX_BITS: u32 = 21;

#[inline]
fn spread(v: u64) -> u64 {
    let mut x = v & 0x1f_ffff;
    x = (x | (x << 32)) & 0x001f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x001f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

#[inline]
fn compact(v: u64) -> u64 {
    let mut x = v & 0x1249_2492_4924_9249;
    x = (x | (x >> 2)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x >> 4)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x >> 8)) & 0x001f_0000_ff00_00ff;
    x = (x | (x >> 16)) & 0x001f_0000_0000_ffff;
    x = (x | (x >> 32)) & 0x1f_ffff;
    x
}

/// Interleaves `coord` into a key using `bits` bits per axis.
///
/// Fails if any component does not fit into `bits` bits.
pub fn morton_key(coord: [u32; 3], bits: u32) -> Result<u64> {
    if bits > MAX_BITS {
        return Err(Error::InvalidArgument(format!(
            "{bits} bits per axis exceeds the supported {MAX_BITS}"
        )));
    }
    let limit = 1u64 << bits;
    if let Some(axis) = coord.iter().position(|&c| u64::from(c) >= limit) {
        return Err(Error::InvalidArgument(format!(
            "coordinate {coord:?} axis {axis} outside lattice of extent {limit}"
        )));
    }
    Ok(encode(coord))
}

/// Unchecked interleave for coordinates already known to be in range.
#[inline]
pub fn encode(coord: [u32; 3]) -> u64 {
    spread(u64::from(coord[0])) | (spread(u64::from(coord[1])) << 1) | (spread(u64::from(coord[2])) << 2)
}

#[inline]
pub fn decode(key: u64) -> [u32; 3] {
    [compact(key) as u32, compact(key >> 1) as u32, compact(key >> 2) as u32]
}

/// Bits per axis needed to address a lattice with the given extents.
///
/// Anisotropic lattices use the widest axis; shorter axes are zero padded.
pub fn bits_for_extent(extent: [u64; 3]) -> u32 {
    let widest = extent.iter().copied().max().unwrap_or(1).max(1);
    64 - (widest - 1).leading_zeros()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(coord: [u32; 3], bits: u32) -> u64 {
        let mut key = 0u64;
        for j in 0..bits {
            for (axis, &c) in coord.iter().enumerate() {
                key |= u64::from((c >> j) & 1) << (3 * j + axis as u32);
            }
        }
        key
    }

    #[test]
    fn examples() {
        assert_eq!(morton_key([0, 0, 0], 3).unwrap(), 0);
        assert_eq!(morton_key([1, 0, 0], 3).unwrap(), 1);
        assert_eq!(morton_key([3, 5, 1], 3).unwrap(), 143);
    }

    #[test]
    fn out_of_range() {
        assert!(morton_key([8, 0, 0], 3).is_err());
        assert!(morton_key([0, 0, 0], 22).is_err());
    }

    #[test]
    fn matches_naive_interleave_and_round_trips() {
        for x in 0..8 {
            for y in 0..8 {
                for z in 0..8 {
                    let k = morton_key([x, y, z], 3).unwrap();
                    assert_eq!(k, naive([x, y, z], 3));
                    assert_eq!(decode(k), [x, y, z]);
                }
            }
        }
        let big = [(1 << 21) - 1, 12345, 777];
        assert_eq!(encode(big), naive(big, 21));
        assert_eq!(decode(encode(big)), big);
    }

    #[test]
    fn bijective_up_to_depth_four() {
        for bits in 0..=4u32 {
            let n = 1u32 << bits;
            let mut seen = vec![false; (n * n * n) as usize];
            for x in 0..n {
                for y in 0..n {
                    for z in 0..n {
                        let k = morton_key([x, y, z], bits).unwrap() as usize;
                        assert!(k < seen.len());
                        assert!(!seen[k]);
                        seen[k] = true;
                    }
                }
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn extent_bits() {
        assert_eq!(bits_for_extent([1, 1, 1]), 0);
        assert_eq!(bits_for_extent([2, 2, 2]), 1);
        assert_eq!(bits_for_extent([8, 4, 1]), 3);
        assert_eq!(bits_for_extent([5, 1, 1]), 3);
    }
}
