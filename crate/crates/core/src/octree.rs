//! Morton-order octree machinery: level construction, occupancy-code
//! generation, and occupancy-driven coordinate upsampling.
//!
//! Conventions (frozen for bitstream compatibility): the x axis occupies the
//! least-significant slot of each interleaved bit triplet, and the child
//! index of local offset (cx, cy, cz) is `cx + 2*cy + 4*cz`. With these two
//! choices the child index equals the low three Morton bits, so downsampling
//! and upsampling both preserve Morton order without re-sorting.

use crate::error::{Error, Result};
use crate::util::map_indexed;
use std::collections::HashSet;

pub type Coord = [u32; 3];

/// Bit-interleaved 48-bit Z-order value over three 16-bit axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MortonCode(pub u64);

/// Spreads the low 16 bits of `v` so bit i lands at bit 3i.
fn spread3(v: u32) -> u64 {
    let mut x = v as u64 & 0xFFFF;
    x = (x | (x << 16)) & 0x0000_0000_FF00_00FF;
    x = (x | (x << 8)) & 0x000F_00F0_0F00_F00F;
    x = (x | (x << 4)) & 0x00C3_0C30_C30C_30C3;
    x = (x | (x << 2)) & 0x0249_2492_4924_9249;
    x
}

pub fn morton_encode(coord: Coord, depth: u8) -> Result<MortonCode> {
    if depth > 16 {
        return Err(Error::OutOfRange(format!("depth {depth} exceeds 16")));
    }
    let limit = 1u64 << depth;
    for &c in &coord {
        if c as u64 >= limit {
            return Err(Error::OutOfRange(format!(
                "component {c} does not fit in depth {depth}"
            )));
        }
    }
    Ok(MortonCode(
        spread3(coord[0]) | (spread3(coord[1]) << 1) | (spread3(coord[2]) << 2),
    ))
}

fn morton_unchecked(coord: Coord) -> u64 {
    spread3(coord[0]) | (spread3(coord[1]) << 1) | (spread3(coord[2]) << 2)
}

pub fn is_morton_sorted(coords: &[Coord]) -> bool {
    coords
        .windows(2)
        .all(|w| morton_unchecked(w[0]) < morton_unchecked(w[1]))
}

/// Sorts into strictly increasing Morton order and removes duplicates.
pub fn sort_dedup_morton(coords: &[Coord], depth: u8) -> Result<Vec<Coord>> {
    let mut keyed: Vec<(u64, Coord)> = Vec::with_capacity(coords.len());
    for &c in coords {
        keyed.push((morton_encode(c, depth)?.0, c));
    }
    keyed.sort_unstable_by_key(|(k, _)| *k);
    keyed.dedup_by_key(|(k, _)| *k);
    Ok(keyed.into_iter().map(|(_, c)| c).collect())
}

/// Per-component floor halving followed by consecutive-duplicate removal.
/// The parent order is inherited from the child order, so the output stays
/// Morton-sorted without re-sorting.
pub fn downsample(coords: &[Coord]) -> Result<Vec<Coord>> {
    if !is_morton_sorted(coords) {
        return Err(Error::Contract("downsample input is not Morton-sorted".into()));
    }
    let mut out: Vec<Coord> = Vec::with_capacity(coords.len());
    for c in coords {
        let p = [c[0] >> 1, c[1] >> 1, c[2] >> 1];
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
    Ok(out)
}

fn local_index(child: &Coord) -> u8 {
    ((child[0] & 1) + 2 * (child[1] & 1) + 4 * (child[2] & 1)) as u8
}

/// Packs each parent's occupied children into an 8-bit code, in parent
/// Morton order. `parents` must equal `downsample(children)`.
pub fn occupancy_codes(parents: &[Coord], children: &[Coord]) -> Result<Vec<u8>> {
    let mut codes = vec![0u8; parents.len()];
    let mut j = 0usize;
    for (i, p) in parents.iter().enumerate() {
        let mut code = 0u8;
        while j < children.len() {
            let c = &children[j];
            if [c[0] >> 1, c[1] >> 1, c[2] >> 1] != *p {
                break;
            }
            code |= 1 << local_index(c);
            j += 1;
        }
        if code == 0 {
            return Err(Error::Contract(format!(
                "parent {p:?} has no children; parent/child sets are misaligned"
            )));
        }
        codes[i] = code;
    }
    if j != children.len() {
        return Err(Error::Contract(
            "children remain after all parents were consumed".into(),
        ));
    }
    Ok(codes)
}

/// Expands each parent into its occupied children: for set bit b (ascending),
/// child = 2*parent + (b&1, (b>>1)&1, (b>>2)&1). Output is Morton-sorted by
/// construction.
pub fn upsample_coords(parents: &[Coord], codes: &[u8]) -> Result<Vec<Coord>> {
    if parents.len() != codes.len() {
        return Err(Error::Contract(format!(
            "{} parents but {} codes",
            parents.len(),
            codes.len()
        )));
    }
    let mut out = Vec::with_capacity(codes.iter().map(|c| c.count_ones() as usize).sum());
    for (p, &code) in parents.iter().zip(codes) {
        if code == 0 {
            return Err(Error::Contract("occupancy code 0 for an occupied parent".into()));
        }
        for b in 0..8u32 {
            if code & (1 << b) != 0 {
                out.push([
                    2 * p[0] + (b & 1),
                    2 * p[1] + ((b >> 1) & 1),
                    2 * p[2] + ((b >> 2) & 1),
                ]);
            }
        }
    }
    Ok(out)
}

/// Per-level Morton-sorted node coordinates plus ground-truth occupancy
/// codes. `codes_of(l)` holds one code per level-l node describing its
/// children at level l+1; it exists for `min_level <= l < max_level`.
#[derive(Clone, Debug)]
pub struct OctreeLevels {
    pub max_level: u8,
    pub min_level: u8,
    coords: Vec<Vec<Coord>>,
    codes: Vec<Vec<u8>>,
}

impl OctreeLevels {
    pub fn coords_at(&self, level: u8) -> &[Coord] {
        assert!(level >= self.min_level && level <= self.max_level);
        &self.coords[(level - self.min_level) as usize]
    }

    pub fn codes_of(&self, level: u8) -> &[u8] {
        assert!(level >= self.min_level && level < self.max_level);
        &self.codes[(level - self.min_level) as usize]
    }

    pub fn node_count(&self, level: u8) -> usize {
        self.coords_at(level).len()
    }
}

/// Builds all levels from `max_level` down to `min_level` by repeated
/// halving, deriving occupancy codes per parent on the way.
pub fn build_levels(coords: &[Coord], max_level: u8, min_level: u8) -> Result<OctreeLevels> {
    if min_level > max_level {
        return Err(Error::Contract(format!(
            "min_level {min_level} exceeds max_level {max_level}"
        )));
    }
    let finest = sort_dedup_morton(coords, max_level)?;
    let n_levels = (max_level - min_level) as usize + 1;
    let mut coords_by_level: Vec<Vec<Coord>> = Vec::with_capacity(n_levels);
    let mut codes_by_level: Vec<Vec<u8>> = Vec::with_capacity(n_levels - 1);
    coords_by_level.push(finest);
    for _ in min_level..max_level {
        let children = coords_by_level.last().unwrap();
        let parents = downsample(children)?;
        let codes = occupancy_codes(&parents, children)?;
        coords_by_level.push(parents);
        codes_by_level.push(codes);
    }
    coords_by_level.reverse();
    codes_by_level.reverse();
    Ok(OctreeLevels {
        max_level,
        min_level,
        coords: coords_by_level,
        codes: codes_by_level,
    })
}

/// Default coarsest level: eleven halvings below the finest, floored at 0.
pub fn default_min_level(max_level: u8) -> u8 {
    max_level.saturating_sub(11)
}

/// Number of occupied voxels among the 26 face/edge/corner neighbors of
/// each node (center excluded).
pub fn neighbor_counts(coords: &[Coord]) -> Vec<u32> {
    let set: HashSet<Coord> = coords.iter().copied().collect();
    map_indexed(coords.len(), |i| {
        let c = coords[i];
        let mut n = 0u32;
        for dx in -1i64..=1 {
            for dy in -1i64..=1 {
                for dz in -1i64..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let q = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                    if q.iter().all(|&v| v >= 0)
                        && set.contains(&[q[0] as u32, q[1] as u32, q[2] as u32])
                    {
                        n += 1;
                    }
                }
            }
        }
        n
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent oracle: naive per-bit interleaving loop.
    fn morton_naive(c: Coord) -> u64 {
        let mut v = 0u64;
        for i in 0..16 {
            v |= ((c[0] as u64 >> i) & 1) << (3 * i);
            v |= ((c[1] as u64 >> i) & 1) << (3 * i + 1);
            v |= ((c[2] as u64 >> i) & 1) << (3 * i + 2);
        }
        v
    }

    #[test]
    fn morton_examples() {
        assert_eq!(morton_encode([0, 0, 0], 8).unwrap().0, 0);
        assert_eq!(morton_encode([1, 1, 1], 1).unwrap().0, 7);
        // Oracle: naive interleave of (3,1,0) = x bits 11, y bits 01 -> 0b1011.
        assert_eq!(morton_naive([3, 1, 0]), 11);
        assert_eq!(morton_encode([3, 1, 0], 2).unwrap().0, 11);
    }

    #[test]
    fn morton_range_error() {
        assert!(morton_encode([4, 0, 0], 2).is_err());
        assert!(morton_encode([0, 0, 0], 17).is_err());
    }

    #[test]
    fn sort_dedup_basics() {
        let v = sort_dedup_morton(&[[1, 0, 0], [0, 0, 0], [1, 0, 0]], 4).unwrap();
        assert_eq!(v, vec![[0, 0, 0], [1, 0, 0]]);
        let sorted = vec![[0, 0, 0], [1, 0, 0], [0, 2, 0]];
        // (0,2,0) has Morton code 8 > 1, so this input is already sorted.
        assert_eq!(sort_dedup_morton(&sorted, 4).unwrap(), sorted);
    }

    #[test]
    fn downsample_examples() {
        let d = downsample(&[[0, 0, 0], [1, 1, 1], [2, 3, 1]]).unwrap();
        assert_eq!(d, vec![[0, 0, 0], [1, 1, 0]]);
        assert_eq!(downsample(&[[5, 3, 1]]).unwrap(), vec![[2, 1, 0]]);
        assert!(downsample(&[[1, 1, 1], [0, 0, 0]]).is_err());
    }

    #[test]
    fn occupancy_examples() {
        // Single child at local offset (0,0,0) -> code 1.
        assert_eq!(occupancy_codes(&[[0, 0, 0]], &[[0, 0, 0]]).unwrap(), vec![1]);
        // Offsets (0,0,0) and (1,0,1) -> bits 0 and 5 -> 33.
        assert_eq!(
            occupancy_codes(&[[0, 0, 0]], &[[0, 0, 0], [1, 0, 1]]).unwrap(),
            vec![33]
        );
        let full: Vec<Coord> = (0..8u32)
            .map(|b| [b & 1, (b >> 1) & 1, (b >> 2) & 1])
            .collect();
        let full = sort_dedup_morton(&full, 1).unwrap();
        assert_eq!(occupancy_codes(&[[0, 0, 0]], &full).unwrap(), vec![255]);
    }

    #[test]
    fn upsample_examples() {
        let ch = upsample_coords(&[[0, 0, 0]], &[5]).unwrap();
        assert_eq!(ch, vec![[0, 0, 0], [0, 1, 0]]);
        assert!(upsample_coords(&[[0, 0, 0]], &[0]).is_err());
    }

    #[test]
    fn build_levels_single_path() {
        let lv = build_levels(&[[5, 3, 1]], 3, 0).unwrap();
        for l in 0..=3 {
            assert_eq!(lv.node_count(l), 1);
        }
        for l in 0..3 {
            assert_eq!(lv.codes_of(l)[0].count_ones(), 1);
        }
    }

    #[test]
    fn build_levels_full_cube() {
        let cube: Vec<Coord> = (0..8u32)
            .map(|b| [b & 1, (b >> 1) & 1, (b >> 2) & 1])
            .collect();
        let lv = build_levels(&cube, 1, 0).unwrap();
        assert_eq!(lv.node_count(1), 8);
        assert_eq!(lv.codes_of(0), &[255]);
    }

    #[test]
    fn neighbor_count_examples() {
        assert_eq!(neighbor_counts(&[[3, 3, 3]]), vec![0]);
        assert_eq!(neighbor_counts(&[[0, 0, 0], [1, 0, 0]]), vec![1, 1]);
    }

    #[test]
    fn neighbor_counts_match_brute_force_on_grid() {
        let mut grid = Vec::new();
        for x in 0..4u32 {
            for y in 0..4u32 {
                for z in 0..4u32 {
                    grid.push([x, y, z]);
                }
            }
        }
        let counts = neighbor_counts(&grid);
        // O(N^2) Chebyshev-distance oracle.
        for (i, a) in grid.iter().enumerate() {
            let brute = grid
                .iter()
                .enumerate()
                .filter(|&(j, b)| {
                    j != i
                        && (0..3).all(|k| (a[k] as i64 - b[k] as i64).abs() <= 1)
                })
                .count() as u32;
            assert_eq!(counts[i], brute);
        }
    }

    fn arb_coords(max: u32, n: usize) -> impl Strategy<Value = Vec<Coord>> {
        prop::collection::vec([0..max, 0..max, 0..max], 1..n)
    }

    proptest! {
        #[test]
        fn sort_matches_comparison_sort(coords in arb_coords(1 << 10, 1000)) {
            let got = sort_dedup_morton(&coords, 10).unwrap();
            let mut keys: Vec<u64> = coords.iter().map(|&c| morton_naive(c)).collect();
            keys.sort_unstable();
            keys.dedup();
            let got_keys: Vec<u64> = got.iter().map(|&c| morton_naive(c)).collect();
            prop_assert_eq!(got_keys, keys);
        }

        #[test]
        fn downsample_matches_full_resort(coords in arb_coords(1 << 8, 400)) {
            let sorted = sort_dedup_morton(&coords, 8).unwrap();
            let fast = downsample(&sorted).unwrap();
            let naive: Vec<Coord> = sorted.iter().map(|c| [c[0] >> 1, c[1] >> 1, c[2] >> 1]).collect();
            let naive = sort_dedup_morton(&naive, 7).unwrap();
            prop_assert_eq!(fast, naive);
        }

        #[test]
        fn octree_round_trip_and_popcount(coords in arb_coords(1 << 6, 300)) {
            let children = sort_dedup_morton(&coords, 6).unwrap();
            let parents = downsample(&children).unwrap();
            let codes = occupancy_codes(&parents, &children).unwrap();
            prop_assert!(codes.iter().all(|&c| c >= 1));
            let total: usize = codes.iter().map(|c| c.count_ones() as usize).sum();
            prop_assert_eq!(total, children.len());
            let back = upsample_coords(&parents, &codes).unwrap();
            prop_assert_eq!(&back, &children);
            prop_assert!(is_morton_sorted(&back));
            prop_assert!(is_morton_sorted(&parents));
        }

        #[test]
        fn build_levels_popcount_invariant(coords in arb_coords(1 << 5, 200)) {
            let lv = build_levels(&coords, 5, 0).unwrap();
            for l in 0..5u8 {
                let total: usize = lv.codes_of(l).iter().map(|c| c.count_ones() as usize).sum();
                prop_assert_eq!(total, lv.node_count(l + 1));
            }
        }
    }
}
