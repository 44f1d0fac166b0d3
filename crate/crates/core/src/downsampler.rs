//! Crack-preserving voxel-grid downsampling to an exact point budget.
//!
//! The points' bounding box is cut into `grid³` cells, `grid` growing from
//! `⌊∛n⌋` until at least `n` cells are occupied. Surplus cells are merged
//! into randomly chosen neighboring cells, and each remaining group keeps
//! the single point closest to its centroid. Sparse, isolated points end
//! up alone in a cell and so survive, where uniform sampling would thin
//! them out at the same rate as the dense surface around them.

use std::collections::{HashMap, HashSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Cell = [i64; 3];

/// An occupied cell together with any cells merged into it.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGroup {
    pub cell: Cell,
    /// Sorted point ids.
    pub members: Vec<u32>,
    pub merged_from: Vec<Cell>,
}

/// Bins points into `grid` half-open intervals per axis of their bounding
/// box. The upper face of the box belongs to the last interval. Groups are
/// returned in lexicographic cell order with sorted members, so the result
/// does not depend on input order.
pub fn cell_partition(points: &[(u32, [f64; 3])], grid: usize) -> Vec<CellGroup> {
    assert!(grid >= 1, "grid must be at least 1");
    let Some((lo, hi)) = crate::model::bounds_of(points.iter().map(|p| p.1)) else {
        return Vec::new();
    };
    let mut cells: HashMap<Cell, Vec<u32>> = HashMap::new();
    for &(id, p) in points {
        cells.entry(cell_of(p, lo, hi, grid)).or_default().push(id);
    }
    let mut groups: Vec<CellGroup> = cells
        .into_iter()
        .map(|(cell, mut members)| {
            members.sort_unstable();
            CellGroup {
                cell,
                members,
                merged_from: Vec::new(),
            }
        })
        .collect();
    groups.sort_unstable_by_key(|g| g.cell);
    groups
}

fn cell_of(p: [f64; 3], lo: [f64; 3], hi: [f64; 3], grid: usize) -> Cell {
    let mut c = [0i64; 3];
    for a in 0..3 {
        let extent = hi[a] - lo[a];
        if extent > 0.0 {
            let k = ((p[a] - lo[a]) / extent * grid as f64).floor() as i64;
            c[a] = k.clamp(0, grid as i64 - 1);
        }
    }
    c
}

/// Full trace of a downsampling run.
#[derive(Debug, Clone)]
pub struct Downsampled {
    /// Selected ids, sorted.
    pub ids: Vec<u32>,
    /// The `n` final groups; `ids[i]` is not necessarily from `groups[i]`.
    pub groups: Vec<CellGroup>,
    pub grid: usize,
    pub occupied: usize,
    pub merges: usize,
}

/// Selects exactly `n` ids from `points`.
pub fn downsample(points: &[(u32, [f64; 3])], n: usize, seed: u64) -> Result<Vec<u32>> {
    downsample_traced(points, n, seed).map(|d| d.ids)
}

pub fn downsample_traced(points: &[(u32, [f64; 3])], n: usize, seed: u64) -> Result<Downsampled> {
    if n == 0 || points.len() < n {
        return Err(Error::InsufficientPoints {
            needed: n.max(1),
            available: points.len(),
        });
    }
    let distinct: HashSet<[u64; 3]> = points
        .iter()
        .map(|(_, p)| p.map(|v| (v + 0.0).to_bits()))
        .collect();
    if distinct.len() < n {
        return Err(Error::InsufficientDistinctPoints {
            needed: n,
            available: distinct.len(),
        });
    }

    let mut grid = integer_cbrt(n).max(1);
    let mut groups = cell_partition(points, grid);
    while groups.len() < n {
        grid += 1;
        groups = cell_partition(points, grid);
    }
    let occupied = groups.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let surplus = occupied - n;
    if surplus > 0 {
        merge_surplus(&mut groups, surplus, &mut rng);
    }

    let positions: HashMap<u32, [f64; 3]> = points.iter().copied().collect();
    let mut ids: Vec<u32> = groups
        .iter()
        .map(|g| closest_to_centroid(&g.members, &positions))
        .collect();
    ids.sort_unstable();
    Ok(Downsampled {
        ids,
        groups,
        grid,
        occupied,
        merges: surplus,
    })
}

fn integer_cbrt(n: usize) -> usize {
    let mut g = (n as f64).cbrt() as usize;
    while (g + 1).pow(3) <= n {
        g += 1;
    }
    while g > 0 && g.pow(3) > n {
        g -= 1;
    }
    g
}

/// Picks `surplus` distinct groups uniformly and folds each into a random
/// eligible neighbor (occupied, not itself picked). Neighbors are searched
/// in growing Chebyshev rings, so the nearest eligible ring is used.
fn merge_surplus(groups: &mut Vec<CellGroup>, surplus: usize, rng: &mut ChaCha8Rng) {
    let count = groups.len();
    let picked = index::sample(rng, count, surplus).into_vec();
    let mut is_picked = vec![false; count];
    for &i in &picked {
        is_picked[i] = true;
    }
    let lookup: HashMap<Cell, usize> = groups.iter().enumerate().map(|(i, g)| (g.cell, i)).collect();

    let mut candidates = Vec::new();
    for &src in &picked {
        let center = groups[src].cell;
        eligible_neighbors(center, groups, &lookup, &is_picked, &mut candidates);
        let dst = candidates[rng.random_range(0..candidates.len())];
        let moved = std::mem::take(&mut groups[src].members);
        let target = &mut groups[dst];
        target.members.extend(moved);
        target.members.sort_unstable();
        target.merged_from.push(center);
    }

    let mut keep = is_picked.iter().map(|p| !p);
    groups.retain(|_| keep.next().unwrap());
}

fn eligible_neighbors(
    center: Cell,
    groups: &[CellGroup],
    lookup: &HashMap<Cell, usize>,
    is_picked: &[bool],
    out: &mut Vec<usize>,
) {
    out.clear();
    // Shell enumeration is cheap for the first rings; beyond that a linear
    // scan for the minimum Chebyshev distance gives the same set.
    for r in 1..=2i64 {
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                        continue;
                    }
                    let cell = [center[0] + dx, center[1] + dy, center[2] + dz];
                    if let Some(&i) = lookup.get(&cell) {
                        if !is_picked[i] {
                            out.push(i);
                        }
                    }
                }
            }
        }
        if !out.is_empty() {
            out.sort_unstable();
            return;
        }
    }
    let mut best = i64::MAX;
    for (i, g) in groups.iter().enumerate() {
        if is_picked[i] {
            continue;
        }
        let d = chebyshev(center, g.cell);
        if d < best {
            best = d;
            out.clear();
        }
        if d == best {
            out.push(i);
        }
    }
}

pub fn chebyshev(a: Cell, b: Cell) -> i64 {
    (0..3).map(|i| (a[i] - b[i]).abs()).max().unwrap()
}

/// Member closest to the group centroid; ties go to the lowest id.
pub fn closest_to_centroid(members: &[u32], positions: &HashMap<u32, [f64; 3]>) -> u32 {
    let mut c = [0.0; 3];
    for id in members {
        let p = positions[id];
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    let len = members.len() as f64;
    c = c.map(|v| v / len);
    let mut best = (f64::INFINITY, u32::MAX);
    for &id in members {
        let d = dist2(positions[&id], c);
        if d < best.0 || (d == best.0 && id < best.1) {
            best = (d, id);
        }
    }
    best.1
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn octants() -> Vec<(u32, [f64; 3])> {
        let mut pts = Vec::new();
        for i in 0..8u32 {
            let f = |bit| if i & bit != 0 { 0.75 } else { 0.25 };
            pts.push((i, [f(1), f(2), f(4)]));
        }
        pts
    }

    #[test]
    fn octant_points_fill_eight_cells() {
        assert_eq!(cell_partition(&octants(), 2).len(), 8);
    }

    #[test]
    fn colocated_points_share_one_cell() {
        let pts: Vec<_> = (0..20).map(|i| (i, [1.0, 2.0, 3.0])).collect();
        for grid in [1, 3, 17] {
            let groups = cell_partition(&pts, grid);
            assert_eq!(groups.len(), 1);
            assert_eq!(groups[0].members.len(), 20);
        }
    }

    #[test]
    fn integer_cube_root() {
        assert_eq!(integer_cbrt(8), 2);
        assert_eq!(integer_cbrt(26), 2);
        assert_eq!(integer_cbrt(27), 3);
        assert_eq!(integer_cbrt(2048), 12);
    }

    #[test]
    fn exact_budget_with_distinct_points_is_identity() {
        let pts = octants();
        let out = downsample(&pts, 8, 3).unwrap();
        assert_eq!(out, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn too_few_points_is_an_error() {
        let pts = octants();
        assert!(matches!(
            downsample(&pts[..5], 8, 0),
            Err(Error::InsufficientPoints { needed: 8, available: 5 })
        ));
    }

    #[test]
    fn duplicate_positions_below_budget_is_an_error() {
        let pts: Vec<_> = (0..16)
            .map(|i| (i, if i < 12 { [0.0; 3] } else { [i as f64, 0.0, 0.0] }))
            .collect();
        assert!(matches!(
            downsample(&pts, 8, 0),
            Err(Error::InsufficientDistinctPoints { needed: 8, available: 5 })
        ));
    }

    #[test]
    fn merges_bring_group_count_to_budget() {
        let pts: Vec<_> = (0..200u32)
            .map(|i| (i, [(i % 13) as f64 * 0.1, (i / 13) as f64 * 0.07, ((i * 7) % 5) as f64 * 0.03]))
            .collect();
        let d = downsample_traced(&pts, 50, 11).unwrap();
        assert_eq!(d.groups.len(), 50);
        assert_eq!(d.merges, d.occupied - 50);
        let merged: usize = d.groups.iter().map(|g| g.merged_from.len()).sum();
        assert_eq!(merged, d.merges);
        let total: usize = d.groups.iter().map(|g| g.members.len()).sum();
        assert_eq!(total, 200);
    }
}
