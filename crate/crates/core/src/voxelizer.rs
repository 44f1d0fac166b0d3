//! Sliding cubic windows over a cloud and the merge back to per-point
//! confidences.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::cloud_io::AnnotationLayer;
use crate::downsampler;
use crate::error::{Error, Result};
use crate::model::{PointCloud, VoxelizationConfig};

/// A window `[origin, origin + d)³` and the ids of the points inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct Voxel {
    pub origin: [f64; 3],
    pub index: [i64; 3],
    /// Sorted point ids.
    pub members: Vec<u32>,
    pub source: String,
}

/// Window origins `anchor + k·s` along each axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lattice {
    pub anchor: [f64; 3],
    pub d: f64,
    pub s: f64,
}

impl Lattice {
    #[inline]
    pub fn lower(&self, axis: usize, k: i64) -> f64 {
        self.anchor[axis] + k as f64 * self.s
    }

    /// Exclusive upper bound. Without overlap this is exactly the next
    /// window's lower bound, so adjacent windows never share or drop a
    /// point through rounding.
    #[inline]
    pub fn upper(&self, axis: usize, k: i64) -> f64 {
        if self.s == self.d {
            self.lower(axis, k + 1)
        } else {
            self.anchor[axis] + (k as f64 * self.s + self.d)
        }
    }

    #[inline]
    pub fn contains(&self, index: [i64; 3], p: [f64; 3]) -> bool {
        (0..3).all(|a| self.lower(a, index[a]) <= p[a] && p[a] < self.upper(a, index[a]))
    }

    fn axis_range(&self, axis: usize, v: f64) -> (i64, i64) {
        let rel = v - self.anchor[axis];
        let hi = (rel / self.s).floor() as i64 + 1;
        let lo = ((rel - self.d) / self.s).ceil() as i64 - 1;
        (lo, hi)
    }
}

/// Windows anchored at the cloud's bounding-box minimum.
pub fn build_grid(cloud: &PointCloud, config: &VoxelizationConfig) -> Vec<Voxel> {
    match cloud.bounds() {
        Some((lo, _)) => build_grid_anchored(cloud, config, lo),
        None => Vec::new(),
    }
}

/// Windows on the lattice through `anchor`. Empty windows are omitted;
/// the result is ordered by lattice index.
pub fn build_grid_anchored(cloud: &PointCloud, config: &VoxelizationConfig, anchor: [f64; 3]) -> Vec<Voxel> {
    let lattice = Lattice {
        anchor,
        d: config.d,
        s: config.s,
    };
    let mut cells: BTreeMap<[i64; 3], Vec<u32>> = BTreeMap::new();
    for p in cloud.points() {
        let pos = p.position();
        let ranges = [0, 1, 2].map(|a| lattice.axis_range(a, pos[a]));
        for i in ranges[0].0..=ranges[0].1 {
            if !(lattice.lower(0, i) <= pos[0] && pos[0] < lattice.upper(0, i)) {
                continue;
            }
            for j in ranges[1].0..=ranges[1].1 {
                if !(lattice.lower(1, j) <= pos[1] && pos[1] < lattice.upper(1, j)) {
                    continue;
                }
                for k in ranges[2].0..=ranges[2].1 {
                    if lattice.lower(2, k) <= pos[2] && pos[2] < lattice.upper(2, k) {
                        cells.entry([i, j, k]).or_default().push(p.id);
                    }
                }
            }
        }
    }
    cells
        .into_iter()
        .map(|(index, members)| Voxel {
            origin: [0, 1, 2].map(|a| lattice.lower(a, index[a])),
            index,
            members,
            source: cloud.tag.clone(),
        })
        .collect()
}

/// Mixes a base seed with a per-item index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, item: u64) -> u64 {
    let mut z = seed ^ item.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Drops windows with fewer than `n` points and downsamples larger ones
/// to exactly `n`. Windows whose points collapse onto fewer than `n`
/// distinct positions are dropped as well.
pub fn filter_and_fill(voxels: Vec<Voxel>, cloud: &PointCloud, n: usize, seed: u64) -> Vec<Voxel> {
    let kept: Vec<Option<Voxel>> = voxels
        .into_par_iter()
        .enumerate()
        .map(|(i, mut v)| {
            if v.members.len() < n {
                return None;
            }
            if v.members.len() > n {
                let pts: Vec<(u32, [f64; 3])> = v.members.iter().map(|&id| (id, cloud.position(id))).collect();
                match downsampler::downsample(&pts, n, derive_seed(seed, i as u64)) {
                    Ok(ids) => v.members = ids,
                    Err(e) => {
                        log::debug!("dropping voxel {:?}: {e}", v.index);
                        return None;
                    }
                }
            }
            Some(v)
        })
        .collect();
    kept.into_iter().flatten().collect()
}

/// Per-member confidences for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredVoxel {
    pub members: Vec<u32>,
    pub confidence: Vec<f32>,
}

/// Merges window outputs into one value per point by taking the maximum.
/// Points no window scored keep confidence 0 and `classified = false`.
pub fn reconstruct(cloud: &PointCloud, scored: &[ScoredVoxel]) -> Result<AnnotationLayer> {
    let mut layer = AnnotationLayer::unscored(cloud.len());
    for v in scored {
        if v.members.len() != v.confidence.len() {
            return Err(Error::Contract(format!(
                "{} members but {} confidences",
                v.members.len(),
                v.confidence.len()
            )));
        }
        for (&id, &c) in v.members.iter().zip(&v.confidence) {
            let i = id as usize;
            if i >= cloud.len() {
                return Err(Error::Integrity(id));
            }
            if !layer.classified[i] || c > layer.confidence[i] {
                layer.confidence[i] = c;
            }
            layer.classified[i] = true;
        }
    }
    Ok(layer)
}
