//! Post-processing from per-point confidences to crack instances:
//! threshold, link nearby candidates, drop small groups.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use crate::cloud_io::AnnotationLayer;
use crate::dataset::normalize_voxel;
use crate::error::{Error, Result};
use crate::model::{bounds_of, validate_config, ClusteringConfig, MatchConfig, PointCloud, VoxelizationConfig};
use crate::scorer::{predict, ScorerModel};
use crate::voxelizer::{build_grid, filter_and_fill, reconstruct, ScoredVoxel};

#[derive(Debug, Clone, PartialEq)]
pub struct CrackInstance {
    pub id: u32,
    /// Sorted, non-empty.
    pub members: Vec<u32>,
    pub centroid: [f64; 3],
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl CrackInstance {
    pub fn from_members(id: u32, mut members: Vec<u32>, cloud: &PointCloud) -> Self {
        assert!(!members.is_empty(), "crack instance without points");
        members.sort_unstable();
        let pos: Vec<[f64; 3]> = members.iter().map(|&m| cloud.position(m)).collect();
        let mut centroid = [0.0; 3];
        for p in &pos {
            (0..3).for_each(|a| centroid[a] += p[a]);
        }
        centroid = centroid.map(|c| c / pos.len() as f64);
        let (min, max) = bounds_of(pos.iter().copied()).expect("non-empty");
        CrackInstance {
            id,
            members,
            centroid,
            min,
            max,
        }
    }

    pub fn point_count(&self) -> usize {
        self.members.len()
    }
}

/// Ids whose confidence is at least `delta_h`.
pub fn threshold_points(layer: &AnnotationLayer, delta_h: f64) -> Vec<u32> {
    layer
        .confidence
        .iter()
        .enumerate()
        .filter(|(_, &c)| c as f64 >= delta_h)
        .map(|(i, _)| i as u32)
        .collect()
}

/// Whether two points are directly linked: strictly closer than `delta_r`.
#[inline]
pub fn linked(a: [f64; 3], b: [f64; 3], delta_r: f64) -> bool {
    let d2: f64 = (0..3).map(|k| (a[k] - b[k]).powi(2)).sum();
    d2 < delta_r * delta_r
}

/// Connected components of the "closer than `delta_r`" graph. Each
/// cluster is sorted and clusters are ordered by their smallest id, so
/// the result does not depend on input order.
pub fn cluster(points: &[(u32, [f64; 3])], delta_r: f64) -> Vec<Vec<u32>> {
    assert!(delta_r > 0.0, "link distance must be positive");
    let key = |p: [f64; 3]| p.map(|v| (v / delta_r).floor() as i64);
    let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, &(_, p)) in points.iter().enumerate() {
        cells.entry(key(p)).or_default().push(i);
    }
    let mut uf = UnionFind::new(points.len());
    for (i, &(_, p)) in points.iter().enumerate() {
        let k = key(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) else {
                        continue;
                    };
                    for &j in bucket {
                        if j > i && linked(p, points[j].1, delta_r) {
                            uf.union(i, j);
                        }
                    }
                }
            }
        }
    }
    let mut groups: HashMap<usize, Vec<u32>> = HashMap::new();
    for (i, &(id, _)) in points.iter().enumerate() {
        groups.entry(uf.find(i)).or_default().push(id);
    }
    let mut out: Vec<Vec<u32>> = groups
        .into_values()
        .map(|mut g| {
            g.sort_unstable();
            g
        })
        .collect();
    out.sort_unstable_by_key(|g| g[0]);
    out
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Keeps clusters with at least `delta_n` points and numbers them 1..K in
/// input order.
pub fn filter_clusters(clusters: Vec<Vec<u32>>, delta_n: usize, cloud: &PointCloud) -> Vec<CrackInstance> {
    clusters
        .into_iter()
        .filter(|c| c.len() >= delta_n && !c.is_empty())
        .enumerate()
        .map(|(k, c)| CrackInstance::from_members(k as u32 + 1, c, cloud))
        .collect()
}

/// Thresholds, clusters and filters an already scored layer, then writes
/// `predicted` and `cluster_id` back into it. Only members of surviving
/// instances are predicted as crack.
pub fn instances_from_layer(
    cloud: &PointCloud,
    layer: &mut AnnotationLayer,
    config: &ClusteringConfig,
) -> Vec<CrackInstance> {
    let candidates: Vec<(u32, [f64; 3])> = threshold_points(layer, config.confidence_threshold)
        .into_iter()
        .map(|id| (id, cloud.position(id)))
        .collect();
    let instances = filter_clusters(
        cluster(&candidates, config.link_distance),
        config.min_cluster_size,
        cloud,
    );
    layer.predicted.iter_mut().for_each(|p| *p = 0);
    layer.cluster_id.iter_mut().for_each(|c| *c = -1);
    for inst in &instances {
        for &m in &inst.members {
            layer.predicted[m as usize] = 1;
            layer.cluster_id[m as usize] = inst.id as i32;
        }
    }
    instances
}

/// Voxelizes, scores and merges a cloud into one confidence per point.
pub fn score_cloud(
    cloud: &PointCloud,
    model: &ScorerModel,
    voxel: &VoxelizationConfig,
    seed: u64,
) -> Result<AnnotationLayer> {
    if (model.stats.d - voxel.d).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "model was trained with voxel edge {} but detection uses {}",
            model.stats.d, voxel.d
        )));
    }
    let voxels = filter_and_fill(build_grid(cloud, voxel), cloud, voxel.n, seed);
    let scored: Vec<ScoredVoxel> = voxels
        .par_iter()
        .map(|v| {
            let nv = normalize_voxel(v, cloud, &model.stats, model.mask);
            ScoredVoxel {
                members: v.members.clone(),
                confidence: predict(model, &nv).into_iter().map(|c| c as f32).collect(),
            }
        })
        .collect();
    log::debug!("{}: {} voxels scored", cloud.tag, scored.len());
    reconstruct(cloud, &scored)
}

/// The whole inference path for one cloud.
pub fn detect(
    cloud: &PointCloud,
    model: &ScorerModel,
    voxel: &VoxelizationConfig,
    clustering: &ClusteringConfig,
    seed: u64,
) -> Result<(AnnotationLayer, Vec<CrackInstance>)> {
    let violations = validate_config(voxel, clustering, &MatchConfig::default());
    if !violations.is_empty() {
        let text: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(Error::Config(text.join("; ")));
    }
    let mut layer = score_cloud(cloud, model, voxel, seed)?;
    let instances = instances_from_layer(cloud, &mut layer, clustering);
    Ok((layer, instances))
}

/// Ground-truth crack instances. When every crack point carries a
/// generator instance id those ids delimit the instances; otherwise the
/// crack points are clustered with `delta_r`.
pub fn real_instances(cloud: &PointCloud, delta_r: f64) -> Vec<CrackInstance> {
    let cracks: Vec<_> = cloud.points().iter().filter(|p| p.is_crack()).collect();
    if !cracks.is_empty() && cracks.iter().all(|p| p.instance > 0) {
        let mut by_id: BTreeMap<i32, Vec<u32>> = BTreeMap::new();
        for p in cracks {
            by_id.entry(p.instance).or_default().push(p.id);
        }
        return by_id
            .into_iter()
            .map(|(id, m)| CrackInstance::from_members(id as u32, m, cloud))
            .collect();
    }
    let pts: Vec<(u32, [f64; 3])> = cracks.iter().map(|p| (p.id, p.position())).collect();
    cluster(&pts, delta_r)
        .into_iter()
        .enumerate()
        .map(|(k, c)| CrackInstance::from_members(k as u32 + 1, c, cloud))
        .collect()
}

/// Tab-separated instance table with a header line.
pub fn format_instances(instances: &[CrackInstance]) -> String {
    let mut out = String::from("id\tpoints\tcx\tcy\tcz\tmin_x\tmin_y\tmin_z\tmax_x\tmax_y\tmax_z\n");
    for i in instances {
        out.push_str(&format!("{}\t{}", i.id, i.point_count()));
        for v in i.centroid.iter().chain(&i.min).chain(&i.max) {
            out.push_str(&format!("\t{v:.4}"));
        }
        out.push('\n');
    }
    out
}
