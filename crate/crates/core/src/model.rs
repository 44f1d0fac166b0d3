//! Shared domain types and configuration records.
//!
//! Point identity is the `id` field, assigned in file (or construction)
//! order. Every later stage (voxel membership, cluster assignment,
//! metrics) refers to points by id, never by coordinates.

use std::fmt;

/// A colored, labeled LIDAR return.
///
/// Coordinates and intensity are stored at interchange precision (32-bit)
/// so that a cloud survives a PLY round trip bit for bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPoint {
    pub id: u32,
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub r: u8,
    pub g: u8,
    pub b: u8,
    pub intensity: f32,
    /// 0 = non-crack, 1 = crack.
    pub label: u8,
    /// Ground-truth crack instance, 0 when the point is not on a known crack.
    pub instance: i32,
}

impl LabeledPoint {
    pub fn new(x: f32, y: f32, z: f32) -> Self {
        LabeledPoint {
            id: 0,
            x,
            y,
            z,
            r: 0,
            g: 0,
            b: 0,
            intensity: 0.0,
            label: 0,
            instance: 0,
        }
    }

    #[inline]
    pub fn position(&self) -> [f64; 3] {
        [self.x as f64, self.y as f64, self.z as f64]
    }

    #[inline]
    pub fn is_crack(&self) -> bool {
        self.label == 1
    }

    /// Mean of the color channels, scaled to [0,1].
    #[inline]
    pub fn brightness(&self) -> f64 {
        (self.r as f64 + self.g as f64 + self.b as f64) / (3.0 * 255.0)
    }
}

/// An ordered point sequence for a single scanned surface.
///
/// Construction renumbers ids so that `points[i].id == i`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub tag: String,
    points: Vec<LabeledPoint>,
}

impl PointCloud {
    pub fn new(tag: impl Into<String>, mut points: Vec<LabeledPoint>) -> Self {
        for (i, p) in points.iter_mut().enumerate() {
            p.id = i as u32;
        }
        PointCloud {
            tag: tag.into(),
            points,
        }
    }

    pub fn points(&self) -> &[LabeledPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&LabeledPoint> {
        self.points.get(id as usize)
    }

    pub fn position(&self, id: u32) -> [f64; 3] {
        self.points[id as usize].position()
    }

    pub fn into_points(self) -> Vec<LabeledPoint> {
        self.points
    }

    /// New cloud holding the given ids in the given order, renumbered.
    pub fn subset(&self, tag: impl Into<String>, ids: &[u32]) -> PointCloud {
        PointCloud::new(tag, ids.iter().map(|&i| self.points[i as usize]).collect())
    }

    /// Axis-aligned bounding box `(min, max)`, or `None` for an empty cloud.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        bounds_of(self.points.iter().map(|p| p.position()))
    }

    pub fn crack_count(&self) -> usize {
        self.points.iter().filter(|p| p.is_crack()).count()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.points.iter().map(|p| p.label).collect()
    }
}

pub(crate) fn bounds_of(iter: impl Iterator<Item = [f64; 3]>) -> Option<([f64; 3], [f64; 3])> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut any = false;
    for p in iter {
        any = true;
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    any.then_some((lo, hi))
}

/// Window size `d`, points per window `n` and stride `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelizationConfig {
    pub d: f64,
    pub n: usize,
    pub s: f64,
}

impl Default for VoxelizationConfig {
    fn default() -> Self {
        VoxelizationConfig {
            d: 0.5,
            n: 2048,
            s: 0.5,
        }
    }
}

impl VoxelizationConfig {
    /// Same window with `s = d` (the setting used at inference time).
    pub fn without_overlap(self) -> Self {
        VoxelizationConfig { s: self.d, ..self }
    }
}

/// Post-processing thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusteringConfig {
    /// Minimum confidence for a point to be a crack candidate.
    pub confidence_threshold: f64,
    /// Two candidates closer than this (meters) are linked.
    pub link_distance: f64,
    /// Clusters with fewer points are rejected.
    pub min_cluster_size: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        ClusteringConfig {
            confidence_threshold: 0.59,
            link_distance: 0.04,
            min_cluster_size: 20,
        }
    }
}

/// Fraction of a predicted instance that must lie on a real crack for the
/// two to match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    pub alpha: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig { alpha: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Lists every violated configuration invariant. An empty list means the
/// three records are mutually consistent and usable by every stage.
pub fn validate_config(
    voxel: &VoxelizationConfig,
    clustering: &ClusteringConfig,
    matching: &MatchConfig,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut fail = |field, message: String| out.push(Violation { field, message });

    if !(voxel.d.is_finite() && voxel.d > 0.0) {
        fail("d", format!("voxel edge must be positive, got {}", voxel.d));
    }
    if voxel.n < 8 {
        fail("n", format!("points per voxel must be >= 8, got {}", voxel.n));
    }
    if !(voxel.s.is_finite() && voxel.s > 0.0) {
        fail("s", format!("stride must be positive, got {}", voxel.s));
    } else if voxel.s > voxel.d {
        fail("s", format!("s > d ({} > {})", voxel.s, voxel.d));
    }

    let h = clustering.confidence_threshold;
    if !(h > 0.0 && h <= 1.0) {
        fail(
            "delta_h",
            format!("confidence threshold must be in (0,1], got {h}"),
        );
    }
    let r = clustering.link_distance;
    if !(r.is_finite() && r > 0.0) {
        fail("delta_r", format!("link distance must be positive, got {r}"));
    }
    if clustering.min_cluster_size == 0 {
        fail("delta_n", "minimum cluster size must be >= 1".to_string());
    }

    let a = matching.alpha;
    if !(a > 0.0 && a <= 1.0) {
        fail("alpha_match", format!("must be in (0,1], got {a}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_voxel_settings_are_valid() {
        let v = VoxelizationConfig {
            d: 0.5,
            n: 2048,
            s: 0.5,
        };
        assert!(validate_config(&v, &ClusteringConfig::default(), &MatchConfig::default()).is_empty());
    }

    #[test]
    fn stride_larger_than_edge_is_reported() {
        let v = VoxelizationConfig {
            d: 0.5,
            n: 2048,
            s: 0.6,
        };
        let report = validate_config(&v, &ClusteringConfig::default(), &MatchConfig::default());
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].field, "s");
        assert!(report[0].message.contains("s > d"));
    }

    #[test]
    fn table_four_clustering_is_valid() {
        let c = ClusteringConfig {
            confidence_threshold: 0.59,
            link_distance: 0.04,
            min_cluster_size: 20,
        };
        assert!(validate_config(&VoxelizationConfig::default(), &c, &MatchConfig::default()).is_empty());
    }

    #[test]
    fn every_bad_field_is_listed() {
        let v = VoxelizationConfig { d: -1.0, n: 4, s: 0.0 };
        let c = ClusteringConfig {
            confidence_threshold: 1.5,
            link_distance: 0.0,
            min_cluster_size: 0,
        };
        let m = MatchConfig { alpha: 0.0 };
        let fields: Vec<_> = validate_config(&v, &c, &m).iter().map(|v| v.field).collect();
        assert_eq!(fields, ["d", "n", "s", "delta_h", "delta_r", "delta_n", "alpha_match"]);
    }

    #[test]
    fn construction_assigns_ids_in_order() {
        let cloud = PointCloud::new(
            "t",
            vec![LabeledPoint::new(1.0, 0.0, 0.0), LabeledPoint::new(0.0, 1.0, 0.0)],
        );
        let ids: Vec<u32> = cloud.points().iter().map(|p| p.id).collect();
        assert_eq!(ids, [0, 1]);
        let sub = cloud.subset("s", &[1]);
        assert_eq!(sub.points()[0].id, 0);
        assert_eq!(sub.points()[0].y, 1.0);
    }
}
