//! Per-point feature rows: normalized coordinates, selected channels and
//! local neighborhood descriptors.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::dataset::{FeatureMask, NormalizedVoxel};

/// Neighborhood radius in normalized (voxel-edge) units.
pub const NEIGHBOR_RADIUS: f64 = 0.1;

/// Descriptors appended after coordinates and channels, in this order.
pub const DESCRIPTOR_NAMES: [&str; 7] = [
    "linearity",
    "planarity",
    "sphericity",
    "neighbor_count",
    "mean_neighbor_distance",
    "darkness_contrast",
    "normal_offset",
];

pub const DESCRIPTOR_COUNT: usize = DESCRIPTOR_NAMES.len();

pub fn feature_width(mask: FeatureMask) -> usize {
    mask.input_width() + DESCRIPTOR_COUNT
}

/// Local shape and shading around one point. All zero for a point with
/// fewer than two neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Descriptors {
    /// `(λ1 - λ2) / λ1` of the neighborhood covariance.
    pub linearity: f64,
    /// `(λ2 - λ3) / λ1`.
    pub planarity: f64,
    /// `λ3 / λ1`.
    pub sphericity: f64,
    /// `ln(1 + k) / 4` for `k` neighbors (self excluded).
    pub neighbor_count: f64,
    /// Mean neighbor distance divided by the radius.
    pub mean_distance: f64,
    /// Own brightness minus the neighbors' mean brightness.
    pub darkness_contrast: f64,
    /// Signed distance to the neighborhood's best-fit plane, in radii,
    /// with the plane normal oriented towards +z. Negative inside a
    /// depression.
    pub normal_offset: f64,
}

impl Descriptors {
    pub fn to_array(self) -> [f64; DESCRIPTOR_COUNT] {
        [
            self.linearity,
            self.planarity,
            self.sphericity,
            self.neighbor_count,
            self.mean_distance,
            self.darkness_contrast,
            self.normal_offset,
        ]
    }
}

/// Row-major `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn extract_features(voxel: &NormalizedVoxel) -> FeatureMatrix {
    let desc = local_descriptors(&voxel.coords, &voxel.brightness, &voxel.members, NEIGHBOR_RADIUS);
    let c = voxel.mask.channel_count();
    let cols = feature_width(voxel.mask);
    let mut data = Vec::with_capacity(voxel.len() * cols);
    for i in 0..voxel.len() {
        data.extend_from_slice(&voxel.coords[i]);
        data.extend_from_slice(&voxel.channels[i * c..(i + 1) * c]);
        data.extend_from_slice(&desc[i].to_array());
    }
    FeatureMatrix {
        rows: voxel.len(),
        cols,
        data,
    }
}

/// Descriptors for every point. Neighbors are visited in `keys` order so
/// the result does not depend on how the points are permuted.
pub fn local_descriptors(coords: &[[f64; 3]], brightness: &[f64], keys: &[u32], radius: f64) -> Vec<Descriptors> {
    let grid = NeighborGrid::new(coords, radius);
    let r2 = radius * radius;
    let mut neighbors = Vec::new();
    coords
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            neighbors.clear();
            grid.visit(p, |j| {
                if j != i && dist2(coords[j], p) <= r2 {
                    neighbors.push(j);
                }
            });
            neighbors.sort_unstable_by_key(|&j| keys[j]);
            describe(i, &neighbors, coords, brightness, radius)
        })
        .collect()
}

fn describe(i: usize, neighbors: &[usize], coords: &[[f64; 3]], brightness: &[f64], radius: f64) -> Descriptors {
    let k = neighbors.len();
    if k < 2 {
        return Descriptors::default();
    }
    let p = coords[i];
    let mut mean = Vector3::from(p);
    let mut dist_sum = 0.0;
    let mut bright_sum = 0.0;
    for &j in neighbors {
        mean += Vector3::from(coords[j]);
        dist_sum += dist2(coords[j], p).sqrt();
        bright_sum += brightness[j];
    }
    mean /= (k + 1) as f64;
    let mut cov = Matrix3::zeros();
    for &j in std::iter::once(&i).chain(neighbors) {
        let d = Vector3::from(coords[j]) - mean;
        cov += d * d.transpose();
    }
    cov /= (k + 1) as f64;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let l = order.map(|o| eig.eigenvalues[o].max(0.0));

    let mut d = Descriptors {
        neighbor_count: (k as f64).ln_1p() / 4.0,
        mean_distance: dist_sum / k as f64 / radius,
        darkness_contrast: brightness[i] - bright_sum / k as f64,
        ..Descriptors::default()
    };
    if l[0] > 1e-18 {
        d.linearity = (l[0] - l[1]) / l[0];
        d.planarity = (l[1] - l[2]) / l[0];
        d.sphericity = l[2] / l[0];
        let mut normal: Vector3<f64> = eig.eigenvectors.column(order[2]).into_owned();
        if normal.z < 0.0 {
            normal = -normal;
        }
        d.normal_offset = (Vector3::from(p) - mean).dot(&normal) / radius;
    }
    d
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Dense bucket grid over the unit cube, cell edge = radius.
struct NeighborGrid {
    dim: usize,
    cell: f64,
    starts: Vec<usize>,
    items: Vec<usize>,
}

impl NeighborGrid {
    fn new(coords: &[[f64; 3]], radius: f64) -> Self {
        let dim = ((1.0 / radius).ceil() as usize).max(1) + 1;
        let mut grid = NeighborGrid {
            dim,
            cell: radius,
            starts: vec![0; dim * dim * dim + 1],
            items: vec![0; coords.len()],
        };
        let keys: Vec<usize> = coords.iter().map(|&p| grid.flat(grid.key(p))).collect();
        for &k in &keys {
            grid.starts[k + 1] += 1;
        }
        for i in 1..grid.starts.len() {
            grid.starts[i] += grid.starts[i - 1];
        }
        let mut fill = grid.starts.clone();
        for (i, &k) in keys.iter().enumerate() {
            grid.items[fill[k]] = i;
            fill[k] += 1;
        }
        grid
    }

    fn key(&self, p: [f64; 3]) -> [usize; 3] {
        p.map(|v| ((v / self.cell).floor().max(0.0) as usize).min(self.dim - 1))
    }

    fn flat(&self, k: [usize; 3]) -> usize {
        (k[0] * self.dim + k[1]) * self.dim + k[2]
    }

    fn visit(&self, p: [f64; 3], mut f: impl FnMut(usize)) {
        let k = self.key(p);
        let lo = k.map(|v| v.saturating_sub(1));
        let hi = k.map(|v| (v + 1).min(self.dim - 1));
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    let c = self.flat([x, y, z]);
                    for &i in &self.items[self.starts[c]..self.starts[c + 1]] {
                        f(i);
                    }
                }
            }
        }
    }
}
