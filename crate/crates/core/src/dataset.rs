//! Training, validation and test set construction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::PointCloud;
use crate::voxelizer::Voxel;

/// Non-crack points farther than this from every crack point are left out
/// of training clouds.
pub const NEGATIVE_BAND: f64 = 0.15;

/// Standard deviation of the per-coordinate training jitter, meters.
pub const PERTURB_SCALE: f64 = 0.001;
/// Jitter is clamped to ±this many meters.
pub const PERTURB_LIMIT: f64 = 0.005;

/// Ids of all crack points plus every non-crack point within `width`
/// meters of some crack point.
pub fn negative_band_ids(cloud: &PointCloud, width: f64) -> Result<Vec<u32>> {
    let cracks: Vec<[f64; 3]> = cloud
        .points()
        .iter()
        .filter(|p| p.is_crack())
        .map(|p| p.position())
        .collect();
    if cracks.is_empty() {
        return Err(Error::EmptySelection);
    }
    let index = SpatialHash::new(&cracks, width);
    let w2 = width * width;
    Ok(cloud
        .points()
        .iter()
        .filter(|p| p.is_crack() || index.any_within(p.position(), w2))
        .map(|p| p.id)
        .collect())
}

pub fn negative_band(cloud: &PointCloud, width: f64) -> Result<PointCloud> {
    let ids = negative_band_ids(cloud, width)?;
    Ok(cloud.subset(cloud.tag.clone(), &ids))
}

/// Uniform hash grid over a fixed point set.
pub(crate) struct SpatialHash<'a> {
    points: &'a [[f64; 3]],
    cell: f64,
    buckets: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> SpatialHash<'a> {
    pub(crate) fn new(points: &'a [[f64; 3]], cell: f64) -> Self {
        let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(*p, cell)).or_default().push(i);
        }
        SpatialHash { points, cell, buckets }
    }

    fn key(p: [f64; 3], cell: f64) -> [i64; 3] {
        p.map(|v| (v / cell).floor() as i64)
    }

    /// Whether some indexed point lies within `sqrt(r2)`, with `r2 <= cell²`.
    pub(crate) fn any_within(&self, p: [f64; 3], r2: f64) -> bool {
        let k = Self::key(p, self.cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(b) = self.buckets.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        if b.iter().any(|&i| dist2(self.points[i], p) <= r2) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Train => "train",
            Partition::Validation => "val",
            Partition::Test => "test",
        })
    }
}

impl std::str::FromStr for Partition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "val" => Ok(Partition::Validation),
            "test" => Ok(Partition::Test),
            _ => Err(Error::Config(format!("unknown partition `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SplitEntry {
    pub cloud: String,
    pub instance: i32,
    pub partition: Partition,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<PointCloud>,
    pub validation: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
    pub manifest: Vec<SplitEntry>,
}

/// Number of (train, validation, test) cracks for `total` instances:
/// two thirds (rounded down) form the training pool, which is split 2:1.
pub fn split_sizes(total: usize) -> Result<(usize, usize, usize)> {
    if total < 3 {
        return Err(Error::Split(total));
    }
    let pool = (2 * total / 3).clamp(2, total - 1);
    let val = ((pool as f64 / 3.0).round() as usize).clamp(1, pool - 1);
    Ok((pool - val, val, total - pool))
}

/// Assigns whole crack instances to partitions. Training and validation
/// clouds hold their cracks plus the non-crack band around them; test
/// clouds hold everything else of each surface.
pub fn split_by_crack(clouds: &[PointCloud], seed: u64, band: f64) -> Result<Split> {
    let mut instances: Vec<(usize, i32)> = Vec::new();
    for (ci, cloud) in clouds.iter().enumerate() {
        let ids: BTreeSet<i32> = cloud
            .points()
            .iter()
            .filter(|p| p.is_crack())
            .map(|p| p.instance)
            .collect();
        if ids.contains(&0) {
            return Err(Error::Contract(format!(
                "cloud `{}` has crack points without an instance id",
                cloud.tag
            )));
        }
        instances.extend(ids.into_iter().map(|id| (ci, id)));
    }
    let (n_train, n_val, _) = split_sizes(instances.len())?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = instances.clone();
    order.shuffle(&mut rng);
    let mut assignment: BTreeMap<(usize, i32), Partition> = BTreeMap::new();
    for (k, key) in order.into_iter().enumerate() {
        let part = if k < n_train {
            Partition::Train
        } else if k < n_train + n_val {
            Partition::Validation
        } else {
            Partition::Test
        };
        assignment.insert(key, part);
    }

    let mut split = Split {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        manifest: Vec::new(),
    };
    for (ci, cloud) in clouds.iter().enumerate() {
        let part_of = |id: i32| assignment.get(&(ci, id)).copied();
        let mut taken = vec![false; cloud.len()];
        for part in [Partition::Train, Partition::Validation] {
            let anchors: Vec<[f64; 3]> = cloud
                .points()
                .iter()
                .filter(|p| p.is_crack() && part_of(p.instance) == Some(part))
                .map(|p| p.position())
                .collect();
            if anchors.is_empty() {
                continue;
            }
            let index = SpatialHash::new(&anchors, band);
            let ids: Vec<u32> = cloud
                .points()
                .iter()
                .filter(|p| {
                    !taken[p.id as usize]
                        && if p.is_crack() {
                            part_of(p.instance) == Some(part)
                        } else {
                            index.any_within(p.position(), band * band)
                        }
                })
                .map(|p| p.id)
                .collect();
            for &id in &ids {
                taken[id as usize] = true;
            }
            let sub = cloud.subset(format!("{}-{part}", cloud.tag), &ids);
            match part {
                Partition::Train => split.train.push(sub),
                _ => split.validation.push(sub),
            }
        }
        let rest: Vec<u32> = (0..cloud.len() as u32).filter(|&i| !taken[i as usize]).collect();
        if !rest.is_empty() {
            split.test.push(cloud.subset(format!("{}-test", cloud.tag), &rest));
        }
        for (&(c, id), &partition) in assignment.range((ci, i32::MIN)..=(ci, i32::MAX)) {
            debug_assert_eq!(c, ci);
            split.manifest.push(SplitEntry {
                cloud: cloud.tag.clone(),
                instance: id,
                partition,
            });
        }
    }
    Ok(split)
}

pub fn format_split_manifest(entries: &[SplitEntry]) -> String {
    let mut out = String::from("# cloud\tinstance\tpartition\n");
    for e in entries {
        out.push_str(&format!("{}\t{}\t{}\n", e.cloud, e.instance, e.partition));
    }
    out
}

pub fn parse_split_manifest(text: &str) -> Result<Vec<SplitEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Config(format!("split manifest line {}: `{line}`", i + 1));
        if cols.len() != 3 {
            return Err(bad());
        }
        out.push(SplitEntry {
            cloud: cols[0].to_string(),
            instance: cols[1].parse().map_err(|_| bad())?,
            partition: cols[2].parse()?,
        });
    }
    Ok(out)
}

/// Which optional per-point channels feed the scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FeatureMask {
    pub rgb: bool,
    pub intensity: bool,
}

impl FeatureMask {
    pub const XYZ: FeatureMask = FeatureMask {
        rgb: false,
        intensity: false,
    };
    pub const ALL: FeatureMask = FeatureMask {
        rgb: true,
        intensity: true,
    };

    pub fn channel_count(&self) -> usize {
        3 * self.rgb as usize + self.intensity as usize
    }

    /// Width of the normalized input row: coordinates plus channels.
    pub fn input_width(&self) -> usize {
        3 + self.channel_count()
    }
}

impl fmt::Display for FeatureMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("xyz")?;
        if self.rgb {
            f.write_str("+rgb")?;
        }
        if self.intensity {
            f.write_str("+i")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for FeatureMask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut mask = FeatureMask::XYZ;
        for part in s.split('+') {
            match part.trim() {
                "xyz" => {}
                "rgb" => mask.rgb = true,
                "i" | "intensity" => mask.intensity = true,
                other => return Err(Error::Config(format!("unknown feature `{other}`"))),
            }
        }
        Ok(mask)
    }
}

/// Min/max of r, g, b and intensity over the training set, plus the window
/// edge used to scale coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationStats {
    pub min: [f64; 4],
    pub max: [f64; 4],
    pub d: f64,
}

impl NormalizationStats {
    pub fn from_clouds<'a>(clouds: impl IntoIterator<Item = &'a PointCloud>, d: f64) -> Self {
        let mut min = [f64::INFINITY; 4];
        let mut max = [f64::NEG_INFINITY; 4];
        for cloud in clouds {
            for p in cloud.points() {
                let f = [p.r as f64, p.g as f64, p.b as f64, p.intensity as f64];
                for k in 0..4 {
                    min[k] = min[k].min(f[k]);
                    max[k] = max[k].max(f[k]);
                }
            }
        }
        for k in 0..4 {
            if min[k] > max[k] {
                min[k] = 0.0;
                max[k] = 0.0;
            }
        }
        NormalizationStats { min, max, d }
    }

    fn scale(&self, k: usize, v: f64) -> f64 {
        let span = self.max[k] - self.min[k];
        if span <= 0.0 {
            0.5
        } else {
            ((v - self.min[k]) / span).clamp(0.0, 1.0)
        }
    }
}

/// Class counts of a training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetStats {
    pub positives: usize,
    pub negatives: usize,
}

impl DatasetStats {
    pub fn from_clouds<'a>(clouds: impl IntoIterator<Item = &'a PointCloud>) -> Self {
        let mut s = DatasetStats {
            positives: 0,
            negatives: 0,
        };
        for c in clouds {
            let pos = c.crack_count();
            s.positives += pos;
            s.negatives += c.len() - pos;
        }
        s
    }

    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a u8>) -> Self {
        let mut s = DatasetStats {
            positives: 0,
            negatives: 0,
        };
        for &l in labels {
            if l == 1 {
                s.positives += 1;
            } else {
                s.negatives += 1;
            }
        }
        s
    }

    pub fn prior(&self) -> f64 {
        self.positives as f64 / (self.positives + self.negatives) as f64
    }
}

/// A window ready for scoring: voxel-local coordinates in [0,1]³ and
/// min-max scaled channels, one row per member point.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedVoxel {
    pub members: Vec<u32>,
    pub coords: Vec<[f64; 3]>,
    /// Row-major, `mask.channel_count()` values per point.
    pub channels: Vec<f64>,
    /// Per-point brightness in [0,1]: mean scaled rgb when color is
    /// selected, else scaled intensity when selected, else 0.
    pub brightness: Vec<f64>,
    pub labels: Vec<u8>,
    pub mask: FeatureMask,
}

impl NormalizedVoxel {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// The `n × m` input matrix (coordinates then channels), row-major.
    pub fn matrix(&self) -> Vec<f64> {
        let c = self.mask.channel_count();
        let mut out = Vec::with_capacity(self.len() * (3 + c));
        for i in 0..self.len() {
            out.extend_from_slice(&self.coords[i]);
            out.extend_from_slice(&self.channels[i * c..(i + 1) * c]);
        }
        out
    }
}

pub fn normalize_voxel(
    voxel: &Voxel,
    cloud: &PointCloud,
    stats: &NormalizationStats,
    mask: FeatureMask,
) -> NormalizedVoxel {
    for k in 0..4 {
        let used = if k < 3 { mask.rgb } else { mask.intensity };
        if used && stats.max[k] <= stats.min[k] {
            log::warn!("feature channel {k} is constant in the training set; emitting 0.5");
        }
    }
    let c = mask.channel_count();
    let n = voxel.members.len();
    let mut out = NormalizedVoxel {
        members: voxel.members.clone(),
        coords: Vec::with_capacity(n),
        channels: Vec::with_capacity(n * c),
        brightness: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        mask,
    };
    for &id in &voxel.members {
        let p = &cloud.points()[id as usize];
        let pos = p.position();
        out.coords
            .push([0, 1, 2].map(|a| ((pos[a] - voxel.origin[a]) / stats.d).clamp(0.0, 1.0)));
        let rgb = [
            stats.scale(0, p.r as f64),
            stats.scale(1, p.g as f64),
            stats.scale(2, p.b as f64),
        ];
        let inten = stats.scale(3, p.intensity as f64);
        if mask.rgb {
            out.channels.extend_from_slice(&rgb);
        }
        if mask.intensity {
            out.channels.push(inten);
        }
        out.brightness.push(if mask.rgb {
            (rgb[0] + rgb[1] + rgb[2]) / 3.0
        } else if mask.intensity {
            inten
        } else {
            0.0
        });
        out.labels.push(p.label);
    }
    out
}

/// Coordinate jitter in meters for a standard-normal draw `r`.
pub fn perturbation_offset(r: f64) -> f64 {
    (PERTURB_SCALE * r).clamp(-PERTURB_LIMIT, PERTURB_LIMIT)
}

/// Jitters every normalized coordinate by `perturbation_offset(r) / d`.
/// Coordinates stay clamped to the unit cube.
pub fn perturb(voxel: &mut NormalizedVoxel, d: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in &mut voxel.coords {
        for v in c.iter_mut() {
            let r: f64 = rng.sample(StandardNormal);
            *v = (*v + perturbation_offset(r) / d).clamp(0.0, 1.0);
        }
    }
}

/// `copies` rigid translations, each along one uniformly chosen axis by a
/// uniform offset in `[0, max_offset]` meters.
pub fn translate_augment(
    cloud: &PointCloud,
    copies: usize,
    max_offset: f64,
    seed: u64,
) -> Vec<(PointCloud, [f64; 3])> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..copies)
        .map(|k| {
            let axis = rng.random_range(0..3usize);
            let amount = rng.random_range(0.0..=max_offset);
            let mut offset = [0.0; 3];
            offset[axis] = amount;
            (translate(cloud, offset, format!("{}-t{k}", cloud.tag)), offset)
        })
        .collect()
}

pub fn translate(cloud: &PointCloud, offset: [f64; 3], tag: String) -> PointCloud {
    let points = cloud
        .points()
        .iter()
        .map(|p| {
            let mut q = *p;
            q.x = (p.x as f64 + offset[0]) as f32;
            q.y = (p.y as f64 + offset[1]) as f32;
            q.z = (p.z as f64 + offset[2]) as f32;
            q
        })
        .collect();
    PointCloud::new(tag, points)
}
