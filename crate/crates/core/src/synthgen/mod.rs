//! Labeled synthetic rough surfaces with carved cracks.

pub mod noise;

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{LabeledPoint, PointCloud};
use crate::voxelizer::derive_seed;
use noise::GradientNoise;

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSpec {
    pub tag: String,
    /// Size along x and y, meters.
    pub extent: [f64; 2],
    /// Points per square meter.
    pub density: f64,
    /// Peak height deviation of the noise field, meters.
    pub roughness: f64,
    pub octaves: u32,
    /// Lowest noise frequency, cycles per meter.
    pub base_frequency: f64,
    /// Amplitude ratio between successive octaves.
    pub gain: f64,
    pub base_color: [u8; 3],
    /// Standard deviation of per-point color noise.
    pub color_jitter: f64,
    /// Amplitude of large-scale shading patches, in color units.
    pub color_variation: f64,
    /// Standard deviation of vertical sensor noise, meters.
    pub sensor_noise: f64,
    pub seed: u64,
}

impl Default for SurfaceSpec {
    fn default() -> Self {
        SurfaceSpec {
            tag: "surface".into(),
            extent: [2.0, 2.0],
            density: 10_000.0,
            roughness: 0.03,
            octaves: 4,
            base_frequency: 1.0,
            gain: 0.5,
            base_color: [150, 140, 125],
            color_jitter: 8.0,
            color_variation: 25.0,
            sensor_noise: 0.001,
            seed: 0,
        }
    }
}

impl SurfaceSpec {
    fn validate(&self) -> Result<()> {
        let ok = self.extent.iter().all(|e| e.is_finite() && *e > 0.0)
            && self.density.is_finite()
            && self.density > 0.0
            && self.roughness >= 0.0
            && self.sensor_noise >= 0.0
            && self.color_jitter >= 0.0
            && self.color_variation >= 0.0
            && self.base_frequency > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "surface '{}' needs positive extent and density and non-negative noise levels",
                self.tag
            )))
        }
    }
}

/// A crack as a centerline in the xy plane with a width at each waypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CrackSpec {
    /// Waypoints in meters; only x and y are used.
    pub path: Vec<[f64; 3]>,
    /// Full opening width at each waypoint, meters. Interpolated linearly
    /// by arc length in between.
    pub widths: Vec<f64>,
    /// Floor depth below the surface, meters.
    pub depth: f64,
    /// 0 leaves colors unchanged, 1 makes crack points black.
    pub darkening: f64,
    /// Fraction of footprint points kept, so cracks are sparser than the
    /// surrounding surface.
    pub retain: f64,
}

impl CrackSpec {
    pub fn length(&self) -> f64 {
        self.path.windows(2).map(|w| dist2d(w[0], w[1])).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.path.len() < 2 || self.widths.len() != self.path.len() {
            return Err(Error::Config("a crack needs >= 2 waypoints and one width per waypoint".into()));
        }
        if self.widths.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Config("crack widths must be positive".into()));
        }
        if !(self.length() > 0.0) {
            return Err(Error::Config("crack path has zero length".into()));
        }
        if !(self.depth >= 0.0 && (0.0..=1.0).contains(&self.darkening) && self.retain > 0.0 && self.retain <= 1.0) {
            return Err(Error::Config(
                "crack depth must be >= 0, darkening in [0,1] and retain in (0,1]".into(),
            ));
        }
        Ok(())
    }

    /// Lateral distance to the centerline and the interpolated width at
    /// the closest point.
    fn locate(&self, x: f64, y: f64) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0);
        for (k, w) in self.path.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len2 = dx * dx + dy * dy;
            let t = if len2 > 0.0 {
                (((x - a[0]) * dx + (y - a[1]) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (px, py) = (a[0] + t * dx, a[1] + t * dy);
            let d = ((x - px).powi(2) + (y - py).powi(2)).sqrt();
            if d < best.0 {
                let width = self.widths[k] + t * (self.widths[k + 1] - self.widths[k]);
                best = (d, width);
            }
        }
        best
    }

    /// Length-weighted mean of the width profile.
    fn mean_width(&self) -> f64 {
        let mut sum = 0.0;
        for (k, w) in self.path.windows(2).enumerate() {
            sum += dist2d(w[0], w[1]) * 0.5 * (self.widths[k] + self.widths[k + 1]);
        }
        sum / self.length()
    }
}

fn dist2d(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// One manifest row: the analytic geometry of a carved crack.
#[derive(Debug, Clone, PartialEq)]
pub struct CrackRecord {
    pub surface: String,
    pub instance: i32,
    pub min_width: f64,
    pub mean_width: f64,
    pub max_width: f64,
    pub length: f64,
    pub points: usize,
}

/// Samples a rough height field with one jittered point per grid cell, so
/// the count is `extent_x · extent_y · density` up to rounding.
pub fn generate_surface(spec: &SurfaceSpec) -> Result<PointCloud> {
    spec.validate()?;
    let h = 1.0 / spec.density.sqrt();
    let nx = (spec.extent[0] / h).round().max(1.0) as usize;
    let ny = (spec.extent[1] / h).round().max(1.0) as usize;
    let (cx, cy) = (spec.extent[0] / nx as f64, spec.extent[1] / ny as f64);
    let height = GradientNoise::new(derive_seed(spec.seed, 1));
    let shade = GradientNoise::new(derive_seed(spec.seed, 2));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 3));
    let sensor = Normal::new(0.0, spec.sensor_noise).expect("validated");
    let jitter = Normal::new(0.0, spec.color_jitter).expect("validated");

    let mut points = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            let x = (i as f64 + rng.random::<f64>()) * cx;
            let y = (j as f64 + rng.random::<f64>()) * cy;
            let f = spec.base_frequency;
            let z = spec.roughness * height.fbm(x * f, y * f, spec.octaves, spec.gain) + sensor.sample(&mut rng);
            let patch = spec.color_variation * shade.fbm(x * 2.0, y * 2.0, 2, 0.5);
            let shift = patch + jitter.sample(&mut rng);
            let mut p = LabeledPoint::new(x as f32, y as f32, z as f32);
            let [r, g, b] = spec.base_color.map(|c| (c as f64 + shift).round().clamp(0.0, 255.0) as u8);
            (p.r, p.g, p.b) = (r, g, b);
            let lum = (r as f64 + g as f64 + b as f64) / (3.0 * 255.0);
            p.intensity = (lum + 0.02 * rng.random::<f64>() - 0.01).clamp(0.0, 1.0) as f32;
            points.push(p);
        }
    }
    Ok(PointCloud::new(spec.tag.clone(), points))
}

/// Floor-plus-walls depth profile: full depth over the central part of
/// the opening, ramping to zero at the edges. `u` is the lateral distance
/// over the half width.
fn depth_profile(u: f64) -> f64 {
    const FLOOR: f64 = 0.6;
    if u <= FLOOR {
        1.0
    } else {
        ((1.0 - u) / (1.0 - FLOOR)).clamp(0.0, 1.0)
    }
}

/// Cuts a crack into the surface: footprint points are thinned, sunk,
/// darkened and labeled with `instance`. Fails if the footprint leaves
/// the surface's xy bounds.
pub fn carve_crack(cloud: &PointCloud, spec: &CrackSpec, instance: i32, seed: u64) -> Result<(PointCloud, CrackRecord)> {
    spec.validate()?;
    if instance <= 0 {
        return Err(Error::Config(format!("crack instance ids must be positive, got {instance}")));
    }
    let (lo, hi) = cloud
        .bounds()
        .ok_or_else(|| Error::Geometry("cannot carve into an empty cloud".into()))?;
    for (p, w) in spec.path.iter().zip(&spec.widths) {
        let r = w / 2.0;
        if p[0] - r < lo[0] || p[0] + r > hi[0] || p[1] - r < lo[1] || p[1] + r > hi[1] {
            return Err(Error::Geometry(format!(
                "crack footprint at ({:.3}, {:.3}) leaves the surface",
                p[0], p[1]
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep_color = 1.0 - spec.darkening;
    let mut points = Vec::with_capacity(cloud.len());
    let mut carved = 0usize;
    for p in cloud.points() {
        let (d, width) = spec.locate(p.x as f64, p.y as f64);
        let half = width / 2.0;
        if d > half {
            points.push(*p);
            continue;
        }
        if rng.random::<f64>() >= spec.retain {
            continue;
        }
        let mut q = *p;
        q.z = (p.z as f64 - spec.depth * depth_profile(d / half)) as f32;
        q.r = (p.r as f64 * keep_color).round() as u8;
        q.g = (p.g as f64 * keep_color).round() as u8;
        q.b = (p.b as f64 * keep_color).round() as u8;
        q.intensity = (p.intensity as f64 * keep_color) as f32;
        q.label = 1;
        q.instance = instance;
        carved += 1;
        points.push(q);
    }
    let record = CrackRecord {
        surface: cloud.tag.clone(),
        instance,
        min_width: spec.widths.iter().copied().fold(f64::INFINITY, f64::min),
        mean_width: spec.mean_width(),
        max_width: spec.widths.iter().copied().fold(0.0, f64::max),
        length: spec.length(),
        points: carved,
    };
    Ok((PointCloud::new(cloud.tag.clone(), points), record))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    /// Surface tags are `{prefix}-{index:03}`.
    pub prefix: String,
    pub surfaces: usize,
    pub cracks_per_surface: usize,
    /// Template for every surface; tag and seed are replaced.
    pub surface: SurfaceSpec,
    /// Each crack's maximum width is log-uniform in this range; the
    /// narrowest waypoint is never below the lower bound.
    pub width_range: [f64; 2],
    pub length_range: [f64; 2],
    /// Crack depth as a multiple of its maximum width, capped by
    /// `max_depth`.
    pub depth_ratio: f64,
    pub max_depth: f64,
    pub darkening_range: [f64; 2],
    pub retain: f64,
    /// Minimum gap between crack centerlines, meters. Cracks keep half of
    /// it (at least the widest crack width) from the surface edge.
    pub separation: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            prefix: "synth".into(),
            surfaces: 5,
            cracks_per_surface: 6,
            surface: SurfaceSpec::default(),
            width_range: [0.005, 0.10],
            length_range: [0.4, 0.9],
            depth_ratio: 0.8,
            max_depth: 0.06,
            darkening_range: [0.3, 0.6],
            retain: 0.7,
            separation: 0.4,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.surface.validate()?;
        let range_ok = |r: [f64; 2]| r[0].is_finite() && r[0] > 0.0 && r[1] >= r[0];
        if !range_ok(self.width_range) || !range_ok(self.length_range) {
            return Err(Error::Config("width and length ranges must be positive and ordered".into()));
        }
        let [d0, d1] = self.darkening_range;
        if !(0.0 <= d0 && d0 <= d1 && d1 <= 1.0) {
            return Err(Error::Config("darkening range must lie in [0,1]".into()));
        }
        if !(self.retain > 0.0 && self.retain <= 1.0) || self.depth_ratio < 0.0 || self.max_depth < 0.0 || self.separation < 0.0 {
            return Err(Error::Config("retain must be in (0,1]; depth and separation non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub clouds: Vec<PointCloud>,
    pub manifest: Vec<CrackRecord>,
}

impl Dataset {
    /// Fraction of all points that belong to a crack.
    pub fn crack_fraction(&self) -> f64 {
        let total: usize = self.clouds.iter().map(|c| c.len()).sum();
        let cracks: usize = self.clouds.iter().map(|c| c.crack_count()).sum();
        if total == 0 {
            0.0
        } else {
            cracks as f64 / total as f64
        }
    }

    /// Maximum width per crack instance, keyed by surface tag.
    pub fn max_widths(&self) -> HashMap<String, HashMap<u32, f64>> {
        max_widths(&self.manifest)
    }
}

pub fn max_widths(manifest: &[CrackRecord]) -> HashMap<String, HashMap<u32, f64>> {
    let mut out: HashMap<String, HashMap<u32, f64>> = HashMap::new();
    for r in manifest {
        out.entry(r.surface.clone())
            .or_default()
            .insert(r.instance as u32, r.max_width);
    }
    out
}

/// Generates every surface in parallel; each is fully determined by the
/// dataset seed and its index.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let results: Vec<Result<(PointCloud, Vec<CrackRecord>)>> = (0..spec.surfaces)
        .into_par_iter()
        .map(|i| generate_one(spec, i))
        .collect();
    let mut clouds = Vec::with_capacity(spec.surfaces);
    let mut manifest = Vec::new();
    for r in results {
        let (c, m) = r?;
        clouds.push(c);
        manifest.extend(m);
    }
    Ok(Dataset { clouds, manifest })
}

fn generate_one(spec: &DatasetSpec, index: usize) -> Result<(PointCloud, Vec<CrackRecord>)> {
    let seed = derive_seed(spec.seed, index as u64);
    let surface = SurfaceSpec {
        tag: format!("{}-{index:03}", spec.prefix),
        seed,
        ..spec.surface.clone()
    };
    let mut cloud = generate_surface(&surface)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xC0FFEE));
    let mut placed: Vec<CrackSpec> = Vec::new();
    let mut records = Vec::new();
    for k in 0..spec.cracks_per_surface {
        let crack = place_crack(spec, &placed, &mut rng).ok_or_else(|| {
            Error::Geometry(format!(
                "could not place crack {} of {} on {} with separation {} m",
                k + 1,
                spec.cracks_per_surface,
                surface.tag,
                spec.separation
            ))
        })?;
        let (carved, record) = carve_crack(&cloud, &crack, k as i32 + 1, derive_seed(seed, 1000 + k as u64))?;
        cloud = carved;
        records.push(record);
        placed.push(crack);
    }
    Ok((cloud, records))
}

const WAYPOINTS: usize = 5;

/// Draws a meandering crack that keeps `separation` from the surface edge
/// and from every crack already placed.
fn place_crack(spec: &DatasetSpec, placed: &[CrackSpec], rng: &mut ChaCha8Rng) -> Option<CrackSpec> {
    let [ex, ey] = spec.surface.extent;
    let margin = (0.5 * spec.separation).max(spec.width_range[1]);
    let [w0, w1] = spec.width_range;
    let [d0, d1] = spec.darkening_range;
    for _ in 0..500 {
        let length = rng.random_range(spec.length_range[0]..=spec.length_range[1]);
        let max_width = (w0.ln() + rng.random::<f64>() * (w1.ln() - w0.ln())).exp();
        let step = length / (WAYPOINTS - 1) as f64;
        let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
        let mut p = [rng.random_range(margin..ex - margin), rng.random_range(margin..ey - margin), 0.0];
        let mut path = vec![p];
        for _ in 1..WAYPOINTS {
            heading += rng.random_range(-0.4..0.4);
            p = [p[0] + step * heading.cos(), p[1] + step * heading.sin(), 0.0];
            path.push(p);
        }
        let inside = path
            .iter()
            .all(|q| q[0] >= margin && q[0] <= ex - margin && q[1] >= margin && q[1] <= ey - margin);
        if !inside {
            continue;
        }
        let clear = placed.iter().all(|other| polyline_gap(&path, &other.path) >= spec.separation);
        if !clear {
            continue;
        }
        // Widest at one interior waypoint, tapering towards both ends.
        let peak = rng.random_range(1..WAYPOINTS - 1);
        let widths = (0..WAYPOINTS)
            .map(|i| {
                if i == peak {
                    max_width
                } else {
                    (max_width * rng.random_range(0.4..1.0)).max(w0).min(max_width)
                }
            })
            .collect();
        return Some(CrackSpec {
            path,
            widths,
            depth: (spec.depth_ratio * max_width).min(spec.max_depth),
            darkening: rng.random_range(d0..=d1),
            retain: spec.retain,
        });
    }
    None
}

fn segment_gap(a: [f64; 3], b: [f64; 3], c: [f64; 3], d: [f64; 3]) -> f64 {
    let point_seg = |p: [f64; 3], s: [f64; 3], e: [f64; 3]| {
        let (dx, dy) = (e[0] - s[0], e[1] - s[1]);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((p[0] - s[0]) * dx + (p[1] - s[1]) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        dist2d(p, [s[0] + t * dx, s[1] + t * dy, 0.0])
    };
    let cross = |o: [f64; 3], p: [f64; 3], q: [f64; 3]| (p[0] - o[0]) * (q[1] - o[1]) - (p[1] - o[1]) * (q[0] - o[0]);
    let intersect = cross(a, b, c) * cross(a, b, d) < 0.0 && cross(c, d, a) * cross(c, d, b) < 0.0;
    if intersect {
        return 0.0;
    }
    point_seg(a, c, d)
        .min(point_seg(b, c, d))
        .min(point_seg(c, a, b))
        .min(point_seg(d, a, b))
}

fn polyline_gap(p: &[[f64; 3]], q: &[[f64; 3]]) -> f64 {
    let mut best = f64::INFINITY;
    for s in p.windows(2) {
        for t in q.windows(2) {
            best = best.min(segment_gap(s[0], s[1], t[0], t[1]));
        }
    }
    best
}

pub const MANIFEST_HEADER: &str = "crack_id\tsurface\tmin_width_m\tmean_width_m\tmax_width_m\tlength_m\tpoints";

pub fn format_manifest(records: &[CrackRecord]) -> String {
    let mut out = format!("{MANIFEST_HEADER}\n");
    for r in records {
        let _ = writeln!(
            out,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
            r.instance, r.surface, r.min_width, r.mean_width, r.max_width, r.length, r.points
        );
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<CrackRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Config(format!("malformed crack manifest line {}: {line}", i + 1));
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        out.push(CrackRecord {
            instance: f[0].parse().map_err(|_| bad())?,
            surface: f[1].to_string(),
            min_width: num(f[2])?,
            mean_width: num(f[3])?,
            max_width: num(f[4])?,
            length: num(f[5])?,
            points: f[6].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}
