//! Multi-cloud glue shared by the command line and the test suites:
//! building training windows, scoring whole sets, evaluating and tuning
//! the post-processing thresholds.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;

use crate::cloud_io::AnnotationLayer;
use crate::dataset::{normalize_voxel, translate, translate_augment, FeatureMask, NormalizationStats, NormalizedVoxel};
use crate::error::{Error, Result};
use crate::instancer::{instances_from_layer, real_instances, score_cloud};
use crate::metrics::{CloudResult, MetricsReport};
use crate::model::{ClusteringConfig, PointCloud, VoxelizationConfig};
use crate::scorer::ScorerModel;
use crate::voxelizer::{build_grid_anchored, derive_seed, filter_and_fill, Voxel};

/// How training windows are cut.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    pub voxel: VoxelizationConfig,
    /// Translated copies per cloud in addition to the original.
    pub augment_copies: usize,
    /// Largest translation, meters.
    pub max_offset: f64,
}

/// A window cut from `clouds[cloud]` translated by `offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub cloud: usize,
    pub offset: [f64; 3],
    pub voxel: Voxel,
}

/// Windows of every cloud and of its translated copies. Copies are cut on
/// the original cloud's lattice so a translation shifts the content
/// relative to the windows. A window with exactly the same members as an
/// earlier window of the same copy is skipped.
pub fn cut_windows(clouds: &[PointCloud], config: &WindowConfig, seed: u64) -> Vec<Window> {
    let per_cloud: Vec<Vec<Window>> = clouds
        .par_iter()
        .enumerate()
        .map(|(ci, cloud)| {
            let Some((anchor, _)) = cloud.bounds() else {
                return Vec::new();
            };
            let cloud_seed = derive_seed(seed, ci as u64);
            let mut variants = vec![(cloud.clone(), [0.0; 3])];
            variants.extend(translate_augment(
                cloud,
                config.augment_copies,
                config.max_offset,
                cloud_seed,
            ));
            let mut out = Vec::new();
            for (k, (variant, offset)) in variants.iter().enumerate() {
                let voxels = filter_and_fill(
                    build_grid_anchored(variant, &config.voxel, anchor),
                    variant,
                    config.voxel.n,
                    derive_seed(cloud_seed, k as u64 + 1),
                );
                let mut seen = HashSet::new();
                for voxel in voxels {
                    if seen.insert(voxel.members.clone()) {
                        out.push(Window {
                            cloud: ci,
                            offset: *offset,
                            voxel,
                        });
                    }
                }
            }
            out
        })
        .collect();
    per_cloud.into_iter().flatten().collect()
}

/// Normalizes windows against their (translated) source clouds.
pub fn normalize_windows(
    clouds: &[PointCloud],
    windows: &[Window],
    stats: &NormalizationStats,
    mask: FeatureMask,
) -> Result<Vec<NormalizedVoxel>> {
    let mut copies: HashMap<(usize, [u64; 3]), PointCloud> = HashMap::new();
    for w in windows {
        let cloud = clouds
            .get(w.cloud)
            .ok_or_else(|| Error::Contract(format!("window refers to missing cloud {}", w.cloud)))?;
        if let Some(&bad) = w.voxel.members.iter().find(|&&m| m as usize >= cloud.len()) {
            return Err(Error::Integrity(bad));
        }
        copies
            .entry((w.cloud, w.offset.map(f64::to_bits)))
            .or_insert_with(|| translate(cloud, w.offset, cloud.tag.clone()));
    }
    Ok(windows
        .par_iter()
        .map(|w| {
            let cloud = &copies[&(w.cloud, w.offset.map(f64::to_bits))];
            normalize_voxel(&w.voxel, cloud, stats, mask)
        })
        .collect())
}

/// [`cut_windows`] followed by [`normalize_windows`].
pub fn training_windows(
    clouds: &[PointCloud],
    config: &WindowConfig,
    stats: &NormalizationStats,
    mask: FeatureMask,
    seed: u64,
) -> Vec<NormalizedVoxel> {
    normalize_windows(clouds, &cut_windows(clouds, config, seed), stats, mask)
        .expect("windows were cut from these clouds")
}

/// One line per window: cloud tag, offset, lattice index, origin and the
/// comma-separated member ids.
pub fn format_windows(clouds: &[PointCloud], windows: &[Window]) -> String {
    let mut out = String::from("# cloud\tdx\tdy\tdz\ti\tj\tk\tox\toy\toz\tmembers\n");
    for w in windows {
        let v = &w.voxel;
        let members: Vec<String> = v.members.iter().map(|m| m.to_string()).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            clouds[w.cloud].tag,
            w.offset[0],
            w.offset[1],
            w.offset[2],
            v.index[0],
            v.index[1],
            v.index[2],
            v.origin[0],
            v.origin[1],
            v.origin[2],
            members.join(",")
        ));
    }
    out
}

pub fn parse_windows(text: &str, clouds: &[PointCloud]) -> Result<Vec<Window>> {
    let by_tag: HashMap<&str, usize> = clouds.iter().enumerate().map(|(i, c)| (c.tag.as_str(), i)).collect();
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::Config(format!("window list line {}: {what}", ln + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 11 {
            return Err(bad("expected 11 tab-separated fields"));
        }
        let cloud = *by_tag.get(f[0]).ok_or_else(|| bad("unknown cloud tag"))?;
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        let int = |s: &str| s.parse::<i64>().map_err(|_| bad("bad index"));
        let members = f[10]
            .split(',')
            .map(|m| m.parse::<u32>().map_err(|_| bad("bad member id")))
            .collect::<Result<Vec<_>>>()?;
        out.push(Window {
            cloud,
            offset: [num(f[1])?, num(f[2])?, num(f[3])?],
            voxel: Voxel {
                index: [int(f[4])?, int(f[5])?, int(f[6])?],
                origin: [num(f[7])?, num(f[8])?, num(f[9])?],
                members,
                source: clouds[cloud].tag.clone(),
            },
        });
    }
    Ok(out)
}

/// Scores each cloud with its own derived seed.
pub fn score_clouds(
    clouds: &[PointCloud],
    model: &ScorerModel,
    voxel: &VoxelizationConfig,
    seed: u64,
) -> Result<Vec<AnnotationLayer>> {
    clouds
        .iter()
        .enumerate()
        .map(|(i, c)| score_cloud(c, model, voxel, derive_seed(seed, i as u64)))
        .collect()
}

/// Post-processes scored layers with `clustering` and evaluates them
/// against the clouds' labels. Ground-truth instances come from
/// [`real_instances`] with the same link distance. `widths` maps a cloud
/// tag to the analytic maximum width of each of its cracks.
pub fn evaluate_layers(
    clouds: &[PointCloud],
    layers: &[AnnotationLayer],
    clustering: &ClusteringConfig,
    alpha: f64,
    widths: Option<&HashMap<String, HashMap<u32, f64>>>,
) -> Result<MetricsReport> {
    let mut report = MetricsReport::new(
        clustering.confidence_threshold,
        clustering.link_distance,
        clustering.min_cluster_size,
    );
    for (cloud, layer) in clouds.iter().zip(layers) {
        let mut layer = layer.clone();
        let predicted = instances_from_layer(cloud, &mut layer, clustering);
        let real = real_instances(cloud, clustering.link_distance);
        let truth = cloud.labels();
        report.add_cloud(
            &CloudResult {
                tag: &cloud.tag,
                predicted_labels: &layer.predicted,
                truth: &truth,
                predicted: &predicted,
                real: &real,
                widths: widths.and_then(|w| w.get(surface_of(&cloud.tag))),
            },
            alpha,
        )?;
    }
    Ok(report)
}

/// Surface tag of a split cloud (`{surface}-train`, `-val`, `-test`).
pub fn surface_of(tag: &str) -> &str {
    for suffix in ["-train", "-val", "-test"] {
        if let Some(s) = tag.strip_suffix(suffix) {
            return s;
        }
    }
    tag
}

/// Score used to rank threshold settings: the mean of detection rate,
/// continuity and crack precision, an undefined value counting as 0.
pub fn tuning_score(report: &MetricsReport) -> f64 {
    (report.cr_det().unwrap_or(0.0) + report.cr_con().unwrap_or(0.0) + report.cr_pre().unwrap_or(0.0)) / 3.0
}

/// Evaluates every combination and returns the best by [`tuning_score`].
/// Ties go to the most permissive setting: smallest Δ_n, then largest
/// Δ_r, then smallest Δ_H.
pub fn tune_clustering(
    clouds: &[PointCloud],
    layers: &[AnnotationLayer],
    thresholds: &[f64],
    link_distances: &[f64],
    min_sizes: &[usize],
    alpha: f64,
) -> Result<(ClusteringConfig, MetricsReport)> {
    let mut grid = Vec::new();
    for &h in thresholds {
        for &r in link_distances {
            for &n in min_sizes {
                grid.push(ClusteringConfig {
                    confidence_threshold: h,
                    link_distance: r,
                    min_cluster_size: n,
                });
            }
        }
    }
    grid.sort_by(|a, b| {
        a.min_cluster_size
            .cmp(&b.min_cluster_size)
            .then(b.link_distance.total_cmp(&a.link_distance))
            .then(a.confidence_threshold.total_cmp(&b.confidence_threshold))
    });
    let reports: Vec<Result<MetricsReport>> = grid
        .par_iter()
        .map(|c| evaluate_layers(clouds, layers, c, alpha, None))
        .collect();
    let mut best: Option<(f64, ClusteringConfig, MetricsReport)> = None;
    for (cfg, rep) in grid.into_iter().zip(reports) {
        let rep = rep?;
        let s = tuning_score(&rep);
        log::debug!(
            "delta_h {} delta_r {} delta_n {} -> {s:.4}",
            cfg.confidence_threshold,
            cfg.link_distance,
            cfg.min_cluster_size
        );
        if best.as_ref().is_none_or(|b| s > b.0) {
            best = Some((s, cfg, rep));
        }
    }
    let (_, cfg, rep) = best.expect("empty tuning grid");
    Ok((cfg, rep))
}

#[cfg(test)]
mod tests {
    use super::*;

    use crate::model::LabeledPoint;

    fn grid_cloud(tag: &str) -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..40 {
            for j in 0..40 {
                let mut p = LabeledPoint::new(i as f32 * 0.025, j as f32 * 0.025, ((i * j) % 7) as f32 * 0.002);
                p.r = (i * 5) as u8;
                p.label = (i == 20) as u8;
                pts.push(p);
            }
        }
        PointCloud::new(tag, pts)
    }

    #[test]
    fn windows_round_trip_through_text() {
        let clouds = vec![grid_cloud("a"), grid_cloud("b")];
        let cfg = WindowConfig {
            voxel: VoxelizationConfig { d: 0.5, n: 64, s: 0.25 },
            augment_copies: 2,
            max_offset: 0.25,
        };
        let windows = cut_windows(&clouds, &cfg, 3);
        assert!(windows.iter().any(|w| w.offset != [0.0; 3]));
        let back = parse_windows(&format_windows(&clouds, &windows), &clouds).unwrap();
        assert_eq!(back, windows.iter().map(|w| Window {
            voxel: Voxel { source: clouds[w.cloud].tag.clone(), ..w.voxel.clone() },
            ..w.clone()
        }).collect::<Vec<_>>());

        let stats = NormalizationStats::from_clouds(&clouds, 0.5);
        let direct = training_windows(&clouds, &cfg, &stats, FeatureMask::ALL, 3);
        assert_eq!(normalize_windows(&clouds, &back, &stats, FeatureMask::ALL).unwrap(), direct);
        assert!(direct.iter().all(|v| v.len() == 64));
    }

    #[test]
    fn split_suffixes_are_stripped() {
        assert_eq!(surface_of("synth-003-test"), "synth-003");
        assert_eq!(surface_of("synth-003-val"), "synth-003");
        assert_eq!(surface_of("plain"), "plain");
    }
}
