//! The six subcommands. Each one reads its inputs from the run directory
//! (or from explicit paths), builds its outputs in a sibling `.partial`
//! directory and renames it into place only once everything is written.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use crackscan_core::dataset::{
    format_split_manifest, split_by_crack, DatasetStats, NormalizationStats, NEGATIVE_BAND,
};
use crackscan_core::pipeline::{
    cut_windows, evaluate_layers, format_windows, normalize_windows, parse_windows, score_clouds,
    tune_clustering, WindowConfig,
};
use crackscan_core::scorer::{focal_sweep_grid, EpochRecord};
use crackscan_core::synthgen::{format_manifest, generate_dataset, max_widths, parse_manifest};
use crackscan_core::voxelizer::derive_seed;
use crackscan_core::{
    cloud_io, format_instances, init_model, instances_from_layer, read_cloud, read_ply, threshold_sweep, train,
    validate_config, write_cloud, AnnotationLayer, MetricsReport, PointCloud, ScorerModel, TrainingHistory,
};

use crate::config::{ConfigError, PipelineConfig};

// Stream ids for the per-stage seeds.
const SPLIT_STREAM: u64 = 1;
const TRAIN_WINDOWS_STREAM: u64 = 2;
const VAL_WINDOWS_STREAM: u64 = 3;
const TEST_WINDOWS_STREAM: u64 = 4;
const INIT_STREAM: u64 = 5;
const DETECT_STREAM: u64 = 6;

/// Builds `dir` through a `.partial` sibling so a failed command leaves no
/// half-written stage behind.
fn write_stage(dir: &Path, build: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = dir
        .file_name()
        .with_context(|| format!("bad output directory {}", dir.display()))?;
    let tmp = dir.with_file_name(format!("{}.partial", name.to_string_lossy()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).with_context(|| format!("removing {}", tmp.display()))?;
    }
    fs::create_dir_all(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    if let Err(e) = build(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if dir.exists() {
        fs::remove_dir_all(dir).with_context(|| format!("replacing {}", dir.display()))?;
    }
    fs::rename(&tmp, dir).with_context(|| format!("moving {} into place", dir.display()))?;
    log::info!("wrote {}", dir.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Expands comma-separated glob patterns. Matches of each pattern are
/// sorted lexicographically; patterns keep their order.
pub fn expand_inputs(patterns: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for pat in patterns.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let mut hits: Vec<PathBuf> = glob::glob(pat)
            .map_err(|e| ConfigError::BadValue {
                key: "input".into(),
                message: format!("{pat}: {e}"),
            })?
            .collect::<Result<_, _>>()
            .with_context(|| format!("expanding {pat}"))?;
        hits.sort();
        out.extend(hits);
    }
    if out.is_empty() {
        bail!("no input clouds match `{patterns}`");
    }
    Ok(out)
}

fn ply_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let pattern = dir.join("*.ply");
    expand_inputs(&pattern.to_string_lossy())
        .with_context(|| format!("no clouds in {} (run the earlier stage first)", dir.display()))
}

fn read_clouds(paths: &[PathBuf]) -> Result<Vec<PointCloud>> {
    paths
        .iter()
        .map(|p| read_cloud(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

fn input_clouds(config: &PipelineConfig) -> Result<Vec<PointCloud>> {
    let paths = if config.input.is_empty() {
        ply_files(&config.stage_dir("synth"))?
    } else {
        expand_inputs(&config.input)?
    };
    read_clouds(&paths)
}

fn split_clouds(config: &PipelineConfig, split: &str) -> Result<Vec<PointCloud>> {
    if split == "input" {
        input_clouds(config)
    } else {
        read_clouds(&ply_files(&config.stage_dir("prepare").join(split))?)
    }
}

fn check_config(config: &PipelineConfig) -> Result<()> {
    let violations = validate_config(&config.voxel(), &config.clustering(), &config.matching());
    if !violations.is_empty() {
        let text: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(ConfigError::Invalid(text.join("; ")).into());
    }
    config.ply_format()?;
    config.split_name()?;
    Ok(())
}

fn voxel_header(config: &PipelineConfig) -> String {
    format!("d = {}\nn = {}\ns = {}\n", config.d, config.n, config.s)
}

pub fn synth(config: &PipelineConfig) -> Result<()> {
    check_config(config)?;
    let spec = config.dataset();
    spec.validate()?;
    let dataset = generate_dataset(&spec)?;
    log::info!(
        "{} surfaces, {} cracks, crack fraction {:.4}",
        dataset.clouds.len(),
        dataset.manifest.len(),
        dataset.crack_fraction()
    );
    let format = config.ply_format()?;
    write_stage(&config.stage_dir("synth"), |dir| {
        for cloud in &dataset.clouds {
            write_cloud(cloud, None, dir.join(format!("{}.ply", cloud.tag)), format)?;
        }
        write_text(&dir.join("cracks.tsv"), &format_manifest(&dataset.manifest))
    })
}

pub fn prepare(config: &PipelineConfig) -> Result<()> {
    check_config(config)?;
    let clouds = input_clouds(config)?;
    let split = split_by_crack(&clouds, derive_seed(config.seed, SPLIT_STREAM), NEGATIVE_BAND)?;
    let format = config.ply_format()?;

    let train_cfg = config.windows();
    let val_cfg = WindowConfig {
        augment_copies: 0,
        ..train_cfg
    };
    let test_cfg = WindowConfig {
        voxel: config.voxel().without_overlap(),
        ..val_cfg
    };
    let sets = [
        ("train", &split.train, train_cfg, TRAIN_WINDOWS_STREAM),
        ("val", &split.validation, val_cfg, VAL_WINDOWS_STREAM),
        ("test", &split.test, test_cfg, TEST_WINDOWS_STREAM),
    ];
    let windows: Vec<String> = sets
        .iter()
        .map(|(name, clouds, cfg, stream)| {
            let w = cut_windows(clouds, cfg, derive_seed(config.seed, *stream));
            log::info!("{name}: {} clouds, {} windows", clouds.len(), w.len());
            format_windows(clouds, &w)
        })
        .collect();

    write_stage(&config.stage_dir("prepare"), |dir| {
        for ((name, clouds, _, _), text) in sets.iter().zip(&windows) {
            let sub = dir.join(name);
            fs::create_dir_all(&sub).with_context(|| format!("creating {}", sub.display()))?;
            for cloud in clouds.iter() {
                write_cloud(cloud, None, sub.join(format!("{}.ply", cloud.tag)), format)?;
            }
            write_text(&dir.join(format!("windows-{name}.tsv")), text)?;
        }
        write_text(&dir.join("split.tsv"), &format_split_manifest(&split.manifest))?;
        write_text(&dir.join("voxels.conf"), &voxel_header(config))
    })
}

fn history_summary(history: &TrainingHistory) -> Option<&EpochRecord> {
    history.epochs.iter().find(|e| e.epoch == history.best_epoch)
}

pub fn train_cmd(config: &PipelineConfig) -> Result<()> {
    check_config(config)?;
    let prep = config.stage_dir("prepare");
    let header = read_text(&prep.join("voxels.conf"))?;
    if header != voxel_header(config) {
        return Err(ConfigError::Invalid(format!(
            "voxel settings differ from the prepared windows:\n{header}"
        ))
        .into());
    }
    let train_clouds = read_clouds(&ply_files(&prep.join("train"))?)?;
    let val_clouds = read_clouds(&ply_files(&prep.join("val"))?)?;
    let stats = NormalizationStats::from_clouds(&train_clouds, config.d);
    let mask = config.mask();
    let load = |clouds: &[PointCloud], name: &str| -> Result<_> {
        let text = read_text(&prep.join(format!("windows-{name}.tsv")))?;
        Ok(normalize_windows(clouds, &parse_windows(&text, clouds)?, &stats, mask)?)
    };
    let train_set = load(&train_clouds, "train")?;
    let val_set = load(&val_clouds, "val")?;
    let class_stats = DatasetStats::from_labels(train_set.iter().flat_map(|v| v.labels.iter()));
    log::info!(
        "{} training and {} validation windows, crack prior {:.5}",
        train_set.len(),
        val_set.len(),
        class_stats.prior()
    );

    let base = config.training();
    base.validate()?;
    let fit = |gamma: f64, alpha: f64| -> Result<(ScorerModel, TrainingHistory)> {
        let tc = crackscan_core::TrainingConfig { gamma, alpha, ..base.clone() };
        let init = init_model(&tc, class_stats, stats.clone(), mask, derive_seed(config.seed, INIT_STREAM))?;
        Ok(train(&init, &train_set, &val_set, &tc)?)
    };

    if !config.sweep {
        let (model, history) = fit(base.gamma, base.alpha)?;
        if let Some(best) = history_summary(&history) {
            log::info!("best epoch {} with validation F1 {:.4}", best.epoch, best.f1);
        }
        return write_stage(&config.stage_dir("train"), |dir| {
            model.save(dir.join("model.bin"))?;
            write_text(&dir.join("history.tsv"), &history.to_tsv())
        });
    }

    let mut cells = Vec::new();
    for (gamma, alpha) in focal_sweep_grid() {
        log::info!("sweep cell gamma={gamma} focal_alpha={alpha}");
        let (model, history) = fit(gamma, alpha)?;
        cells.push((gamma, alpha, model, history));
    }
    let f1 = |h: &TrainingHistory| history_summary(h).map_or(0.0, |e| e.f1);
    let mut best = 0;
    for (i, cell) in cells.iter().enumerate() {
        if f1(&cell.3) > f1(&cells[best].3) {
            best = i;
        }
    }
    write_stage(&config.stage_dir("train"), |dir| {
        let mut table = String::from("gamma\tfocal_alpha\tbest_epoch\tprecision\trecall\tf1\n");
        for (gamma, alpha, model, history) in &cells {
            let cell = dir.join("sweep").join(format!("g{gamma}_a{alpha}"));
            fs::create_dir_all(&cell).with_context(|| format!("creating {}", cell.display()))?;
            model.save(cell.join("model.bin"))?;
            write_text(&cell.join("history.tsv"), &history.to_tsv())?;
            let e = history_summary(history);
            let _ = writeln!(
                table,
                "{gamma}\t{alpha}\t{}\t{:.6}\t{:.6}\t{:.6}",
                history.best_epoch,
                e.map_or(0.0, |e| e.precision),
                e.map_or(0.0, |e| e.recall),
                e.map_or(0.0, |e| e.f1)
            );
        }
        write_text(&dir.join("sweep.tsv"), &table)?;
        let (gamma, alpha, model, history) = &cells[best];
        log::info!("best sweep cell gamma={gamma} focal_alpha={alpha}");
        model.save(dir.join("model.bin"))?;
        write_text(&dir.join("history.tsv"), &history.to_tsv())
    })
}

pub fn detect(config: &PipelineConfig) -> Result<()> {
    check_config(config)?;
    let split = config.split_name()?;
    let clouds = split_clouds(config, split)?;
    let model_path = config.model_path();
    let model = ScorerModel::load(&model_path).with_context(|| format!("loading {}", model_path.display()))?;
    // Validation clouds are thin bands that rarely fill a non-overlapping
    // window, so they keep the training stride.
    let voxel = if split == "val" {
        config.voxel()
    } else {
        config.voxel().without_overlap()
    };
    let layers = score_clouds(&clouds, &model, &voxel, derive_seed(config.seed, DETECT_STREAM))?;
    let clustering = config.clustering();
    let format = config.ply_format()?;
    write_stage(&config.stage_dir("detect").join(split), |dir| {
        let mut summary = String::from("cloud\tpoints\tscored\tinstances\n");
        for (cloud, layer) in clouds.iter().zip(layers) {
            let mut layer = layer;
            let instances = instances_from_layer(cloud, &mut layer, &clustering);
            let scored = layer.classified.iter().filter(|&&c| c).count();
            let _ = writeln!(summary, "{}\t{}\t{scored}\t{}", cloud.tag, cloud.len(), instances.len());
            write_cloud(cloud, Some(&layer), dir.join(format!("{}.ply", cloud.tag)), format)?;
            write_text(&dir.join(format!("{}.instances.tsv", cloud.tag)), &format_instances(&instances))?;
        }
        write_text(&dir.join("summary.tsv"), &summary)
    })
}

fn detected_layers(config: &PipelineConfig, split: &str) -> Result<(Vec<PointCloud>, Vec<AnnotationLayer>)> {
    let dir = config.stage_dir("detect").join(split);
    let mut clouds = Vec::new();
    let mut layers = Vec::new();
    for path in ply_files(&dir)? {
        let contents = read_ply(&path).with_context(|| format!("reading {}", path.display()))?;
        let layer = contents
            .annotations
            .with_context(|| format!("{} has no confidence annotations", path.display()))?;
        clouds.push(contents.cloud);
        layers.push(layer);
    }
    Ok((clouds, layers))
}

pub fn evaluate(config: &PipelineConfig) -> Result<()> {
    check_config(config)?;
    let split = config.split_name()?;
    let (clouds, layers) = detected_layers(config, split)?;
    let widths: Option<HashMap<String, HashMap<u32, f64>>> = match config.manifest_path() {
        Some(p) => Some(max_widths(&parse_manifest(&read_text(&p)?)?)),
        None => None,
    };
    let alpha = config.match_alpha;

    let mut clustering = config.clustering();
    let mut tuned = None;
    if config.tune {
        let (val_clouds, val_layers) =
            detected_layers(config, "val").context("tuning needs the detected validation split")?;
        let (best, report) = tune_clustering(
            &val_clouds,
            &val_layers,
            &config.tune_delta_h,
            &config.tune_delta_r,
            &config.tune_delta_n,
            alpha,
        )?;
        log::info!("tuned on validation:\n{}", report.to_text());
        clustering = best;
        tuned = Some(format!(
            "# thresholds tuned on the validation split\ndelta_h = {}\ndelta_r = {}\ndelta_n = {}\n",
            best.confidence_threshold, best.link_distance, best.min_cluster_size
        ));
    }

    let report = evaluate_layers(&clouds, &layers, &clustering, alpha, widths.as_ref())?;
    let mut table = vec![MetricsReport::CSV_HEADER.to_string()];
    for &h in &config.compare_delta_h {
        let c = crackscan_core::ClusteringConfig {
            confidence_threshold: h,
            ..clustering
        };
        table.push(evaluate_layers(&clouds, &layers, &c, alpha, widths.as_ref())?.csv_row());
    }

    let truths: Vec<Vec<u8>> = clouds.iter().map(|c| c.labels()).collect();
    let pairs: Vec<(&AnnotationLayer, &[u8])> = layers.iter().zip(&truths).map(|(l, t)| (l, t.as_slice())).collect();
    let sweep = threshold_sweep(&pairs, &config.sweep_thresholds)?;
    let mut sweep_csv = String::from("delta_h,tp,fp,tn,fn,precision,recall,specificity\n");
    for p in &sweep {
        let s = p.scores();
        let c = p.confusion;
        let _ = writeln!(
            sweep_csv,
            "{},{},{},{},{},{:.6},{:.6},{:.6}",
            p.delta_h, c.tp, c.fp, c.tn, c.fn_, s.precision, s.recall, s.specificity
        );
    }

    let mut sizes = String::from("cloud\tcrack\tpoints\tmax_width_m\tdetected\n");
    for r in &report.sizes {
        let w = r.max_width.map(|w| format!("{w:.4}")).unwrap_or_default();
        let _ = writeln!(sizes, "{}\t{}\t{}\t{w}\t{}", r.cloud, r.id, r.points, r.detected as u8);
    }

    log::info!("{split} metrics:\n{}", report.to_text());
    write_stage(&config.stage_dir("evaluate").join(split), |dir| {
        write_text(&dir.join("metrics.txt"), &report.to_text())?;
        write_text(
            &dir.join("metrics.csv"),
            &format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row()),
        )?;
        write_text(&dir.join("delta_h_table.csv"), &(table.join("\n") + "\n"))?;
        write_text(&dir.join("sweep.csv"), &sweep_csv)?;
        write_text(&dir.join("sizes.tsv"), &sizes)?;
        if let Some(t) = &tuned {
            write_text(&dir.join("tuned.conf"), t)?;
        }
        Ok(())
    })
}

pub fn export_viz(config: &PipelineConfig) -> Result<()> {
    check_config(config)?;
    let split = config.split_name()?;
    let (clouds, layers) = detected_layers(config, split)?;
    let clustering = config.clustering();
    let format = config.ply_format()?;
    write_stage(&config.stage_dir("viz").join(split), |dir| {
        for (cloud, mut layer) in clouds.into_iter().zip(layers) {
            instances_from_layer(&cloud, &mut layer, &clustering);
            let colored = cloud_io::classification_colors(&cloud, &layer.predicted)?;
            write_cloud(&colored, Some(&layer), dir.join(format!("{}.ply", cloud.tag)), format)?;
        }
        Ok(())
    })
}
