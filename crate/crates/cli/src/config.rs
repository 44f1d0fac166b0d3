//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments
//! win, so several files can be layered and command-line flags applied
//! last. [`PipelineConfig::to_text`] writes every key with its doc line and
//! parses back to the same value.

use std::path::{Path, PathBuf};

use crackscan_core::dataset::FeatureMask;
use crackscan_core::pipeline::WindowConfig;
use crackscan_core::synthgen::{DatasetSpec, SurfaceSpec};
use crackscan_core::{ClusteringConfig, MatchConfig, PlyFormat, TrainingConfig, VoxelizationConfig};
use thiserror::Error;

/// Environment variable holding the default run directory.
pub const RUN_DIR_ENV: &str = "CRACKSCAN_RUN_DIR";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {message}")]
    BadValue { key: String, message: String },
    #[error("config line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("{0}")]
    Invalid(String),
}

pub trait Value: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(f64, usize, u64, u32, bool, String);

impl<T: Value> Value for Vec<T> {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|x| T::parse_value(x.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(Value::render).collect::<Vec<_>>().join(",")
    }
}

macro_rules! config_keys {
    ($( #[doc = $doc:literal] $name:ident : $ty:ty = $default:expr, )*) => {
        /// Every setting a command can read. Field names are the config keys
        /// and the `--key` flags.
        #[derive(Debug, Clone, PartialEq)]
        pub struct PipelineConfig {
            $( #[doc = $doc] pub $name: $ty, )*
        }

        impl Default for PipelineConfig {
            fn default() -> Self {
                PipelineConfig { $( $name: $default, )* }
            }
        }

        /// Key names with their one-line descriptions, in file order.
        pub const KEYS: &[(&str, &str)] = &[ $( (stringify!($name), $doc), )* ];

        impl PipelineConfig {
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                let bad = |message: String| ConfigError::BadValue { key: key.to_string(), message };
                match key {
                    $( stringify!($name) => self.$name = <$ty as Value>::parse_value(value.trim()).map_err(bad)?, )*
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( stringify!($name) => Some(self.$name.render()), )*
                    _ => None,
                }
            }
        }
    };
}

config_keys! {
    /// Directory holding every stage's outputs (default: $CRACKSCAN_RUN_DIR, else `run`)
    run_dir: String = String::new(),
    /// Input cloud glob(s), comma-separated (default: the synth stage's clouds)
    input: String = String::new(),
    /// Model file (default: <run_dir>/train/model.bin)
    model: String = String::new(),
    /// Crack manifest with analytic widths (default: <run_dir>/synth/cracks.tsv when present)
    manifest: String = String::new(),
    /// Master seed; every stage derives its own stream from it
    seed: u64 = 0,
    /// PLY encoding for written clouds: binary or ascii
    ply_format: String = "binary".into(),

    /// Number of synthetic surfaces
    surfaces: usize = 5,
    /// Cracks carved into each surface
    cracks_per_surface: usize = 6,
    /// Surface size along x (m)
    extent_x: f64 = 2.0,
    /// Surface size along y (m)
    extent_y: f64 = 2.0,
    /// Surface sampling density (points per m^2)
    density: f64 = 10_000.0,
    /// Height amplitude of the fractal relief (m)
    roughness: f64 = 0.03,
    /// Fractal octaves of the relief
    octaves: u32 = 4,
    /// Lowest relief frequency (cycles per m)
    base_frequency: f64 = 1.0,
    /// Amplitude ratio between successive octaves
    gain: f64 = 0.5,
    /// Smallest maximum crack width (m)
    width_min: f64 = 0.005,
    /// Largest maximum crack width (m)
    width_max: f64 = 0.10,
    /// Shortest crack (m)
    length_min: f64 = 0.4,
    /// Longest crack (m)
    length_max: f64 = 0.9,
    /// Fraction of crack-footprint points kept
    retain: f64 = 0.7,
    /// Minimum distance between crack centerlines (m)
    separation: f64 = 0.4,

    /// Voxel edge d (m)
    d: f64 = 0.5,
    /// Points per voxel n
    n: usize = 2048,
    /// Training and validation stride s (m); test and input clouds always use s = d
    s: f64 = 0.5,
    /// Translated copies of every training cloud
    augment_copies: usize = 10,
    /// Largest translation of an augmented copy per axis (m)
    max_offset: f64 = 0.5,
    /// Feed RGB to the scorer
    use_rgb: bool = true,
    /// Feed intensity to the scorer
    use_intensity: bool = true,

    /// Focal loss focusing parameter
    gamma: f64 = 4.0,
    /// Focal loss class weight
    focal_alpha: f64 = 0.75,
    /// Training epochs
    epochs: usize = 101,
    /// Initial Adam learning rate
    learning_rate: f64 = 0.01,
    /// Learning-rate multiplier applied every decay_every epochs
    decay_factor: f64 = 0.5,
    /// Epochs between learning-rate decays
    decay_every: usize = 10,
    /// Voxels per Adam step
    batch_size: usize = 5,
    /// Hidden layer widths
    hidden: Vec<usize> = vec![64, 64, 32],
    /// Dropout rate
    dropout: f64 = 0.5,
    /// Jitter training coordinates every epoch
    perturb: bool = true,
    /// Train one model per (gamma, focal_alpha) cell of the sweep grid
    sweep: bool = false,

    /// Confidence threshold delta_h
    delta_h: f64 = 0.59,
    /// Link distance delta_r (m)
    delta_r: f64 = 0.04,
    /// Minimum instance size delta_n (points)
    delta_n: usize = 20,
    /// Fraction of a predicted instance that must overlap a real crack
    match_alpha: f64 = 0.5,

    /// Cloud set for detect, evaluate and export-viz: train, val, test or input
    split: String = "test".into(),
    /// Thresholds of the point-wise sweep
    sweep_thresholds: Vec<f64> = (1..20).map(|k| k as f64 / 20.0).collect(),
    /// Thresholds reported side by side in delta_h_table.csv
    compare_delta_h: Vec<f64> = vec![0.50, 0.59, 0.65],
    /// Tune delta_h, delta_r and delta_n on the detected validation split before evaluating
    tune: bool = false,
    /// delta_h candidates for tuning
    tune_delta_h: Vec<f64> = vec![0.3, 0.4, 0.5, 0.59, 0.7, 0.8],
    /// delta_r candidates for tuning
    tune_delta_r: Vec<f64> = vec![0.03, 0.04, 0.05, 0.08],
    /// delta_n candidates for tuning
    tune_delta_n: Vec<usize> = vec![3, 5, 10, 20],
}

impl PipelineConfig {
    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = PipelineConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Applies a `key=value` assignment.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (k, v) = pair.split_once('=').ok_or(ConfigError::Syntax { line: 1 })?;
        self.set(k.trim(), v)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, doc) in KEYS {
            out.push_str(&format!("# {}\n{key} = {}\n", doc.trim(), self.get(key).unwrap_or_default()));
        }
        out
    }

    pub fn run_dir(&self) -> PathBuf {
        if !self.run_dir.is_empty() {
            return PathBuf::from(&self.run_dir);
        }
        match std::env::var(RUN_DIR_ENV) {
            Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => PathBuf::from("run"),
        }
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.run_dir().join(stage)
    }

    pub fn model_path(&self) -> PathBuf {
        if self.model.is_empty() {
            self.stage_dir("train").join("model.bin")
        } else {
            PathBuf::from(&self.model)
        }
    }

    pub fn manifest_path(&self) -> Option<PathBuf> {
        if !self.manifest.is_empty() {
            return Some(PathBuf::from(&self.manifest));
        }
        let p = self.stage_dir("synth").join("cracks.tsv");
        p.is_file().then_some(p)
    }

    pub fn ply_format(&self) -> Result<PlyFormat, ConfigError> {
        match self.ply_format.as_str() {
            "binary" => Ok(PlyFormat::BinaryLittleEndian),
            "ascii" => Ok(PlyFormat::Ascii),
            other => Err(ConfigError::BadValue {
                key: "ply_format".into(),
                message: format!("expected binary or ascii, got {other}"),
            }),
        }
    }

    pub fn split_name(&self) -> Result<&str, ConfigError> {
        match self.split.as_str() {
            s @ ("train" | "val" | "test" | "input") => Ok(s),
            other => Err(ConfigError::BadValue {
                key: "split".into(),
                message: format!("expected train, val, test or input, got {other}"),
            }),
        }
    }

    pub fn voxel(&self) -> VoxelizationConfig {
        VoxelizationConfig {
            d: self.d,
            n: self.n,
            s: self.s,
        }
    }

    pub fn windows(&self) -> WindowConfig {
        WindowConfig {
            voxel: self.voxel(),
            augment_copies: self.augment_copies,
            max_offset: self.max_offset,
        }
    }

    pub fn clustering(&self) -> ClusteringConfig {
        ClusteringConfig {
            confidence_threshold: self.delta_h,
            link_distance: self.delta_r,
            min_cluster_size: self.delta_n,
        }
    }

    pub fn matching(&self) -> MatchConfig {
        MatchConfig {
            alpha: self.match_alpha,
        }
    }

    pub fn mask(&self) -> FeatureMask {
        FeatureMask {
            rgb: self.use_rgb,
            intensity: self.use_intensity,
        }
    }

    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            gamma: self.gamma,
            alpha: self.focal_alpha,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            decay_factor: self.decay_factor,
            decay_every: self.decay_every,
            batch_size: self.batch_size,
            hidden: self.hidden.clone(),
            dropout: self.dropout,
            perturb: self.perturb,
            seed: self.seed,
            ..TrainingConfig::default()
        }
    }

    pub fn dataset(&self) -> DatasetSpec {
        DatasetSpec {
            surfaces: self.surfaces,
            cracks_per_surface: self.cracks_per_surface,
            surface: SurfaceSpec {
                extent: [self.extent_x, self.extent_y],
                density: self.density,
                roughness: self.roughness,
                octaves: self.octaves,
                base_frequency: self.base_frequency,
                gain: self.gain,
                ..SurfaceSpec::default()
            },
            width_range: [self.width_min, self.width_max],
            length_range: [self.length_min, self.length_max],
            retain: self.retain,
            separation: self.separation,
            seed: self.seed,
            ..DatasetSpec::default()
        }
    }

    /// Layers config files, in order, over the defaults.
    pub fn load(paths: &[impl AsRef<Path>]) -> anyhow::Result<Self> {
        let mut c = PipelineConfig::default();
        for p in paths {
            let p = p.as_ref();
            let text = std::fs::read_to_string(p)
                .map_err(|e| anyhow::Error::new(ConfigError::Invalid(format!("cannot read {}: {e}", p.display()))))?;
            c.apply_text(&text)?;
        }
        Ok(c)
    }
}
