//! Crack instance detection on unstructured LIDAR surfaces.
//!
//! The pipeline cuts a labeled cloud into cubic windows
//! ([`voxelizer`]), reduces each window to a fixed point budget with a
//! crack-preserving voxel-grid sampler ([`downsampler`]), scores every
//! point ([`scorer`]), and groups confident points into crack instances
//! ([`instancer`]). [`metrics`] evaluates the result point-wise and
//! crack-wise; [`synthgen`] produces labeled test surfaces.

pub mod cloud_io;
pub mod dataset;
pub mod downsampler;
pub mod error;
pub mod instancer;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod scorer;
pub mod synthgen;
pub mod voxelizer;

pub use cloud_io::{read_cloud, read_ply, write_cloud, AnnotationLayer, PlyContents, PlyFormat};
pub use dataset::{
    normalize_voxel, split_by_crack, DatasetStats, FeatureMask, NormalizationStats, NormalizedVoxel, Partition, Split,
};
pub use downsampler::downsample;
pub use error::{Error, Result};
pub use instancer::{
    cluster, detect, filter_clusters, format_instances, instances_from_layer, real_instances, threshold_points,
    CrackInstance,
};
pub use metrics::{pointwise, threshold_sweep, Confusion, MetricsReport, PointScores};
pub use model::{
    validate_config, ClusteringConfig, LabeledPoint, MatchConfig, PointCloud, Violation, VoxelizationConfig,
};
pub use scorer::{init_model, predict, train, ScorerModel, TrainingConfig, TrainingHistory};
pub use synthgen::{generate_dataset, generate_surface, carve_crack, CrackSpec, DatasetSpec, SurfaceSpec};
pub use voxelizer::{build_grid, filter_and_fill, reconstruct, ScoredVoxel, Voxel};
