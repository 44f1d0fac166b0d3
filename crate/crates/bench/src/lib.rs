//! Shared fixtures for the criterion benches in `benches/`.

use crackscan_core::synthgen::generate_dataset;
use crackscan_core::{DatasetSpec, PointCloud};

/// One 2 m square cracked surface at the default density.
pub fn fixture_cloud() -> PointCloud {
    let spec = DatasetSpec {
        surfaces: 1,
        cracks_per_surface: 3,
        seed: 21,
        ..DatasetSpec::default()
    };
    generate_dataset(&spec)
        .expect("fixture spec is valid")
        .clouds
        .remove(0)
}

/// `(id, position)` pairs for every point of `cloud`.
pub fn id_positions(cloud: &PointCloud) -> Vec<(u32, [f64; 3])> {
    (0..cloud.len() as u32).map(|i| (i, cloud.position(i))).collect()
}
