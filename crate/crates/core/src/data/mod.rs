//! Point clouds, synthetic trajectories, depth ingestion and the dataset file.

mod cloud;
mod dataset;
mod fps;
mod ingest;
mod scene;

pub use cloud::{Aabb, CameraIntrinsics, Point, PointCloud};
pub use dataset::{
    decode_dataset, encode_dataset, meta_path, read_dataset, read_meta, write_dataset, write_meta, DatasetMeta,
    DATASET_MAGIC, DATASET_VERSION,
};
pub use fps::{fps, fps_indices};
pub use ingest::{backproject_depth, crop_workspace, ingest_frame, ingest_sequence, DepthImage, IngestOptions};
pub use scene::{
    generate_scripted, generate_trajectory, sample_pair, sample_pairs, trajectory_seed, BoxObject, FramePair,
    SceneConfig, SceneDescriptor, Trajectory,
};

use rayon::prelude::*;

use crate::error::Result;

/// Generates `count` trajectories in parallel; trajectory `i` uses
/// `trajectory_seed(global_seed, i)`, so the output is independent of
/// thread count.
pub fn generate_dataset(cfg: &SceneConfig, count: usize, global_seed: u64) -> Result<Vec<Trajectory>> {
    (0..count as u32)
        .into_par_iter()
        .map(|i| generate_trajectory(cfg, trajectory_seed(global_seed, i)))
        .collect()
}
