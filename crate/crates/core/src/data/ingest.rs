//! Depth-image to point-cloud preprocessing: back-projection, workspace
//! crop and farthest point sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::cloud::{Aabb, CameraIntrinsics, PointCloud};
use super::fps::fps;

/// Row-major depth map in meters. Non-positive or non-finite entries are holes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthImage {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f32>,
}

impl DepthImage {
    pub fn new(height: usize, width: usize, depth: Vec<f32>) -> Result<Self> {
        if height * width != depth.len() {
            return Err(Error::shape(
                "depth_image",
                format!("{height}x{width} needs {} values, got {}", height * width, depth.len()),
            ));
        }
        Ok(Self { height, width, depth })
    }
}

/// `x = (u - cx)·d/fx, y = (v - cy)·d/fy, z = d` for every valid pixel,
/// with `u` the column and `v` the row.
pub fn backproject_depth(depth: &DepthImage, k: &CameraIntrinsics) -> Result<PointCloud> {
    let mut pts = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = depth.depth[v * depth.width + u];
            if !(d.is_finite() && d > 0.0) {
                continue;
            }
            let d = d as f64;
            pts.push([
                ((u as f64 - k.cx) * d / k.fx) as f32,
                ((v as f64 - k.cy) * d / k.fy) as f32,
                d as f32,
            ]);
        }
    }
    if pts.is_empty() {
        return Err(Error::EmptyCloud("depth map has no valid pixels"));
    }
    PointCloud::new(pts)
}

/// Keeps points inside `aabb` in their original order.
pub fn crop_workspace(cloud: &PointCloud, aabb: &Aabb) -> Result<PointCloud> {
    aabb.validate()?;
    let kept: Vec<_> = cloud.points().iter().copied().filter(|p| aabb.contains(p)).collect();
    if kept.is_empty() {
        return Err(Error::EmptyCloud("no points inside the workspace"));
    }
    PointCloud::new(kept)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    pub intrinsics: CameraIntrinsics,
    pub workspace: Aabb,
    #[serde(default = "default_points")]
    pub n_points: usize,
    /// Leading frames dropped before sampling (static prefix).
    #[serde(default)]
    pub skip_frames: usize,
    /// Keep one frame out of every `stride`.
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_points() -> usize {
    1024
}

fn default_stride() -> usize {
    1
}

impl IngestOptions {
    pub fn new(intrinsics: CameraIntrinsics, workspace: Aabb) -> Self {
        Self {
            intrinsics,
            workspace,
            n_points: default_points(),
            skip_frames: 0,
            stride: 1,
        }
    }
}

/// Back-project, crop, then FPS-downsample (start index 0) one frame.
pub fn ingest_frame(depth: &DepthImage, opts: &IngestOptions) -> Result<PointCloud> {
    let raw = backproject_depth(depth, &opts.intrinsics)?;
    let cropped = crop_workspace(&raw, &opts.workspace)?;
    fps(&cropped, opts.n_points, 0)
}

/// Applies frame skipping and striding, then [`ingest_frame`] to each kept frame.
pub fn ingest_sequence(frames: &[DepthImage], opts: &IngestOptions) -> Result<Vec<PointCloud>> {
    if opts.stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    frames
        .iter()
        .skip(opts.skip_frames)
        .step_by(opts.stride)
        .map(|f| ingest_frame(f, opts))
        .collect()
}
