//! Analytic, differentiable conversions between the coordinate and pictorial
//! pose representations, plus warping utilities.
//!
//! Pose has two interchangeable forms: a vector of `K` 2D keypoints in
//! normalized `[-1, 1]` coordinates, and a single-channel skeleton image
//! produced by an analytic distance-field renderer. The renderer is
//! differentiable in the keypoint coordinates, which is what lets coordinates
//! act as a trainable bottleneck between two image representations.

pub(crate) mod heatmap;
pub(crate) mod render;
mod tps;
mod types;

pub use heatmap::{keypoints_from_heatmaps, keypoints_from_heatmaps_batch, pixel_centers};
pub use render::{
    point_segment_distance, render_skeleton, render_skeleton_batch, render_skeleton_gradient,
    RenderTrace,
};
pub use tps::{tps_apply, tps_apply_gray, ThinPlateSplineWarp};
pub use types::{
    load_keypoint_samples, load_topology, save_keypoint_samples, save_topology, EdgeSet,
    KeypointSet, SkeletonImage,
};
