//! Differentiable pose-geometry ops on the tape: the skeleton renderer and
//! the spatial-softmax keypoint readout.

use std::sync::Arc;

use ndarray::IxDyn;

use crate::pose::{self, EdgeSet};

use super::{Tape, Tensor};

impl Tape {
    /// Render `(B, K, 2)` keypoint coordinates into `(B, 1, H, W)` skeleton
    /// images; differentiable in the coordinates.
    pub fn render_skeleton(
        &mut self,
        coords: &Tensor,
        edges: &EdgeSet,
        resolution: (usize, usize),
        gamma: f64,
    ) -> Tensor {
        let c3 = coords
            .data
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("coords must be (B, K, 2)");
        let (out, trace) = pose::render_skeleton_batch(c3.view(), edges, resolution, gamma)
            .expect("renderer inputs validated at model construction");
        let (b, h, w) = out.dim();
        let out = Arc::new(
            out.into_shape_with_order(IxDyn(&[b, 1, h, w]))
                .unwrap(),
        );
        let node = match coords.node {
            Some(cn) if self.recording => {
                let cd = Arc::clone(&coords.data);
                let od = Arc::clone(&out);
                let edges = edges.clone();
                self.push(Box::new(move |g, grads| {
                    let g3 = g
                        .view()
                        .into_shape_with_order((b, h, w))
                        .unwrap();
                    let vals = od.view().into_shape_with_order((b, h, w)).unwrap();
                    let c3 = cd.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                    let gc = pose::render::render_skeleton_batch_backward(
                        g3.view(),
                        c3.view(),
                        vals.view(),
                        &trace,
                        &edges,
                        gamma,
                    );
                    grads.accumulate(cn, gc.into_dyn());
                }))
            }
            _ => None,
        };
        Tensor { data: out, node }
    }

    /// Spatial-softmax expectation: `(B, K, H, W)` heatmaps to `(B, K, 2)`
    /// normalized coordinates.
    pub fn softmax_coords(&mut self, heatmaps: &Tensor) -> Tensor {
        let h4 = heatmaps
            .data
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("heatmaps must be (B, K, H, W)");
        let (coords, probs) = pose::keypoints_from_heatmaps_batch(h4.view());
        let coords = Arc::new(coords.into_dyn());
        let node = match heatmaps.node {
            Some(hn) if self.recording => {
                let cd = Arc::clone(&coords);
                self.push(Box::new(move |g, grads| {
                    let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                    let c3 = cd.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                    let gh = pose::heatmap::keypoints_from_heatmaps_batch_backward(
                        g3.view(),
                        c3.view(),
                        probs.view(),
                    );
                    grads.accumulate(hn, gh.into_dyn());
                }))
            }
            _ => None,
        };
        Tensor { data: coords, node }
    }
}
