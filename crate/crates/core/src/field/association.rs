//! Cross-view instance association.
//!
//! Each view arrives with its own label numbering. Every `(view, label)` detection is
//! back-projected through the depth map and summarised by its 3D centroid; detections
//! are then merged greedily, largest first, into global instances whose running
//! centroid lies within `merge_distance`. A global instance takes at most one
//! detection per view.

use std::collections::BTreeMap;

use nalgebra::Vector3;

use super::{CameraView, FieldError, InstanceMasks, NO_RETURN};
use crate::geometry::{back_project, ImageMap, Intrinsics, PixelCoord, Pose};

/// A view whose mask labels are local to that view (0 = background).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledView {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub depth: ImageMap<f32>,
    pub features: ImageMap<f32>,
    pub labels: ImageMap<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssociationParams {
    /// Maximum centroid distance for two detections to be the same instance, metres.
    /// Each view sees only the near side of an object, so this must exceed the
    /// spread of visible-surface centroids.
    pub merge_distance: f64,
}

impl Default for AssociationParams {
    fn default() -> Self {
        Self {
            merge_distance: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssociationResult {
    pub views: Vec<CameraView>,
    /// Number of global ids including background.
    pub instance_count: usize,
    /// Per view: local label -> global id. Background maps to itself and is omitted.
    pub mapping: Vec<BTreeMap<u8, u8>>,
    /// World centroid of each global instance (index = id - 1).
    pub centroids: Vec<Vector3<f64>>,
}

struct Detection {
    view: usize,
    label: u8,
    pixels: usize,
    centroid: Vector3<f64>,
}

struct Global {
    sum: Vector3<f64>,
    pixels: usize,
    views: Vec<usize>,
}

impl Global {
    fn centroid(&self) -> Vector3<f64> {
        self.sum / self.pixels as f64
    }
}

pub fn associate_masks(
    views: Vec<LabeledView>,
    params: AssociationParams,
) -> Result<AssociationResult, FieldError> {
    let mut detections = Vec::new();
    for (vi, view) in views.iter().enumerate() {
        if !view.labels.same_shape(&view.depth) || view.labels.channels() != 1 {
            return Err(FieldError::DimensionMismatch {
                view: vi,
                detail: "label map shape differs from depth map".into(),
            });
        }
        let mut acc: BTreeMap<u8, (Vector3<f64>, usize)> = BTreeMap::new();
        for y in 0..view.depth.height() {
            for x in 0..view.depth.width() {
                let label = view.labels.texel(x, y)[0];
                let z = view.depth.texel(x, y)[0];
                if label == 0 || !(z > NO_RETURN) {
                    continue;
                }
                let p = back_project(
                    PixelCoord::new(x as f64, y as f64),
                    z as f64,
                    &view.pose,
                    &view.intrinsics,
                );
                let e = acc.entry(label).or_insert((Vector3::zeros(), 0));
                e.0 += p;
                e.1 += 1;
            }
        }
        detections.extend(acc.into_iter().map(|(label, (sum, n))| Detection {
            view: vi,
            label,
            pixels: n,
            centroid: sum / n as f64,
        }));
    }
    detections.sort_by(|a, b| {
        b.pixels
            .cmp(&a.pixels)
            .then(a.view.cmp(&b.view))
            .then(a.label.cmp(&b.label))
    });

    let mut globals: Vec<Global> = Vec::new();
    let mut mapping = vec![BTreeMap::new(); views.len()];
    for det in &detections {
        let target = globals
            .iter()
            .enumerate()
            .filter(|(_, g)| !g.views.contains(&det.view))
            .map(|(i, g)| (i, (g.centroid() - det.centroid).norm()))
            .filter(|(_, dist)| *dist < params.merge_distance)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i);
        let gid = match target {
            Some(i) => {
                let g = &mut globals[i];
                g.sum += det.centroid * det.pixels as f64;
                g.pixels += det.pixels;
                g.views.push(det.view);
                i
            }
            None => {
                if globals.len() >= 255 {
                    return Err(FieldError::InvalidParameter(
                        "more than 255 instances after association".into(),
                    ));
                }
                globals.push(Global {
                    sum: det.centroid * det.pixels as f64,
                    pixels: det.pixels,
                    views: vec![det.view],
                });
                globals.len() - 1
            }
        };
        mapping[det.view].insert(det.label, (gid + 1) as u8);
    }

    let instance_count = globals.len() + 1;
    let mut out = Vec::with_capacity(views.len());
    for (view, map) in views.into_iter().zip(&mapping) {
        let relabeled: Vec<u8> = view
            .labels
            .data()
            .iter()
            .map(|l| if *l == 0 { 0 } else { map.get(l).copied().unwrap_or(0) })
            .collect();
        let labels = ImageMap::new(view.labels.width(), view.labels.height(), 1, relabeled)
            .expect("same shape as input");
        out.push(CameraView {
            intrinsics: view.intrinsics,
            pose: view.pose,
            depth: view.depth,
            features: view.features,
            masks: InstanceMasks::from_labels(labels, instance_count)?,
        });
    }
    Ok(AssociationResult {
        views: out,
        instance_count,
        mapping,
        centroids: globals.iter().map(Global::centroid).collect(),
    })
}
