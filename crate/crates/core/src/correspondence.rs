//! Keypoint-to-goal-image correspondence by descriptor softmax.
//!
//! For keypoint `j` with anchor descriptor `f0_j` and goal pixel `u_i`:
//!
//! ```text
//! α_ij = ||W_goal[u_i] - f0_j||
//! β_ij = exp(-s α_ij) / Σ_i exp(-s α_ij)
//! s_goal,j = Σ_i β_ij u_i
//! ```
//!
//! Descriptors on both sides are L2-normalised before matching. With goal masks the
//! softmax runs over the paired goal instance's pixels only.

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{Camera, ImageMap, PixelCoord};
use crate::tracking::KeypointSet;

pub const DEFAULT_SHARPNESS: f64 = 100.0;

#[derive(Debug, Error, PartialEq)]
pub enum CorrespondenceError {
    #[error("descriptor dimension mismatch: goal has {goal}, keypoints have {keypoints}")]
    DimensionMismatch { goal: usize, keypoints: usize },
    #[error("goal mask shape differs from goal feature map")]
    MaskShape,
    #[error("goal instance {0} has no pixels")]
    EmptyGoalInstance(u8),
    #[error("goal masks are required for instance pairing")]
    NoGoalMasks,
    #[error("sharpness must be finite and non-negative, got {0}")]
    InvalidSharpness(f64),
}

/// Goal image descriptors, optional instance labels and the virtual reference camera.
#[derive(Debug, Clone)]
pub struct GoalSpec {
    pub features: ImageMap<f32>,
    /// Goal instance id per pixel, 0 = background.
    pub masks: Option<ImageMap<u8>>,
    pub sharpness: f64,
    pub camera: Camera,
}

impl GoalSpec {
    pub fn validate(&self) -> Result<(), CorrespondenceError> {
        if !(self.sharpness >= 0.0 && self.sharpness.is_finite()) {
            return Err(CorrespondenceError::InvalidSharpness(self.sharpness));
        }
        if let Some(m) = &self.masks {
            if !m.same_shape(&self.features) || m.channels() != 1 {
                return Err(CorrespondenceError::MaskShape);
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.features.channels()
    }

    /// Goal instance ids with at least one pixel, ascending.
    pub fn instances(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        if let Some(m) = &self.masks {
            for &l in m.data() {
                seen[l as usize] = true;
            }
        }
        (1..=255u8).filter(|&l| seen[l as usize]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoalPoints {
    pub points: Vec<PixelCoord>,
    pub heatmaps: Option<Vec<ImageMap<f64>>>,
}

fn normalized(v: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out: Vec<f64> = v.collect();
    let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        out.iter_mut().for_each(|x| *x /= norm);
    }
    out
}

/// Per-pixel Euclidean distance between goal descriptors and `f0`.
pub fn feature_distance_map(goal_features: &ImageMap<f32>, f0: &[f64]) -> Result<ImageMap<f64>, CorrespondenceError> {
    let n = goal_features.channels();
    if n != f0.len() {
        return Err(CorrespondenceError::DimensionMismatch {
            goal: n,
            keypoints: f0.len(),
        });
    }
    let data = goal_features
        .data()
        .chunks_exact(n)
        .map(|px| {
            px.iter()
                .zip(f0)
                .map(|(&g, f)| (g as f64 - f) * (g as f64 - f))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(ImageMap::new(goal_features.width(), goal_features.height(), 1, data).expect("shape preserved"))
}

fn softmax_over(alpha: &[f64], s: f64, include: impl Fn(usize) -> bool) -> Vec<f64> {
    let min = alpha
        .iter()
        .enumerate()
        .filter(|(i, _)| include(*i))
        .map(|(_, a)| *a)
        .fold(f64::INFINITY, f64::min);
    let mut beta: Vec<f64> = alpha
        .iter()
        .enumerate()
        .map(|(i, a)| if include(i) { (-s * (a - min)).exp() } else { 0.0 })
        .collect();
    let total: f64 = beta.iter().sum();
    if total > 0.0 {
        beta.iter_mut().for_each(|b| *b /= total);
    }
    beta
}

/// `β = softmax(-s α)` over the whole map.
pub fn softmax_weights(alpha: &ImageMap<f64>, s: f64) -> ImageMap<f64> {
    let beta = softmax_over(alpha.data(), s, |_| true);
    ImageMap::new(alpha.width(), alpha.height(), 1, beta).expect("shape preserved")
}

/// Softmax restricted to pixels where `mask` is true; other pixels get exactly 0.
pub fn softmax_weights_masked(alpha: &ImageMap<f64>, s: f64, mask: &[bool]) -> ImageMap<f64> {
    assert_eq!(mask.len(), alpha.data().len(), "mask must cover the map");
    let beta = softmax_over(alpha.data(), s, |i| mask[i]);
    ImageMap::new(alpha.width(), alpha.height(), 1, beta).expect("shape preserved")
}

/// `Σ β_i u_i` over the pixel lattice.
pub fn expected_pixel(beta: &ImageMap<f64>) -> PixelCoord {
    let w = beta.width();
    let (mut u, mut v) = (0.0, 0.0);
    for (i, b) in beta.data().iter().enumerate() {
        u += b * (i % w) as f64;
        v += b * (i / w) as f64;
    }
    PixelCoord::new(u, v)
}

struct PreparedGoal {
    features: Vec<f64>,
    dim: usize,
}

fn prepare(goal: &GoalSpec) -> PreparedGoal {
    let dim = goal.feature_dim();
    let features = goal
        .features
        .data()
        .chunks_exact(dim)
        .flat_map(|px| normalized(px.iter().map(|&v| v as f64)))
        .collect();
    PreparedGoal { features, dim }
}

/// Goal pixel for every keypoint. `goal_instance` restricts matching to one goal
/// mask label; when masks exist and none is given, the best-matching goal instance
/// is used.
pub fn goal_points(
    kps: &KeypointSet,
    goal: &GoalSpec,
    goal_instance: Option<u8>,
    keep_heatmaps: bool,
) -> Result<GoalPoints, CorrespondenceError> {
    goal.validate()?;
    let dim = goal.feature_dim();
    if let Some(a) = kps.anchor_features().first() {
        if a.len() != dim {
            return Err(CorrespondenceError::DimensionMismatch {
                goal: dim,
                keypoints: a.len(),
            });
        }
    }
    let target = match (goal_instance, &goal.masks) {
        (Some(id), _) => Some(id),
        (None, Some(_)) => pair_instances(std::slice::from_ref(kps), goal)?
            .first()
            .and_then(|p| p.goal),
        (None, None) => None,
    };
    let mask: Option<Vec<bool>> = match target {
        Some(id) => {
            let m = goal.masks.as_ref().ok_or(CorrespondenceError::NoGoalMasks)?;
            let sel: Vec<bool> = m.data().iter().map(|&l| l == id).collect();
            if !sel.iter().any(|&b| b) {
                return Err(CorrespondenceError::EmptyGoalInstance(id));
            }
            Some(sel)
        }
        None => None,
    };
    let prepared = prepare(goal);
    let (w, h) = (goal.features.width(), goal.features.height());
    let maps: Vec<ImageMap<f64>> = kps
        .anchor_features()
        .par_iter()
        .map(|f0| {
            let f0 = normalized(f0.iter().copied());
            let alpha: Vec<f64> = prepared
                .features
                .chunks_exact(prepared.dim)
                .map(|g| g.iter().zip(&f0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .collect();
            let beta = match &mask {
                Some(m) => softmax_over(&alpha, goal.sharpness, |i| m[i]),
                None => softmax_over(&alpha, goal.sharpness, |_| true),
            };
            ImageMap::new(w, h, 1, beta).expect("shape preserved")
        })
        .collect();
    Ok(GoalPoints {
        points: maps.iter().map(expected_pixel).collect(),
        heatmaps: keep_heatmaps.then_some(maps),
    })
}

/// Pairing of one workspace instance to a goal instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstancePair {
    pub workspace: u8,
    /// `None` when every goal instance was already taken.
    pub goal: Option<u8>,
    pub similarity: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na > 0.0 && nb > 0.0 {
        dot / (na * nb)
    } else {
        0.0
    }
}

/// Greedy maximum-cosine matching between each keypoint set's mean anchor and each
/// goal instance's mean descriptor. Ties go to lower workspace, then goal ids.
/// Output follows the order of `sets`.
pub fn pair_instances(sets: &[KeypointSet], goal: &GoalSpec) -> Result<Vec<InstancePair>, CorrespondenceError> {
    goal.validate()?;
    let masks = goal.masks.as_ref().ok_or(CorrespondenceError::NoGoalMasks)?;
    let prepared = prepare(goal);
    let dim = prepared.dim;
    let goal_ids = goal.instances();
    let goal_means: Vec<Vec<f64>> = goal_ids
        .iter()
        .map(|&id| {
            let mut mean = vec![0.0; dim];
            for (px, _) in prepared
                .features
                .chunks_exact(dim)
                .zip(masks.data())
                .filter(|(_, &l)| l == id)
            {
                mean.iter_mut().zip(px).for_each(|(m, v)| *m += v);
            }
            mean
        })
        .collect();
    let mut work_means = Vec::with_capacity(sets.len());
    for set in sets {
        let mut mean = vec![0.0; dim];
        for a in set.anchor_features() {
            if a.len() != dim {
                return Err(CorrespondenceError::DimensionMismatch {
                    goal: dim,
                    keypoints: a.len(),
                });
            }
            mean.iter_mut().zip(normalized(a.iter().copied())).for_each(|(m, v)| *m += v);
        }
        work_means.push(mean);
    }
    let mut candidates: Vec<(f64, u8, usize, u8, usize)> = Vec::new();
    for (wi, wm) in work_means.iter().enumerate() {
        for (gi, gm) in goal_means.iter().enumerate() {
            candidates.push((cosine(wm, gm), sets[wi].instance, wi, goal_ids[gi], gi));
        }
    }
    candidates.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    let mut out: Vec<InstancePair> = sets
        .iter()
        .map(|s| InstancePair {
            workspace: s.instance,
            goal: None,
            similarity: f64::NAN,
        })
        .collect();
    let mut goal_taken = vec![false; goal_ids.len()];
    for (sim, _, wi, gid, gi) in candidates {
        if out[wi].goal.is_none() && !goal_taken[gi] {
            out[wi].goal = Some(gid);
            out[wi].similarity = sim;
            goal_taken[gi] = true;
        }
    }
    for p in out.iter().filter(|p| p.goal.is_none()) {
        log::warn!("workspace instance {} has no goal instance", p.workspace);
    }
    Ok(out)
}
