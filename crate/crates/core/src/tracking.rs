//! Keypoint initialisation on an instance surface and descriptor-matching tracking.
//!
//! Tracking minimises
//!
//! ```text
//! E(s) = Σ_j ||F_f(s_j) - f0_j||² + λ_dist Σ_j F_d(s_j)²
//! ```
//!
//! by gradient descent with backtracking from the previous frame's points. In rigid
//! mode every iterate is replaced by the best rigid motion of the initial points.

use std::sync::Arc;

use nalgebra::{Matrix3, SVD, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::field::{FieldValue, FusedField};
use crate::mesh::GridSpec;

#[derive(Debug, Error, PartialEq)]
pub enum TrackError {
    #[error("instance {0} has no surface candidates in the field")]
    InstanceAbsent(u8),
    #[error("invalid tracking configuration: {0}")]
    InvalidConfig(String),
    #[error("point sets differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("reference points are degenerate (fewer than 3 or collinear)")]
    Degenerate,
    #[error("invalid grid: {0}")]
    Grid(String),
}

/// Tracked keypoints of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub points: Vec<Vector3<f64>>,
    pub instance: u8,
    pub frame: usize,
    /// More than half the points were unobserved; the points were frozen.
    pub lost: bool,
    /// Fewer surface candidates than requested keypoints were available.
    pub underfilled: bool,
    initial: Arc<[Vector3<f64>]>,
    anchors: Arc<[Vec<f64>]>,
}

impl KeypointSet {
    /// A fresh set whose anchors are the given descriptors.
    pub fn new(points: Vec<Vector3<f64>>, anchors: Vec<Vec<f64>>, instance: u8) -> Result<Self, TrackError> {
        if points.is_empty() {
            return Err(TrackError::Degenerate);
        }
        if points.len() != anchors.len() {
            return Err(TrackError::LengthMismatch(points.len(), anchors.len()));
        }
        Ok(Self {
            initial: points.clone().into(),
            points,
            instance,
            frame: 0,
            lost: false,
            underfilled: false,
            anchors: anchors.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Descriptors recorded at initialisation (`f0`).
    pub fn anchor_features(&self) -> &[Vec<f64>] {
        &self.anchors
    }

    /// Points at frame 0 (`s0`).
    pub fn initial_points(&self) -> &[Vector3<f64>] {
        &self.initial
    }

    /// Same anchors and reference, new positions.
    pub fn with_points(&self, points: Vec<Vector3<f64>>) -> Self {
        assert_eq!(points.len(), self.points.len(), "point count must be preserved");
        Self {
            points,
            ..self.clone()
        }
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.points.iter().sum::<Vector3<f64>>() / self.points.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackConfig {
    /// Metres per unit gradient for the first trial step of each iteration.
    pub step: f64,
    pub max_iterations: usize,
    /// Stop when the accepted update norm falls below this, metres.
    pub tolerance: f64,
    pub lambda_dist: f64,
    pub rigid: bool,
    pub max_halvings: usize,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            step: 5e-3,
            max_iterations: 100,
            tolerance: 1e-4,
            lambda_dist: 1.0,
            rigid: false,
            max_halvings: 10,
        }
    }
}

impl TrackConfig {
    pub fn validate(&self) -> Result<(), TrackError> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(TrackError::InvalidConfig("step must be positive".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(TrackError::InvalidConfig("tolerance must be positive".into()));
        }
        if !(self.lambda_dist >= 0.0 && self.lambda_dist.is_finite()) {
            return Err(TrackError::InvalidConfig("lambda_dist must be non-negative".into()));
        }
        Ok(())
    }
}

/// Farthest-point sampling. Starts from the point nearest the centroid; ties go to
/// the lower index. Returns indices in selection order.
pub fn farthest_point_sampling(points: &[Vector3<f64>], count: usize) -> Vec<usize> {
    if points.is_empty() || count == 0 {
        return Vec::new();
    }
    let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let argmax = |vals: &mut dyn Iterator<Item = (usize, f64)>| {
        vals.fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
            .0
    };
    let first = argmax(&mut points.iter().enumerate().map(|(i, p)| (i, -(p - centroid).norm_squared())));
    let mut chosen = vec![first];
    let mut dist: Vec<f64> = points.iter().map(|p| (p - points[first]).norm_squared()).collect();
    while chosen.len() < count.min(points.len()) {
        let next = argmax(&mut dist.iter().copied().enumerate());
        chosen.push(next);
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min((p - points[next]).norm_squared());
        }
    }
    chosen
}

/// Samples `n_s` keypoints on the surface of `instance` by farthest-point sampling
/// of observed lattice points with `|d| <= tau_surf` whose argmax label is `instance`.
pub fn sample_keypoints(
    field: &FusedField,
    grid: &GridSpec,
    instance: u8,
    n_s: usize,
    tau_surf: f64,
) -> Result<KeypointSet, TrackError> {
    grid.validate().map_err(|e| TrackError::Grid(e.to_string()))?;
    if n_s == 0 {
        return Err(TrackError::InvalidConfig("n_s must be at least 1".into()));
    }
    let candidates: Vec<(Vector3<f64>, Vec<f64>)> = grid
        .lattice()
        .into_par_iter()
        .map_init(
            || FieldValue::unobserved(field.feature_dim(), field.instance_count()),
            |buf, x| {
                field.evaluate_into(&x, buf);
                (buf.observed && buf.d.abs() <= tau_surf && buf.instance() == instance)
                    .then(|| (x, buf.f.clone()))
            },
        )
        .flatten()
        .collect();
    if candidates.is_empty() {
        return Err(TrackError::InstanceAbsent(instance));
    }
    let points: Vec<Vector3<f64>> = candidates.iter().map(|c| c.0).collect();
    let chosen = farthest_point_sampling(&points, n_s);
    let underfilled = chosen.len() < n_s;
    if underfilled {
        log::warn!(
            "instance {instance}: only {} surface candidates for {n_s} keypoints",
            chosen.len()
        );
    }
    let mut set = KeypointSet::new(
        chosen.iter().map(|&i| candidates[i].0).collect(),
        chosen.iter().map(|&i| candidates[i].1.clone()).collect(),
        instance,
    )?;
    set.underfilled = underfilled;
    Ok(set)
}

/// Least-squares rigid motion `(R, t)` with `R·ref + t ≈ cur`.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidFit {
    pub points: Vec<Vector3<f64>>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Orthogonal Procrustes fit of `reference` onto `current` with a proper rotation.
pub fn rigid_project(reference: &[Vector3<f64>], current: &[Vector3<f64>]) -> Result<RigidFit, TrackError> {
    if reference.len() != current.len() {
        return Err(TrackError::LengthMismatch(reference.len(), current.len()));
    }
    if reference.len() < 3 {
        return Err(TrackError::Degenerate);
    }
    let n = reference.len() as f64;
    let rc = reference.iter().sum::<Vector3<f64>>() / n;
    let cc = current.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (r, c) in reference.iter().zip(current) {
        let a = r - rc;
        h += a * (c - cc).transpose();
        spread += a * a.transpose();
    }
    let sv = spread.symmetric_eigenvalues();
    let (top, mid) = {
        let mut s = [sv[0], sv[1], sv[2]];
        s.sort_by(|a, b| b.total_cmp(a));
        (s[0], s[1])
    };
    if !(top > 0.0) || mid <= 1e-12 * top {
        return Err(TrackError::Degenerate);
    }
    let svd = SVD::new(h, true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let v = v_t.transpose();
    let sign = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
    let rotation = v * correction * u.transpose();
    let translation = cc - rotation * rc;
    Ok(RigidFit {
        points: reference.iter().map(|r| rotation * r + translation).collect(),
        rotation,
        translation,
    })
}

/// Diagnostics of one tracking step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackReport {
    pub iterations: usize,
    /// Objective before the first and after every accepted iteration.
    pub objective: Vec<f64>,
    pub converged: bool,
    /// Rigid motion from the initial points, in rigid mode.
    pub transform: Option<(Matrix3<f64>, Vector3<f64>)>,
    pub unobserved: usize,
}

struct Evaluation {
    objective: f64,
    gradient: Vec<Vector3<f64>>,
    unobserved: usize,
}

fn evaluate(field: &FusedField, points: &[Vector3<f64>], anchors: &[Vec<f64>], lambda: f64, with_gradient: bool) -> Evaluation {
    let terms: Vec<(f64, Vector3<f64>, bool)> = points
        .par_iter()
        .zip(anchors.par_iter())
        .map(|(x, f0)| {
            if with_gradient {
                let jac = field.jacobian(x);
                let mut e = 0.0;
                let mut g = Vector3::zeros();
                for ((f, a), row) in jac.value.f.iter().zip(f0).zip(&jac.f_jac) {
                    let r = f - a;
                    e += r * r;
                    g += row * (2.0 * r);
                }
                let d = jac.value.d;
                e += lambda * d * d;
                g += jac.d_grad * (2.0 * lambda * d);
                (e, g, jac.value.observed)
            } else {
                let v = field.evaluate(x);
                let e = v.f.iter().zip(f0).map(|(f, a)| (f - a) * (f - a)).sum::<f64>()
                    + lambda * v.d * v.d;
                (e, Vector3::zeros(), v.observed)
            }
        })
        .collect();
    Evaluation {
        objective: terms.iter().map(|t| t.0).sum(),
        gradient: terms.iter().map(|t| t.1).collect(),
        unobserved: terms.iter().filter(|t| !t.2).count(),
    }
}

/// Tracking objective at `points`.
pub fn objective(field: &FusedField, kps: &KeypointSet, cfg: &TrackConfig) -> f64 {
    evaluate(field, &kps.points, kps.anchor_features(), cfg.lambda_dist, false).objective
}

/// Advances `kps` to the next frame observed by `field_next`.
pub fn track_step(field_next: &FusedField, kps: &KeypointSet, cfg: &TrackConfig) -> Result<KeypointSet, TrackError> {
    track_step_with_report(field_next, kps, cfg).map(|(k, _)| k)
}

pub fn track_step_with_report(
    field_next: &FusedField,
    kps: &KeypointSet,
    cfg: &TrackConfig,
) -> Result<(KeypointSet, TrackReport), TrackError> {
    cfg.validate()?;
    let anchors = kps.anchor_features();
    let lambda = cfg.lambda_dist;
    let mut points = kps.points.clone();
    let mut current = evaluate(field_next, &points, anchors, lambda, true);
    let mut report = TrackReport {
        iterations: 0,
        objective: vec![current.objective],
        converged: false,
        transform: None,
        unobserved: current.unobserved,
    };
    if 2 * current.unobserved > points.len() {
        let mut out = kps.clone();
        out.frame += 1;
        out.lost = true;
        return Ok((out, report));
    }

    type Projected = (Vec<Vector3<f64>>, Option<(Matrix3<f64>, Vector3<f64>)>);
    let project = |trial: Vec<Vector3<f64>>| -> Result<Projected, TrackError> {
        if cfg.rigid {
            let fit = rigid_project(kps.initial_points(), &trial)?;
            Ok((fit.points, Some((fit.rotation, fit.translation))))
        } else {
            Ok((trial, None))
        }
    };
    if cfg.rigid {
        report.transform = Some(project(points.clone())?.1.expect("rigid mode"));
    }

    for _ in 0..cfg.max_iterations {
        let mut step = cfg.step;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let trial: Vec<Vector3<f64>> = points
                .iter()
                .zip(&current.gradient)
                .map(|(p, g)| p - g * step)
                .collect();
            let (trial, transform) = project(trial)?;
            let value = evaluate(field_next, &trial, anchors, lambda, false).objective;
            if value <= current.objective {
                accepted = Some((trial, transform));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, transform)) = accepted else {
            report.converged = true;
            break;
        };
        let update = trial
            .iter()
            .zip(&points)
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            .sqrt();
        points = trial;
        if transform.is_some() {
            report.transform = transform;
        }
        current = evaluate(field_next, &points, anchors, lambda, true);
        report.iterations += 1;
        report.objective.push(current.objective);
        report.unobserved = current.unobserved;
        if update < cfg.tolerance {
            report.converged = true;
            break;
        }
    }
    let mut out = kps.with_points(points);
    out.frame += 1;
    out.lost = false;
    Ok((out, report))
}
