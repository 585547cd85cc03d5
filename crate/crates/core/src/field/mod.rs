//! The fused implicit field: signed distance, descriptor and instance probabilities
//! at arbitrary world points, fused from `K` calibrated RGBD views.
//!
//! Per view `i` a query point `x` is projected to pixel `u_i` with camera depth `r_i`.
//! The interpolated depth reading `r'_i` gives the depth difference
//! `d_i = r_i - r'_i`, truncated to `[-mu, mu]`. The visibility `v_i = [d_i < mu]`
//! and confidence `w_i = exp(min(mu - |d_i|, 0) / mu)` weight the per-view samples:
//!
//! ```text
//! d = Σ v_i d'_i / (δ + Σ v_i)
//! f = Σ v_i w_i f_i / (δ + Σ v_i)
//! p = Σ v_i w_i p_i / (δ + Σ v_i)
//! ```
//!
//! `d` is positive behind an observed surface (inside objects) and negative in
//! front of it.

mod association;

pub use association::{associate_masks, AssociationParams, AssociationResult, LabeledView};

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{project, Bilinear, ImageMap, Intrinsics, PixelCoord, Pose};

/// Depth value marking a pixel without a sensor return.
pub const NO_RETURN: f32 = 0.0;

pub const DEFAULT_MU: f64 = 0.02;
pub const DEFAULT_DELTA: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("a field needs at least one view")]
    EmptyViews,
    #[error("view {view}: {detail}")]
    DimensionMismatch { view: usize, detail: String },
    #[error("mask pixel ({x}, {y}) is not one-hot")]
    NonOneHotMask { x: usize, y: usize },
    #[error("mask label {label} at ({x}, {y}) is not below the instance count {count}")]
    LabelOutOfRange {
        x: usize,
        y: usize,
        label: u8,
        count: usize,
    },
    #[error("view {view}: invalid depth {value} at ({x}, {y})")]
    InvalidDepth {
        view: usize,
        x: usize,
        y: usize,
        value: f32,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Per-pixel instance labels; label 0 is background. Semantically the one-hot
/// volume `H x W x M`, stored as the index of the hot entry.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMasks {
    labels: ImageMap<u8>,
    count: usize,
}

impl InstanceMasks {
    pub fn from_labels(labels: ImageMap<u8>, count: usize) -> Result<Self, FieldError> {
        if labels.channels() != 1 {
            return Err(FieldError::InvalidParameter(format!(
                "label map must have one channel, got {}",
                labels.channels()
            )));
        }
        if count == 0 || count > 256 {
            return Err(FieldError::InvalidParameter(format!(
                "instance count must be in 1..=256, got {count}"
            )));
        }
        let width = labels.width();
        if let Some(i) = labels.data().iter().position(|&l| l as usize >= count) {
            return Err(FieldError::LabelOutOfRange {
                x: i % width,
                y: i / width,
                label: labels.data()[i],
                count,
            });
        }
        Ok(Self { labels, count })
    }

    /// Accepts an `H x W x M` volume whose every pixel has exactly one entry equal
    /// to 1 and all others 0.
    pub fn from_one_hot(volume: &ImageMap<f32>) -> Result<Self, FieldError> {
        let (w, h, m) = (volume.width(), volume.height(), volume.channels());
        if m == 0 || m > 256 {
            return Err(FieldError::InvalidParameter(format!(
                "instance count must be in 1..=256, got {m}"
            )));
        }
        let mut labels = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let texel = volume.texel(x, y);
                let mut hot = None;
                for (k, &p) in texel.iter().enumerate() {
                    if p == 1.0 && hot.is_none() {
                        hot = Some(k);
                    } else if p != 0.0 {
                        return Err(FieldError::NonOneHotMask { x, y });
                    }
                }
                labels.push(hot.ok_or(FieldError::NonOneHotMask { x, y })? as u8);
            }
        }
        Ok(Self {
            labels: ImageMap::new(w, h, 1, labels).expect("shape derived from volume"),
            count: m,
        })
    }

    pub fn to_one_hot(&self) -> ImageMap<f32> {
        let (w, h) = (self.labels.width(), self.labels.height());
        let mut out = ImageMap::filled(w, h, self.count, 0.0f32);
        for y in 0..h {
            for x in 0..w {
                let l = self.label(x, y) as usize;
                out.texel_mut(x, y)[l] = 1.0;
            }
        }
        out
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn labels(&self) -> &ImageMap<u8> {
        &self.labels
    }

    #[inline]
    pub fn label(&self, x: usize, y: usize) -> u8 {
        self.labels.texel(x, y)[0]
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }
}

/// One calibrated RGBD viewpoint with its precomputed descriptor and mask maps.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    /// `H x W x 1`, metres; `NO_RETURN` marks missing readings.
    pub depth: ImageMap<f32>,
    /// `H x W x N` descriptors.
    pub features: ImageMap<f32>,
    pub masks: InstanceMasks,
}

impl CameraView {
    pub fn feature_dim(&self) -> usize {
        self.features.channels()
    }

    pub fn instance_count(&self) -> usize {
        self.masks.count()
    }

    fn validate(&self, index: usize) -> Result<(), FieldError> {
        let mismatch = |detail: String| FieldError::DimensionMismatch {
            view: index,
            detail,
        };
        self.intrinsics
            .validate()
            .map_err(|e| mismatch(e.to_string()))?;
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        if self.depth.width() != w || self.depth.height() != h || self.depth.channels() != 1 {
            return Err(mismatch(format!(
                "depth map is {}x{}x{}, expected {w}x{h}x1",
                self.depth.width(),
                self.depth.height(),
                self.depth.channels()
            )));
        }
        if !self.features.same_shape(&self.depth) {
            return Err(mismatch(format!(
                "feature map is {}x{}, expected {w}x{h}",
                self.features.width(),
                self.features.height()
            )));
        }
        if self.features.channels() == 0 {
            return Err(mismatch("feature map has no channels".into()));
        }
        if self.masks.width() != w || self.masks.height() != h {
            return Err(mismatch(format!(
                "mask map is {}x{}, expected {w}x{h}",
                self.masks.width(),
                self.masks.height()
            )));
        }
        if let Some(i) = self
            .depth
            .data()
            .iter()
            .position(|d| !(d.is_finite() && *d >= 0.0))
        {
            return Err(FieldError::InvalidDepth {
                view: index,
                x: i % w,
                y: i / w,
                value: self.depth.data()[i],
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldParams {
    /// Truncation threshold, metres.
    pub mu: f64,
    /// Denominator regulariser.
    pub delta: f64,
}

impl Default for FieldParams {
    fn default() -> Self {
        Self {
            mu: DEFAULT_MU,
            delta: DEFAULT_DELTA,
        }
    }
}

impl FieldParams {
    pub fn validate(&self) -> Result<(), FieldError> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(FieldError::InvalidParameter(format!(
                "mu must be positive, got {}",
                self.mu
            )));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(FieldError::InvalidParameter(format!(
                "delta must be positive, got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Fused signed distance, descriptor and instance distribution at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldValue {
    pub d: f64,
    pub f: Vec<f64>,
    pub p: Vec<f64>,
    pub observed: bool,
}

impl FieldValue {
    pub fn unobserved(feature_dim: usize, instance_count: usize) -> Self {
        Self {
            d: 0.0,
            f: vec![0.0; feature_dim],
            p: vec![0.0; instance_count],
            observed: false,
        }
    }

    /// Most probable instance; ties go to the lower id, unobserved points to background.
    pub fn instance(&self) -> u8 {
        if !self.observed {
            return 0;
        }
        let mut best = 0;
        for (k, &v) in self.p.iter().enumerate() {
            if v > self.p[best] {
                best = k;
            }
        }
        best as u8
    }
}

/// `(d_i, d'_i)` from the point's camera depth `r` and the depth reading `r_prime`.
/// `None` when the reading is the no-return sentinel.
pub fn truncated_depth_difference(r: f64, r_prime: f64, mu: f64) -> Option<(f64, f64)> {
    if !(r_prime > NO_RETURN as f64) || !r_prime.is_finite() {
        return None;
    }
    let d = r - r_prime;
    Some((d, d.clamp(-mu, mu)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewWeights {
    pub visible: bool,
    pub weight: f64,
}

impl ViewWeights {
    pub fn v(&self) -> f64 {
        if self.visible {
            1.0
        } else {
            0.0
        }
    }
}

pub fn view_weights(d: f64, mu: f64) -> ViewWeights {
    ViewWeights {
        visible: d < mu,
        weight: ((mu - d.abs()).min(0.0) / mu).exp(),
    }
}

/// Samples of a single view at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSample {
    pub d: f64,
    pub d_trunc: f64,
    pub features: Vec<f64>,
    /// One-hot instance vector.
    pub probs: Vec<f64>,
    pub weights: ViewWeights,
}

/// Projects `x` into `view` and samples depth and features bilinearly and the mask at
/// the nearest texel. Out-of-frame, behind-camera or no-return points come back
/// invisible with every output zeroed.
pub fn sample_view(view: &CameraView, x: &Vector3<f64>, mu: f64) -> ViewSample {
    let n = view.feature_dim();
    let m = view.instance_count();
    let zero = ViewSample {
        d: 0.0,
        d_trunc: 0.0,
        features: vec![0.0; n],
        probs: vec![0.0; m],
        weights: ViewWeights {
            visible: false,
            weight: 0.0,
        },
    };
    let Some(proj) = project(x, &view.pose, &view.intrinsics) else {
        return zero;
    };
    if !proj.in_bounds {
        return zero;
    }
    let stencil = Bilinear::new(proj.pixel, view.depth.width(), view.depth.height());
    let Some(r_prime) = interpolate_depth(&view.depth, &stencil) else {
        return zero;
    };
    let (d, d_trunc) =
        truncated_depth_difference(proj.depth, r_prime, mu).expect("depth checked above");
    let mut features = vec![0.0; n];
    for ((tx, ty), w) in stencil.texels().into_iter().zip(stencil.weights()) {
        for (o, &t) in features.iter_mut().zip(view.features.texel(tx, ty)) {
            *o += w * t as f64;
        }
    }
    let mut probs = vec![0.0; m];
    probs[nearest_label(&view.masks, proj.pixel) as usize] = 1.0;
    ViewSample {
        d,
        d_trunc,
        features,
        probs,
        weights: view_weights(d, mu),
    }
}

/// Bilinear depth, or `None` if any texel of the stencil has no return.
#[inline]
fn interpolate_depth(depth: &ImageMap<f32>, stencil: &Bilinear) -> Option<f64> {
    let mut r = 0.0;
    for ((tx, ty), w) in stencil.texels().into_iter().zip(stencil.weights()) {
        let t = depth.texel(tx, ty)[0];
        if !(t > NO_RETURN) {
            return None;
        }
        r += w * t as f64;
    }
    Some(r)
}

#[inline]
fn nearest_label(masks: &InstanceMasks, pixel: PixelCoord) -> u8 {
    let (x, y) = crate::geometry::nearest_texel(pixel, masks.width(), masks.height());
    masks.label(x, y)
}

/// Per-view quantities needed by both evaluation and differentiation.
struct ViewHit {
    stencil: Bilinear,
    pixel: PixelCoord,
    cam: Vector3<f64>,
    d: f64,
    d_trunc: f64,
    weight: f64,
}

/// The fused implicit function. Immutable once built; all queries are read-only.
#[derive(Debug, Clone)]
pub struct FusedField {
    views: Vec<CameraView>,
    params: FieldParams,
    feature_dim: usize,
    instance_count: usize,
}

/// Validates and assembles views into a queryable field.
pub fn build_field(views: Vec<CameraView>, params: FieldParams) -> Result<FusedField, FieldError> {
    FusedField::new(views, params)
}

impl FusedField {
    pub fn new(views: Vec<CameraView>, params: FieldParams) -> Result<Self, FieldError> {
        params.validate()?;
        let first = views.first().ok_or(FieldError::EmptyViews)?;
        let feature_dim = first.feature_dim();
        let instance_count = first.instance_count();
        for (i, view) in views.iter().enumerate() {
            view.validate(i)?;
            if view.feature_dim() != feature_dim {
                return Err(FieldError::DimensionMismatch {
                    view: i,
                    detail: format!(
                        "feature dimension {} differs from {feature_dim}",
                        view.feature_dim()
                    ),
                });
            }
            if view.instance_count() != instance_count {
                return Err(FieldError::DimensionMismatch {
                    view: i,
                    detail: format!(
                        "instance count {} differs from {instance_count}",
                        view.instance_count()
                    ),
                });
            }
        }
        Ok(Self {
            views,
            params,
            feature_dim,
            instance_count,
        })
    }

    pub fn views(&self) -> &[CameraView] {
        &self.views
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    pub fn params(&self) -> FieldParams {
        self.params
    }

    pub fn mu(&self) -> f64 {
        self.params.mu
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn instance_count(&self) -> usize {
        self.instance_count
    }

    #[inline]
    fn hit(&self, view: &CameraView, x: &Vector3<f64>) -> Option<ViewHit> {
        let mu = self.params.mu;
        let cam = view.pose.transform(x);
        let z = cam.z;
        if !(z > 0.0) {
            return None;
        }
        let intr = &view.intrinsics;
        let pixel = PixelCoord::new(intr.fx * cam.x / z + intr.cx, intr.fy * cam.y / z + intr.cy);
        if !intr.contains(pixel) {
            return None;
        }
        let stencil = Bilinear::new(pixel, intr.width, intr.height);
        let r_prime = interpolate_depth(&view.depth, &stencil)?;
        let d = z - r_prime;
        if d >= mu {
            return None;
        }
        Some(ViewHit {
            stencil,
            pixel,
            cam,
            d,
            d_trunc: d.clamp(-mu, mu),
            weight: ((mu - d.abs()).min(0.0) / mu).exp(),
        })
    }

    /// Fused value at `x`.
    pub fn evaluate(&self, x: &Vector3<f64>) -> FieldValue {
        let mut out = FieldValue::unobserved(self.feature_dim, self.instance_count);
        self.evaluate_into(x, &mut out);
        out
    }

    /// Like [`evaluate`](Self::evaluate) but reuses the buffers of `out`.
    pub fn evaluate_into(&self, x: &Vector3<f64>, out: &mut FieldValue) {
        out.f.clear();
        out.f.resize(self.feature_dim, 0.0);
        out.p.clear();
        out.p.resize(self.instance_count, 0.0);
        let mut d_sum = 0.0;
        let mut v_sum = 0.0;
        for view in &self.views {
            let Some(hit) = self.hit(view, x) else {
                continue;
            };
            v_sum += 1.0;
            d_sum += hit.d_trunc;
            for ((tx, ty), bw) in hit.stencil.texels().into_iter().zip(hit.stencil.weights()) {
                let scale = hit.weight * bw;
                for (acc, &t) in out.f.iter_mut().zip(view.features.texel(tx, ty)) {
                    *acc += scale * t as f64;
                }
            }
            out.p[nearest_label(&view.masks, hit.pixel) as usize] += hit.weight;
        }
        if v_sum == 0.0 {
            out.d = 0.0;
            out.observed = false;
            return;
        }
        let norm = 1.0 / (self.params.delta + v_sum);
        out.d = d_sum * norm;
        out.f.iter_mut().for_each(|v| *v *= norm);
        out.p.iter_mut().for_each(|v| *v *= norm);
        out.observed = true;
    }

    /// Fused signed distance only; `None` where no view observes `x`.
    pub fn signed_distance(&self, x: &Vector3<f64>) -> Option<f64> {
        let mut d_sum = 0.0;
        let mut v_sum = 0.0;
        for view in &self.views {
            if let Some(hit) = self.hit(view, x) {
                v_sum += 1.0;
                d_sum += hit.d_trunc;
            }
        }
        (v_sum > 0.0).then(|| d_sum / (self.params.delta + v_sum))
    }

    /// Elementwise [`evaluate`](Self::evaluate), in input order.
    pub fn evaluate_batch(&self, xs: &[Vector3<f64>]) -> Vec<FieldValue> {
        xs.par_iter()
            .map_init(
                || FieldValue::unobserved(self.feature_dim, self.instance_count),
                |buf, x| {
                    self.evaluate_into(x, buf);
                    buf.clone()
                },
            )
            .collect()
    }

    /// Value plus the Jacobians of `d` and `f` with respect to `x`, treating the
    /// per-view `v_i` and `w_i` as locally constant.
    pub fn jacobian(&self, x: &Vector3<f64>) -> FieldJacobian {
        let n = self.feature_dim;
        let mu = self.params.mu;
        let mut value = FieldValue::unobserved(n, self.instance_count);
        let mut d_grad = Vector3::zeros();
        let mut f_jac = vec![Vector3::zeros(); n];
        let mut d_sum = 0.0;
        let mut v_sum = 0.0;
        let mut df_du = vec![0.0; n];
        let mut df_dv = vec![0.0; n];
        for view in &self.views {
            let Some(hit) = self.hit(view, x) else {
                continue;
            };
            v_sum += 1.0;
            d_sum += hit.d_trunc;
            let intr = &view.intrinsics;
            let rot = view.pose.rotation();
            let z = hit.cam.z;
            // d(u, v) / d(world x) through the camera frame
            let du_dcam = Vector3::new(intr.fx / z, 0.0, -intr.fx * hit.cam.x / (z * z));
            let dv_dcam = Vector3::new(0.0, intr.fy / z, -intr.fy * hit.cam.y / (z * z));
            let du_dx = rot.transpose() * du_dcam;
            let dv_dx = rot.transpose() * dv_dcam;

            let weights = hit.stencil.weights();
            let (wu, wv) = hit.stencil.weight_derivatives();
            df_du.iter_mut().for_each(|v| *v = 0.0);
            df_dv.iter_mut().for_each(|v| *v = 0.0);
            let mut dr_du = 0.0;
            let mut dr_dv = 0.0;
            for (k, (tx, ty)) in hit.stencil.texels().into_iter().enumerate() {
                let texel = view.features.texel(tx, ty);
                let scale = hit.weight * weights[k];
                for (j, &t) in texel.iter().enumerate() {
                    let t = t as f64;
                    value.f[j] += scale * t;
                    df_du[j] += wu[k] * t;
                    df_dv[j] += wv[k] * t;
                }
                let depth = view.depth.texel(tx, ty)[0] as f64;
                dr_du += wu[k] * depth;
                dr_dv += wv[k] * depth;
            }
            for j in 0..n {
                f_jac[j] += (du_dx * df_du[j] + dv_dx * df_dv[j]) * hit.weight;
            }
            value.p[nearest_label(&view.masks, hit.pixel) as usize] += hit.weight;
            if hit.d.abs() < mu {
                let dz_dx = rot.row(2).transpose();
                d_grad += dz_dx - (du_dx * dr_du + dv_dx * dr_dv);
            }
        }
        if v_sum > 0.0 {
            let norm = 1.0 / (self.params.delta + v_sum);
            value.d = d_sum * norm;
            value.f.iter_mut().for_each(|v| *v *= norm);
            value.p.iter_mut().for_each(|v| *v *= norm);
            value.observed = true;
            d_grad *= norm;
            f_jac.iter_mut().for_each(|g| *g *= norm);
        }
        FieldJacobian {
            value,
            d_grad,
            f_jac,
        }
    }

    /// Gradient of `||f(x) - target||_2` with respect to `x`.
    pub fn feature_gradient(&self, x: &Vector3<f64>, target: &[f64]) -> FeatureGradient {
        assert_eq!(
            target.len(),
            self.feature_dim,
            "target descriptor dimension must match the field"
        );
        let jac = self.jacobian(x);
        if !jac.value.observed {
            return FeatureGradient {
                gradient: Vector3::zeros(),
                observed: false,
            };
        }
        let residual: Vec<f64> = jac
            .value
            .f
            .iter()
            .zip(target)
            .map(|(a, b)| a - b)
            .collect();
        let norm = residual.iter().map(|r| r * r).sum::<f64>().sqrt();
        let gradient = if norm > 0.0 {
            jac.f_jac
                .iter()
                .zip(&residual)
                .fold(Vector3::zeros(), |acc, (g, r)| acc + g * *r)
                / norm
        } else {
            Vector3::zeros()
        };
        FeatureGradient {
            gradient,
            observed: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldJacobian {
    pub value: FieldValue,
    /// ∂d/∂x.
    pub d_grad: Vector3<f64>,
    /// Row `j` is ∂f_j/∂x.
    pub f_jac: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureGradient {
    pub gradient: Vector3<f64>,
    pub observed: bool,
}
