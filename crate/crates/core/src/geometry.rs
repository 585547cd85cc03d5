//! Pinhole cameras, rigid poses and sub-pixel sampling of dense image maps.
//!
//! Conventions used throughout the crate:
//! - `Pose` maps world points into the camera frame (`x_cam = R * x_world + t`).
//! - Camera frame is x right, y down, z forward; depth is the camera-frame z.
//! - Texel `(u, v)` is centred at continuous coordinate `(u, v)`, `u` is the column.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("map shape {width}x{height}x{channels} does not match {len} stored values")]
    MapShape {
        width: usize,
        height: usize,
        channels: usize,
        len: usize,
    },
}

const ORTHO_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width < 2 || self.height < 2 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "image must be at least 2x2, got {}x{}",
                self.width, self.height
            )));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Whether a continuous pixel lies inside the sampled lattice `[0, W-1] x [0, H-1]`.
    pub fn contains(&self, pixel: PixelCoord) -> bool {
        pixel.u >= 0.0
            && pixel.v >= 0.0
            && pixel.u <= (self.width - 1) as f64
            && pixel.v <= (self.height - 1) as f64
    }

    /// Camera-frame direction with unit z through a pixel.
    pub fn ray(&self, pixel: PixelCoord) -> Vector3<f64> {
        Vector3::new(
            (pixel.u - self.cx) / self.fx,
            (pixel.v - self.cy) / self.fy,
            1.0,
        )
    }
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !err.is_finite() || err > ORTHO_TOL {
            return Err(GeometryError::InvalidPose(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {err:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(GeometryError::InvalidPose(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        if !translation.iter().all(|t| t.is_finite()) {
            return Err(GeometryError::InvalidPose("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`; `up` picks the roll (image y points away from it).
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(GeometryError::InvalidPose("eye and target coincide".into()));
        }
        let z = forward.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(GeometryError::InvalidPose(
                "up vector is parallel to the viewing direction".into(),
            ));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Self::new(rotation, translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn inverse_transform(&self, x_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (x_cam - self.translation)
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

/// A calibrated camera: world-to-camera pose plus intrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
}

impl Camera {
    pub fn project(&self, x: &Vector3<f64>) -> Option<Projection> {
        project(x, &self.pose, &self.intrinsics)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &PixelCoord) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: PixelCoord,
    /// Camera-frame z of the projected point.
    pub depth: f64,
    pub in_bounds: bool,
}

/// Perspective projection of a world point. `None` means the point is on or behind
/// the camera plane (z <= 0).
pub fn project(x: &Vector3<f64>, pose: &Pose, intr: &Intrinsics) -> Option<Projection> {
    project_camera(&pose.transform(x), intr)
}

pub fn project_camera(x_cam: &Vector3<f64>, intr: &Intrinsics) -> Option<Projection> {
    let z = x_cam.z;
    if !(z > 0.0) {
        return None;
    }
    let pixel = PixelCoord::new(
        intr.fx * x_cam.x / z + intr.cx,
        intr.fy * x_cam.y / z + intr.cy,
    );
    Some(Projection {
        pixel,
        depth: z,
        in_bounds: intr.contains(pixel),
    })
}

pub fn back_project(pixel: PixelCoord, depth: f64, pose: &Pose, intr: &Intrinsics) -> Vector3<f64> {
    pose.inverse_transform(&(intr.ray(pixel) * depth))
}

/// Dense row-major `height x width x channels` map.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMap<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Copy> ImageMap<T> {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<T>,
    ) -> Result<Self, GeometryError> {
        if width.checked_mul(height).and_then(|n| n.checked_mul(channels)) != Some(data.len()) {
            return Err(GeometryError::MapShape {
                width,
                height,
                channels,
                len: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: T) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn texel(&self, x: usize, y: usize) -> &[T] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn texel_mut(&mut self, x: usize, y: usize) -> &mut [T] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn same_shape<U>(&self, other: &ImageMap<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Bilinear interpolation stencil for a clamped continuous pixel.
///
/// Texels are `(x0, y0)`, `(x0+1, y0)`, `(x0, y0+1)`, `(x0+1, y0+1)` with
/// fractional offsets `ax`, `ay` in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bilinear {
    pub x0: usize,
    pub y0: usize,
    pub ax: f64,
    pub ay: f64,
}

impl Bilinear {
    /// Requires `width >= 2` and `height >= 2`.
    #[inline]
    pub fn new(pixel: PixelCoord, width: usize, height: usize) -> Self {
        let (x0, ax) = axis_stencil(pixel.u, width);
        let (y0, ay) = axis_stencil(pixel.v, height);
        Self { x0, y0, ax, ay }
    }

    /// Weights in texel order `[00, 10, 01, 11]`.
    #[inline]
    pub fn weights(&self) -> [f64; 4] {
        let (ax, ay) = (self.ax, self.ay);
        [
            (1.0 - ax) * (1.0 - ay),
            ax * (1.0 - ay),
            (1.0 - ax) * ay,
            ax * ay,
        ]
    }

    /// Derivatives of `weights()` with respect to `u` and `v`.
    #[inline]
    pub fn weight_derivatives(&self) -> ([f64; 4], [f64; 4]) {
        let (ax, ay) = (self.ax, self.ay);
        (
            [-(1.0 - ay), 1.0 - ay, -ay, ay],
            [-(1.0 - ax), -ax, 1.0 - ax, ax],
        )
    }

    #[inline]
    pub fn texels(&self) -> [(usize, usize); 4] {
        let (x0, y0) = (self.x0, self.y0);
        [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)]
    }
}

#[inline]
fn axis_stencil(coord: f64, len: usize) -> (usize, f64) {
    let max = (len - 1) as f64;
    let c = if coord.is_nan() { 0.0 } else { coord.clamp(0.0, max) };
    let i0 = (c.floor() as usize).min(len - 2);
    (i0, c - i0 as f64)
}

/// Bilinear interpolation of every channel; coordinates are clamped to the lattice.
pub fn bilinear_sample<T: Copy + Into<f64>>(map: &ImageMap<T>, pixel: PixelCoord) -> Vec<f64> {
    let mut out = vec![0.0; map.channels()];
    bilinear_sample_into(map, pixel, &mut out);
    out
}

pub fn bilinear_sample_into<T: Copy + Into<f64>>(
    map: &ImageMap<T>,
    pixel: PixelCoord,
    out: &mut [f64],
) {
    let stencil = Bilinear::new(pixel, map.width(), map.height());
    out.iter_mut().for_each(|o| *o = 0.0);
    for ((x, y), w) in stencil.texels().into_iter().zip(stencil.weights()) {
        for (o, &t) in out.iter_mut().zip(map.texel(x, y)) {
            *o += w * t.into();
        }
    }
}

/// Value of the texel nearest to `pixel`, clamped to the image.
pub fn nearest_sample<T: Copy>(map: &ImageMap<T>, pixel: PixelCoord) -> &[T] {
    let (x, y) = nearest_texel(pixel, map.width(), map.height());
    map.texel(x, y)
}

#[inline]
pub fn nearest_texel(pixel: PixelCoord, width: usize, height: usize) -> (usize, usize) {
    let clamp = |c: f64, len: usize| -> usize {
        if c.is_nan() {
            0
        } else {
            c.round().clamp(0.0, (len - 1) as f64) as usize
        }
    };
    (clamp(pixel.u, width), clamp(pixel.v, height))
}

/// Rotation about a unit axis by `angle` radians.
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle).into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn intr() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let p = project(&Vector3::new(0.0, 0.0, 2.0), &Pose::identity(), &intr()).unwrap();
        assert_eq!(p.pixel, PixelCoord::new(320.0, 240.0));
        assert_eq!(p.depth, 2.0);
        assert!(p.in_bounds);
    }

    #[test]
    fn behind_camera_is_rejected() {
        assert!(project(&Vector3::new(0.0, 0.0, -1.0), &Pose::identity(), &intr()).is_none());
        assert!(project(&Vector3::new(0.3, 0.0, 0.0), &Pose::identity(), &intr()).is_none());
    }

    #[test]
    fn off_axis_projection() {
        let p = project(&Vector3::new(0.1, -0.2, 1.0), &Pose::identity(), &intr()).unwrap();
        assert_relative_eq!(p.pixel.u, 370.0, epsilon = 1e-12);
        assert_relative_eq!(p.pixel.v, 140.0, epsilon = 1e-12);
        assert_eq!(p.depth, 1.0);
    }

    #[test]
    fn out_of_frame_is_flagged_not_rejected() {
        let p = project(&Vector3::new(1.0, 0.0, 1.0), &Pose::identity(), &intr()).unwrap();
        assert!(!p.in_bounds);
        assert_relative_eq!(p.pixel.u, 820.0);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 1.0, -0.1, 4, 4).is_err());
    }

    #[test]
    fn pose_validation() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = -1.0;
        assert!(Pose::new(r, Vector3::zeros()).is_err());
        assert!(Pose::new(Matrix3::identity() * 2.0, Vector3::zeros()).is_err());
    }

    #[test]
    fn look_at_points_z_at_target() {
        let eye = Vector3::new(0.5, -0.4, 0.6);
        let pose = Pose::look_at(eye, Vector3::zeros(), Vector3::z()).unwrap();
        let p = project(&Vector3::zeros(), &pose, &intr()).unwrap();
        assert_relative_eq!(p.pixel.u, 320.0, epsilon = 1e-9);
        assert_relative_eq!(p.pixel.v, 240.0, epsilon = 1e-9);
        assert_relative_eq!(p.depth, eye.norm(), epsilon = 1e-12);
        assert_relative_eq!(pose.center(), eye, epsilon = 1e-12);
        // world up projects towards smaller v
        let up = project(&Vector3::new(0.0, 0.0, 0.05), &pose, &intr()).unwrap();
        assert!(up.pixel.v < 240.0);
    }

    fn ramp_map(w: usize, h: usize) -> ImageMap<f64> {
        let mut data = Vec::with_capacity(w * h * 2);
        for y in 0..h {
            for x in 0..w {
                data.push(3.0 * x as f64 - 2.0 * y as f64 + 1.0);
                data.push(0.5 * x as f64 + 0.25 * y as f64);
            }
        }
        ImageMap::new(w, h, 2, data).unwrap()
    }

    #[test]
    fn bilinear_is_exact_on_lattice() {
        let m = ramp_map(8, 7);
        let v = bilinear_sample(&m, PixelCoord::new(3.0, 5.0));
        assert_eq!(v, m.texel(3, 5).to_vec());
    }

    #[test]
    fn bilinear_cell_center_is_average() {
        let m = ImageMap::new(2, 2, 1, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_relative_eq!(bilinear_sample(&m, PixelCoord::new(0.5, 0.5))[0], 2.5);
    }

    #[test]
    fn bilinear_quarter_offset() {
        let m = ImageMap::new(2, 2, 1, vec![10.0f32, 20.0, 10.0, 20.0]).unwrap();
        assert_relative_eq!(bilinear_sample(&m, PixelCoord::new(0.25, 0.0))[0], 12.5);
    }

    #[test]
    fn bilinear_clamps_outside() {
        let m = ImageMap::new(2, 2, 1, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_relative_eq!(bilinear_sample(&m, PixelCoord::new(-3.0, -1.0))[0], 1.0);
        assert_relative_eq!(bilinear_sample(&m, PixelCoord::new(9.0, 9.0))[0], 4.0);
    }

    #[test]
    fn nearest_rounds_and_clamps() {
        let (w, h) = (6, 8);
        let data: Vec<u32> = (0..(w * h) as u32).collect();
        let m = ImageMap::new(w, h, 1, data).unwrap();
        assert_eq!(nearest_sample(&m, PixelCoord::new(3.4, 5.6))[0], (6 * w + 3) as u32);
        assert_eq!(nearest_sample(&m, PixelCoord::new(-0.3, 0.0))[0], 0);
        let last = nearest_sample(&m, PixelCoord::new(w as f64 - 0.6, h as f64 - 0.6))[0];
        assert_eq!(last, (w * h - 1) as u32);
    }

    #[test]
    fn map_shape_is_checked() {
        assert!(ImageMap::new(2, 2, 3, vec![0.0f32; 11]).is_err());
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            0.0f64..std::f64::consts::PI,
            prop::array::uniform3(-2.0f64..2.0),
        )
            .prop_filter_map("degenerate axis", |(axis, angle, t)| {
                let axis = Vector3::from(axis);
                (axis.norm() > 1e-3)
                    .then(|| Pose::new(axis_angle(&axis, angle), Vector3::from(t)).unwrap())
            })
    }

    proptest! {
        #[test]
        fn back_projection_round_trip(
            pose in arb_pose(),
            xc in prop::array::uniform3(-1.0f64..1.0),
            z in 0.05f64..5.0,
        ) {
            let intr = intr();
            let cam = Vector3::new(xc[0], xc[1], z);
            let x = pose.inverse_transform(&cam);
            let p = project(&x, &pose, &intr).unwrap();
            let back = back_project(p.pixel, p.depth, &pose, &intr);
            prop_assert!((back - x).norm() < 1e-9);
        }

        #[test]
        fn projection_equivariance(
            pose in arb_pose(),
            motion in arb_pose(),
            x in prop::array::uniform3(-1.0f64..1.0),
        ) {
            let intr = intr();
            let x = Vector3::from(x);
            let moved_pose = pose.compose(&motion);
            let moved_x = motion.inverse().transform(&x);
            match (project(&x, &pose, &intr), project(&moved_x, &moved_pose, &intr)) {
                (Some(a), Some(b)) => {
                    prop_assert!(a.pixel.distance(&b.pixel) < 1e-6 * (1.0 + a.pixel.u.abs() + a.pixel.v.abs()));
                    prop_assert!((a.depth - b.depth).abs() < 1e-9);
                }
                (None, None) => {}
                (a, b) => prop_assert!(
                    a.map_or(0.0, |p| p.depth).abs() < 1e-9 || b.map_or(0.0, |p| p.depth).abs() < 1e-9
                ),
            }
        }

        #[test]
        fn bilinear_reproduces_linear_ramps(u in 0.0f64..7.0, v in 0.0f64..6.0) {
            let m = ramp_map(8, 7);
            let s = bilinear_sample(&m, PixelCoord::new(u, v));
            prop_assert!((s[0] - (3.0 * u - 2.0 * v + 1.0)).abs() < 1e-12);
            prop_assert!((s[1] - (0.5 * u + 0.25 * v)).abs() < 1e-12);
        }
    }
}
