//! Synthetic ground truth: exact depth, procedural descriptors and instance masks for
//! scenes made of spheres, boxes and ground planes, plus the analytic signed distance.
//!
//! Descriptors are an affine map of the hit point's object-local coordinates,
//! normalised to `[-1, 1]^3` by the primitive's extent. The map is shared by all
//! instances of a category, so corresponding object-local points on two instances
//! carry identical descriptors.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{CameraView, InstanceMasks, NO_RETURN};
pub use crate::geometry::Camera;
use crate::geometry::{axis_angle, GeometryError, ImageMap, Intrinsics, PixelCoord, Pose};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid primitive: {0}")]
    InvalidPrimitive(String),
    #[error("at least one camera is required")]
    NoCameras,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
    /// Half-space `z_local <= 0`; `half_size` only scales the descriptor coordinates.
    Plane { half_size: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    /// Maps world points into the object-local frame.
    pub pose: Pose,
    pub category: u32,
    /// Global instance id, at least 1; 0 is reserved for background.
    pub instance: u8,
}

impl Primitive {
    pub fn new(shape: Shape, pose: Pose, category: u32, instance: u8) -> Result<Self, SynthError> {
        let ok = match shape {
            Shape::Sphere { radius } => radius > 0.0 && radius.is_finite(),
            Shape::Box { half_extents } => half_extents.iter().all(|h| *h > 0.0 && h.is_finite()),
            Shape::Plane { half_size } => half_size > 0.0 && half_size.is_finite(),
        };
        if !ok {
            return Err(SynthError::InvalidPrimitive(format!(
                "non-positive size in {shape:?}"
            )));
        }
        if instance == 0 {
            return Err(SynthError::InvalidPrimitive(
                "instance id 0 is reserved for background".into(),
            ));
        }
        Ok(Self {
            shape,
            pose,
            category,
            instance,
        })
    }

    pub fn sphere(center: Vector3<f64>, radius: f64, category: u32, instance: u8) -> Result<Self, SynthError> {
        Self::new(
            Shape::Sphere { radius },
            Pose::new(Matrix3::identity(), -center)?,
            category,
            instance,
        )
    }

    /// Box with object-to-world rotation `rotation` centred at `center`.
    pub fn cuboid(
        center: Vector3<f64>,
        rotation: Matrix3<f64>,
        half_extents: [f64; 3],
        category: u32,
        instance: u8,
    ) -> Result<Self, SynthError> {
        let rt = rotation.transpose();
        Self::new(
            Shape::Box { half_extents },
            Pose::new(rt, -(rt * center))?,
            category,
            instance,
        )
    }

    /// Horizontal ground plane at height `z`.
    pub fn ground(z: f64, half_size: f64, category: u32, instance: u8) -> Result<Self, SynthError> {
        Self::new(
            Shape::Plane { half_size },
            Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -z))?,
            category,
            instance,
        )
    }

    pub fn to_local(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.pose.transform(x)
    }

    pub fn to_world(&self, local: &Vector3<f64>) -> Vector3<f64> {
        self.pose.inverse_transform(local)
    }

    /// Object-to-world placement of the primitive's local origin.
    pub fn center(&self) -> Vector3<f64> {
        self.pose.center()
    }

    /// Returns a copy moved by the world-frame rigid motion `x -> rotation * x + translation`.
    pub fn moved(&self, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Self {
        let motion = Pose::new(*rotation, *translation).expect("motion must be a proper rotation");
        Self {
            pose: self.pose.compose(&motion.inverse()),
            ..self.clone()
        }
    }

    /// World points on the outline of the local `z = 0` cross-section, about `spacing`
    /// apart. Empty for planes.
    pub fn footprint(&self, spacing: f64) -> Vec<Vector3<f64>> {
        let local: Vec<Vector3<f64>> = match self.shape {
            Shape::Sphere { radius } => {
                let n = ((std::f64::consts::TAU * radius / spacing).ceil() as usize).max(8);
                (0..n)
                    .map(|k| {
                        let a = std::f64::consts::TAU * k as f64 / n as f64;
                        Vector3::new(radius * a.cos(), radius * a.sin(), 0.0)
                    })
                    .collect()
            }
            Shape::Box { half_extents: [hx, hy, _] } => {
                let nx = ((2.0 * hx / spacing).ceil() as usize).max(1);
                let ny = ((2.0 * hy / spacing).ceil() as usize).max(1);
                let mut pts = Vec::with_capacity(2 * (nx + ny));
                for i in 0..nx {
                    let x = -hx + 2.0 * hx * i as f64 / nx as f64;
                    pts.push(Vector3::new(x, -hy, 0.0));
                    pts.push(Vector3::new(-x, hy, 0.0));
                }
                for j in 0..ny {
                    let y = -hy + 2.0 * hy * j as f64 / ny as f64;
                    pts.push(Vector3::new(hx, y, 0.0));
                    pts.push(Vector3::new(-hx, -y, 0.0));
                }
                pts
            }
            Shape::Plane { .. } => Vec::new(),
        };
        local.iter().map(|p| self.to_world(p)).collect()
    }

    /// Signed distance in metres, negative inside.
    pub fn sdf(&self, x: &Vector3<f64>) -> f64 {
        let p = self.to_local(x);
        match self.shape {
            Shape::Sphere { radius } => p.norm() - radius,
            Shape::Box { half_extents } => {
                let q = p.abs() - Vector3::from(half_extents);
                q.sup(&Vector3::zeros()).norm() + q.max().min(0.0)
            }
            Shape::Plane { .. } => p.z,
        }
    }

    /// Ray parameter of the nearest forward intersection of `origin + t * dir` (world).
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let o = self.to_local(origin);
        let d = self.pose.rotation() * dir;
        const EPS: f64 = 1e-12;
        match self.shape {
            Shape::Sphere { radius } => {
                let a = d.dot(&d);
                let b = o.dot(&d);
                let c = o.dot(&o) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t0 = (-b - s) / a;
                let t1 = (-b + s) / a;
                [t0, t1].into_iter().find(|t| *t > EPS)
            }
            Shape::Box { half_extents } => {
                let mut tmin = f64::NEG_INFINITY;
                let mut tmax = f64::INFINITY;
                for k in 0..3 {
                    let h = half_extents[k];
                    if d[k].abs() < EPS {
                        if o[k].abs() > h {
                            return None;
                        }
                        continue;
                    }
                    let a = (-h - o[k]) / d[k];
                    let b = (h - o[k]) / d[k];
                    tmin = tmin.max(a.min(b));
                    tmax = tmax.min(a.max(b));
                }
                if tmax < tmin || tmax <= EPS {
                    return None;
                }
                (tmin > EPS).then_some(tmin)
            }
            Shape::Plane { .. } => {
                if d.z.abs() < EPS {
                    return None;
                }
                let t = -o.z / d.z;
                (t > EPS).then_some(t)
            }
        }
    }

    /// Object-local coordinates scaled into `[-1, 1]^3`.
    pub fn normalized_local(&self, x: &Vector3<f64>) -> Vector3<f64> {
        let p = self.to_local(x);
        let q = match self.shape {
            Shape::Sphere { radius } => p / radius,
            Shape::Box { half_extents } => p.component_div(&Vector3::from(half_extents)),
            Shape::Plane { half_size } => Vector3::new(p.x / half_size, p.y / half_size, 0.0),
        };
        q.map(|c| c.clamp(-1.0, 1.0))
    }
}

/// Seeded per-category affine descriptor maps `R^3 -> R^N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProceduralFeatureSpec {
    pub dim: usize,
    pub seed: u64,
    #[serde(default)]
    pub noise_std: f64,
}

impl Default for ProceduralFeatureSpec {
    fn default() -> Self {
        Self {
            dim: 32,
            seed: 0,
            noise_std: 0.0,
        }
    }
}

/// Rows `[w_x, w_y, w_z, bias]`, one per descriptor channel.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryProjection {
    rows: Vec<[f64; 4]>,
}

impl CategoryProjection {
    pub fn apply(&self, q: &Vector3<f64>) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r[0] * q.x + r[1] * q.y + r[2] * q.z + r[3])
            .collect()
    }
}

impl ProceduralFeatureSpec {
    pub fn projection(&self, category: u32) -> CategoryProjection {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed ^ (category as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let rows = (0..self.dim)
            .map(|_| {
                let mut r = [0.0; 4];
                for v in r.iter_mut() {
                    *v = rng.sample::<f64, _>(StandardNormal);
                }
                r
            })
            .collect();
        CategoryProjection { rows }
    }

    /// Noise-free descriptor of a world point on `prim`.
    pub fn feature(&self, prim: &Primitive, x: &Vector3<f64>) -> Vec<f64> {
        self.projection(prim.category).apply(&prim.normalized_local(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RenderOptions {
    #[serde(default)]
    pub depth_noise_std: f64,
    #[serde(default)]
    pub noise_seed: u64,
}

/// Nearest hit along a world ray: `(t, primitive index)`; ties go to the lower instance id.
pub fn cast_ray(scene: &[Primitive], origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (i, prim) in scene.iter().enumerate() {
        if let Some(t) = prim.intersect(origin, dir) {
            let better = match best {
                None => true,
                Some((bt, bi)) => t < bt || (t == bt && prim.instance < scene[bi].instance),
            };
            if better {
                best = Some((t, i));
            }
        }
    }
    best
}

/// Number of mask channels needed for `scene` (background included).
pub fn instance_count(scene: &[Primitive]) -> usize {
    scene.iter().map(|p| p.instance as usize).max().unwrap_or(0) + 1
}

/// Writes rendered views as a scene directory (see [`crate::io`]).
pub fn write_scene_dir(
    views: &[CameraView],
    params: crate::field::FieldParams,
    path: &std::path::Path,
) -> Result<(), crate::io::IoError> {
    crate::io::write_scene(path, views, params)
}

pub fn render_views(
    scene: &[Primitive],
    cameras: &[Camera],
    spec: &ProceduralFeatureSpec,
    options: &RenderOptions,
) -> Result<Vec<CameraView>, SynthError> {
    if cameras.is_empty() {
        return Err(SynthError::NoCameras);
    }
    let m = instance_count(scene);
    let projections: Vec<CategoryProjection> =
        scene.iter().map(|p| spec.projection(p.category)).collect();
    cameras
        .iter()
        .enumerate()
        .map(|(vi, cam)| render_view(scene, &projections, cam, spec, options, vi, m))
        .collect()
}

fn render_view(
    scene: &[Primitive],
    projections: &[CategoryProjection],
    cam: &Camera,
    spec: &ProceduralFeatureSpec,
    options: &RenderOptions,
    view_index: usize,
    instance_count: usize,
) -> Result<CameraView, SynthError> {
    let intr = cam.intrinsics;
    intr.validate()?;
    let (w, h, n) = (intr.width, intr.height, spec.dim);
    let origin = cam.pose.center();
    let rt = cam.pose.rotation().transpose();
    let depth_noise = Normal::new(0.0, options.depth_noise_std.max(0.0)).expect("finite std");
    let feat_noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite std");

    let rows: Vec<(Vec<f32>, Vec<f32>, Vec<u8>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                options.noise_seed
                    ^ ((view_index as u64) << 32 | y as u64).wrapping_mul(0xD1B5_4A32_D192_ED03),
            );
            let mut depth = vec![NO_RETURN; w];
            let mut feat = vec![0.0f32; w * n];
            let mut labels = vec![0u8; w];
            for x in 0..w {
                let dir = rt * intr.ray(PixelCoord::new(x as f64, y as f64));
                let Some((t, pi)) = cast_ray(scene, &origin, &dir) else {
                    continue;
                };
                let prim = &scene[pi];
                let hit = origin + dir * t;
                let mut z = t;
                if options.depth_noise_std > 0.0 {
                    z += depth_noise.sample(&mut rng);
                }
                depth[x] = (z as f32).max(f32::MIN_POSITIVE);
                labels[x] = prim.instance;
                let f = projections[pi].apply(&prim.normalized_local(&hit));
                for (o, v) in feat[x * n..(x + 1) * n].iter_mut().zip(f) {
                    let noise = if spec.noise_std > 0.0 {
                        feat_noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    *o = (v + noise) as f32;
                }
            }
            (depth, feat, labels)
        })
        .collect();

    let mut depth = Vec::with_capacity(w * h);
    let mut features = Vec::with_capacity(w * h * n);
    let mut labels = Vec::with_capacity(w * h);
    for (d, f, l) in rows {
        depth.extend(d);
        features.extend(f);
        labels.extend(l);
    }
    Ok(CameraView {
        intrinsics: intr,
        pose: cam.pose,
        depth: ImageMap::new(w, h, 1, depth)?,
        features: ImageMap::new(w, h, n, features)?,
        masks: InstanceMasks::from_labels(ImageMap::new(w, h, 1, labels)?, instance_count)
            .map_err(|e| SynthError::InvalidPrimitive(e.to_string()))?,
    })
}

/// Exact signed distance to the union of `scene` and the id of the nearest
/// primitive's instance; ties go to the lower instance id. `(inf, 0)` for an empty scene.
pub fn analytic_sdf(scene: &[Primitive], x: &Vector3<f64>) -> (f64, u8) {
    let mut best = (f64::INFINITY, 0u8);
    for prim in scene {
        let d = prim.sdf(x);
        if d < best.0 || (d == best.0 && prim.instance < best.1) {
            best = (d, prim.instance);
        }
    }
    best
}

/// `count` cameras on a circle of horizontal radius `radius` at height `height`
/// above `target`, all looking at `target`. The first sits at azimuth `phase`.
pub fn ring_cameras(
    target: Vector3<f64>,
    radius: f64,
    height: f64,
    count: usize,
    phase: f64,
    intrinsics: Intrinsics,
) -> Result<Vec<Camera>, SynthError> {
    (0..count)
        .map(|k| {
            let a = phase + k as f64 * std::f64::consts::TAU / count as f64;
            let eye = target + Vector3::new(radius * a.cos(), radius * a.sin(), height);
            Ok(Camera {
                pose: Pose::look_at(eye, target, Vector3::z())?,
                intrinsics,
            })
        })
        .collect()
}

/// Four elevated cameras at the corners of a square workspace.
pub fn corner_cameras(
    target: Vector3<f64>,
    radius: f64,
    height: f64,
    intrinsics: Intrinsics,
) -> Result<Vec<Camera>, SynthError> {
    ring_cameras(target, radius, height, 4, std::f64::consts::FRAC_PI_4, intrinsics)
}

/// Straight-down camera above `target` at `height`; image x follows world +x.
pub fn top_down_camera(
    target: Vector3<f64>,
    height: f64,
    intrinsics: Intrinsics,
) -> Result<Camera, SynthError> {
    let eye = target + Vector3::new(0.0, 0.0, height);
    Ok(Camera {
        pose: Pose::look_at(eye, target, Vector3::y())?,
        intrinsics,
    })
}

/// Intrinsics for a `width x height` image with the given horizontal field of view.
pub fn intrinsics_fov(width: usize, height: usize, hfov_deg: f64) -> Result<Intrinsics, SynthError> {
    let f = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
    Ok(Intrinsics::new(
        f,
        f,
        0.5 * (width - 1) as f64,
        0.5 * (height - 1) as f64,
        width,
        height,
    )?)
}

/// JSON scene description consumed by the `synth` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub primitives: Vec<PrimitiveDescription>,
    pub cameras: Vec<CameraDescription>,
    #[serde(default)]
    pub features: ProceduralFeatureSpec,
    #[serde(default)]
    pub render: RenderOptions,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_mu() -> f64 {
    crate::field::DEFAULT_MU
}

fn default_delta() -> f64 {
    crate::field::DEFAULT_DELTA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveDescription {
    #[serde(flatten)]
    pub shape: Shape,
    pub center: [f64; 3],
    /// Object-to-world rotation as an axis-angle vector (radians).
    #[serde(default)]
    pub rotation: [f64; 3],
    #[serde(default)]
    pub category: u32,
    pub instance: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraDescription {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
}

fn default_up() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

impl PrimitiveDescription {
    pub fn build(&self) -> Result<Primitive, SynthError> {
        let axis = Vector3::from(self.rotation);
        let angle = axis.norm();
        let rot = if angle > 0.0 {
            axis_angle(&axis, angle)
        } else {
            Matrix3::identity()
        };
        let center = Vector3::from(self.center);
        let rt = rot.transpose();
        Primitive::new(self.shape, Pose::new(rt, -(rt * center))?, self.category, self.instance)
    }
}

impl CameraDescription {
    pub fn build(&self) -> Result<Camera, SynthError> {
        Ok(Camera {
            pose: Pose::look_at(
                Vector3::from(self.eye),
                Vector3::from(self.target),
                Vector3::from(self.up),
            )?,
            intrinsics: intrinsics_fov(self.width, self.height, self.hfov_deg)?,
        })
    }
}

impl SceneDescription {
    pub fn primitives(&self) -> Result<Vec<Primitive>, SynthError> {
        let prims = self
            .primitives
            .iter()
            .map(PrimitiveDescription::build)
            .collect::<Result<Vec<_>, _>>()?;
        let mut ids: Vec<u8> = prims.iter().map(|p| p.instance).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(SynthError::InvalidPrimitive("duplicate instance id".into()));
        }
        Ok(prims)
    }

    pub fn cameras(&self) -> Result<Vec<Camera>, SynthError> {
        self.cameras.iter().map(CameraDescription::build).collect()
    }

    pub fn render(&self) -> Result<Vec<CameraView>, SynthError> {
        render_views(&self.primitives()?, &self.cameras()?, &self.features, &self.render)
    }
}

/// Rotation about a random axis by an angle drawn uniformly from `[-max_angle, max_angle]`.
pub fn random_rotation<R: Rng>(rng: &mut R, max_angle: f64) -> Matrix3<f64> {
    let axis = loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        if v.norm() > 1e-6 {
            break v;
        }
    };
    axis_angle(&axis, rng.random_range(-max_angle..=max_angle))
}
