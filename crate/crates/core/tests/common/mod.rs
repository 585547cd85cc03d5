#![allow(dead_code)]

use d3fields::field::{CameraView, FieldParams, FusedField};
use d3fields::geometry::{Camera, Intrinsics};
use d3fields::synth::{
    corner_cameras, intrinsics_fov, render_views, ring_cameras, top_down_camera, Primitive,
    ProceduralFeatureSpec, RenderOptions,
};
use nalgebra::Vector3;

pub fn intrinsics(width: usize, height: usize) -> Intrinsics {
    intrinsics_fov(width, height, 60.0).unwrap()
}

/// Four elevated cameras around `target`.
pub fn four_cameras(target: Vector3<f64>, width: usize, height: usize) -> Vec<Camera> {
    corner_cameras(target, 0.5, 0.4, intrinsics(width, height)).unwrap()
}

/// Cameras covering a floating object from every side: an upper ring, a lower ring
/// and one camera each straight above and below.
pub fn surround_cameras(target: Vector3<f64>, width: usize, height: usize) -> Vec<Camera> {
    let intr = intrinsics(width, height);
    let mut cams = ring_cameras(target, 0.45, 0.3, 4, 0.0, intr).unwrap();
    cams.extend(ring_cameras(target, 0.45, -0.3, 4, std::f64::consts::FRAC_PI_4, intr).unwrap());
    cams.push(top_down_camera(target, 0.5, intr).unwrap());
    cams.push(top_down_camera(target, -0.5, intr).unwrap());
    cams
}

pub fn render(scene: &[Primitive], cams: &[Camera], spec: &ProceduralFeatureSpec) -> Vec<CameraView> {
    render_views(scene, cams, spec, &RenderOptions::default()).unwrap()
}

pub fn render_noisy(
    scene: &[Primitive],
    cams: &[Camera],
    spec: &ProceduralFeatureSpec,
    depth_noise_std: f64,
    seed: u64,
) -> Vec<CameraView> {
    let opts = RenderOptions {
        depth_noise_std,
        noise_seed: seed,
    };
    render_views(scene, cams, spec, &opts).unwrap()
}

pub fn field(views: Vec<CameraView>) -> FusedField {
    FusedField::new(views, FieldParams::default()).unwrap()
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn rms(values: &[f64]) -> f64 {
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

/// Rotation angle of `r`, degrees.
pub fn rotation_angle_deg(r: &nalgebra::Matrix3<f64>) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}
