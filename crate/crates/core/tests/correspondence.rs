mod common;

use d3fields::correspondence::{goal_points, pair_instances, CorrespondenceError, GoalSpec, DEFAULT_SHARPNESS};
use d3fields::field::{CameraView, FusedField};
use d3fields::geometry::{Camera, ImageMap, PixelCoord};
use d3fields::mesh::GridSpec;
use d3fields::synth::{cast_ray, Primitive, ProceduralFeatureSpec};
use d3fields::tracking::{sample_keypoints, KeypointSet};
use nalgebra::{Matrix3, Vector3};

fn scene() -> Vec<Primitive> {
    vec![
        Primitive::sphere(Vector3::new(-0.06, 0.0, 0.0), 0.04, 0, 1).unwrap(),
        Primitive::cuboid(Vector3::new(0.07, 0.01, 0.0), Matrix3::identity(), [0.03, 0.025, 0.02], 1, 2).unwrap(),
    ]
}

fn workspace(scene: &[Primitive]) -> (FusedField, Vec<CameraView>) {
    let cams = common::surround_cameras(Vector3::zeros(), 240, 180);
    let views = common::render(scene, &cams, &ProceduralFeatureSpec::default());
    (common::field(views.clone()), views)
}

fn keypoints(field: &FusedField, instance: u8) -> KeypointSet {
    let grid = GridSpec::covering(Vector3::new(-0.11, -0.06, -0.06), Vector3::new(0.11, 0.06, 0.06), 0.003).unwrap();
    sample_keypoints(field, &grid, instance, 25, 0.002).unwrap()
}

fn goal_from(view: &CameraView, sharpness: f64) -> GoalSpec {
    GoalSpec {
        features: view.features.clone(),
        masks: Some(view.masks.labels().clone()),
        sharpness,
        camera: Camera {
            pose: view.pose,
            intrinsics: view.intrinsics,
        },
    }
}

#[test]
fn keypoints_find_themselves_in_a_workspace_view() {
    let scene = scene();
    let (field, views) = workspace(&scene);
    let kps = keypoints(&field, 1);
    let goal = goal_from(&views[0], DEFAULT_SHARPNESS);
    let out = goal_points(&kps, &goal, None, false).unwrap();
    let cam = goal.camera;
    let mut errs = Vec::new();
    for (p, g) in kps.points.iter().zip(&out.points) {
        let proj = cam.project(p).unwrap();
        // only keypoints this view actually sees
        let dir = p - cam.pose.center();
        let hit = cast_ray(&scene, &cam.pose.center(), &dir.normalize());
        if !proj.in_bounds || hit.is_none_or(|(t, _)| t < dir.norm() - 2e-3) {
            continue;
        }
        errs.push(proj.pixel.distance(g));
    }
    assert!(errs.len() >= 5, "{} visible keypoints", errs.len());
    let m = common::median(&mut errs);
    assert!(m <= 1.0, "median {m} px");
}

fn mask_bounds(masks: &ImageMap<u8>, id: u8) -> (f64, f64, f64, f64) {
    let w = masks.width();
    let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (i, _) in masks.data().iter().enumerate().filter(|(_, &l)| l == id) {
        let (u, v) = ((i % w) as f64, (i / w) as f64);
        b = (b.0.min(u), b.1.min(v), b.2.max(u), b.3.max(v));
    }
    b
}

#[test]
fn goal_points_stay_inside_the_selected_instance() {
    let scene = scene();
    let (field, views) = workspace(&scene);
    let goal = goal_from(&views[1], DEFAULT_SHARPNESS);
    let masks = goal.masks.clone().unwrap();
    for id in [1u8, 2] {
        let kps = keypoints(&field, id);
        let (u0, v0, u1, v1) = mask_bounds(&masks, id);
        for sel in [Some(id), None] {
            let out = goal_points(&kps, &goal, sel, true).unwrap();
            for p in &out.points {
                assert!((u0..=u1).contains(&p.u) && (v0..=v1).contains(&p.v), "{p:?} outside instance {id}");
            }
            for map in out.heatmaps.as_ref().unwrap() {
                for (&b, &l) in map.data().iter().zip(masks.data()) {
                    if l != id {
                        assert_eq!(b, 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn instances_pair_by_category_after_rearrangement() {
    let scene = scene();
    let (field, _) = workspace(&scene);
    let sets = [keypoints(&field, 1), keypoints(&field, 2)];
    // the goal swaps the objects' places and their mask ids
    let moved = vec![
        Primitive::sphere(Vector3::new(0.06, 0.0, 0.0), 0.04, 0, 2).unwrap(),
        Primitive::cuboid(Vector3::new(-0.07, 0.0, 0.0), Matrix3::identity(), [0.03, 0.025, 0.02], 1, 1).unwrap(),
    ];
    let (_, goal_views) = workspace(&moved);
    let pairs = pair_instances(&sets, &goal_from(&goal_views[0], DEFAULT_SHARPNESS)).unwrap();
    assert_eq!(pairs.len(), 2);
    assert_eq!((pairs[0].workspace, pairs[0].goal), (1, Some(2)));
    assert_eq!((pairs[1].workspace, pairs[1].goal), (2, Some(1)));
    assert!(pairs.iter().all(|p| p.similarity > 0.5));
}

fn flat_goal(masks: Vec<u8>) -> GoalSpec {
    let n = masks.len();
    let view = &common::render(
        &scene(),
        &common::four_cameras(Vector3::zeros(), 8, 6),
        &ProceduralFeatureSpec { dim: 2, ..Default::default() },
    )[0];
    GoalSpec {
        features: ImageMap::new(n, 1, 2, vec![0.6; 2 * n]).unwrap(),
        masks: Some(ImageMap::new(n, 1, 1, masks).unwrap()),
        sharpness: DEFAULT_SHARPNESS,
        camera: Camera {
            pose: view.pose,
            intrinsics: view.intrinsics,
        },
    }
}

fn flat_set(instance: u8) -> KeypointSet {
    let pts = vec![Vector3::zeros(), Vector3::x(), Vector3::y()];
    KeypointSet::new(pts, vec![vec![1.0, 1.0]; 3], instance).unwrap()
}

#[test]
fn equal_similarities_pair_lower_ids_first() {
    let goal = flat_goal(vec![5, 3, 0, 5]);
    let pairs = pair_instances(&[flat_set(2), flat_set(1)], &goal).unwrap();
    assert_eq!((pairs[0].workspace, pairs[0].goal), (2, Some(5)));
    assert_eq!((pairs[1].workspace, pairs[1].goal), (1, Some(3)));
}

#[test]
fn single_instance_pairs_and_extra_sets_go_unpaired() {
    let goal = flat_goal(vec![0, 4, 4]);
    let one = pair_instances(&[flat_set(1)], &goal).unwrap();
    assert_eq!(one[0].goal, Some(4));
    assert!((one[0].similarity - 1.0).abs() < 1e-12);
    let two = pair_instances(&[flat_set(1), flat_set(2)], &goal).unwrap();
    assert_eq!(two[0].goal, Some(4));
    assert_eq!(two[1].goal, None);
}

#[test]
fn uniform_goal_puts_every_point_at_the_instance_centre() {
    let goal = flat_goal(vec![0, 4, 4, 0]);
    let out = goal_points(&flat_set(1), &goal, Some(4), false).unwrap();
    assert!(out.points.iter().all(|p| *p == PixelCoord::new(1.5, 0.0)));
}

#[test]
fn malformed_requests_are_rejected() {
    let mut goal = flat_goal(vec![0, 4]);
    assert_eq!(
        goal_points(&flat_set(1), &goal, Some(9), false).unwrap_err(),
        CorrespondenceError::EmptyGoalInstance(9)
    );
    let wide = KeypointSet::new(vec![Vector3::zeros()], vec![vec![1.0; 3]], 1).unwrap();
    assert_eq!(
        goal_points(&wide, &goal, None, false).unwrap_err(),
        CorrespondenceError::DimensionMismatch { goal: 2, keypoints: 3 }
    );
    goal.sharpness = f64::NAN;
    assert!(matches!(
        goal_points(&flat_set(1), &goal, None, false),
        Err(CorrespondenceError::InvalidSharpness(_))
    ));
    goal.sharpness = 1.0;
    goal.masks = None;
    assert_eq!(
        pair_instances(&[flat_set(1)], &goal).unwrap_err(),
        CorrespondenceError::NoGoalMasks
    );
    assert_eq!(
        goal_points(&flat_set(1), &goal, Some(1), false).unwrap_err(),
        CorrespondenceError::NoGoalMasks
    );
    goal.masks = Some(ImageMap::filled(3, 1, 1, 0));
    assert_eq!(goal_points(&flat_set(1), &goal, None, false).unwrap_err(), CorrespondenceError::MaskShape);
}
