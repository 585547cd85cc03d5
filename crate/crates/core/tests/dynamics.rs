mod common;

use std::sync::Arc;

use d3fields::dynamics::{
    pusher_points, Action, Dynamics, DynamicsError, DynamicsRegistry, PlaceAction, PushAction, PusherParams,
};
use d3fields::planning::{Environment, PusherEnvironment};
use d3fields::synth::{Primitive, ProceduralFeatureSpec, RenderOptions};
use d3fields::tracking::KeypointSet;
use nalgebra::{Matrix3, Vector2, Vector3};

fn block() -> Primitive {
    Primitive::cuboid(Vector3::new(0.0, 0.0, 0.02), Matrix3::identity(), [0.03, 0.03, 0.02], 0, 1).unwrap()
}

fn env() -> PusherEnvironment {
    PusherEnvironment {
        scene: vec![block(), Primitive::ground(0.0, 0.5, 1, 2).unwrap()],
        cameras: common::four_cameras(Vector3::zeros(), 32, 24),
        features: ProceduralFeatureSpec::default(),
        render: RenderOptions::default(),
        instance: 1,
        pusher: PusherParams::default(),
        contact_spacing: 0.002,
    }
}

fn keypoints(points: Vec<Vector3<f64>>) -> KeypointSet {
    let anchors = vec![vec![0.0]; points.len()];
    KeypointSet::new(points, anchors, 1).unwrap()
}

#[test]
fn environment_push_agrees_with_the_keypoint_model() {
    let push = PushAction::from_angle(Vector2::new(-0.06, 0.01), 0.2, 0.05);
    let mut world = env();
    let outline = block().footprint(world.contact_spacing);
    world.execute(&Action::Push(push)).unwrap();
    let reg = DynamicsRegistry::with_builtins(world.pusher).unwrap();
    let predicted = reg.get("pusher-rigid").unwrap().step(&keypoints(outline.clone()), &Action::Push(push)).unwrap();
    let shift = predicted.points[0] - outline[0];
    assert!(shift.norm() > 0.01);
    let moved = world.target().unwrap().center();
    assert!((moved - (block().center() + shift)).norm() < 1e-12);
    // the ground never moves
    assert_eq!(world.scene[1], env().scene[1]);
}

#[test]
fn push_that_misses_leaves_the_world_alone() {
    let mut world = env();
    world.execute(&Action::Push(PushAction::from_angle(Vector2::new(-0.1, 0.2), 0.0, 0.1))).unwrap();
    assert_eq!(world.scene, env().scene);
}

#[test]
fn environment_place_moves_and_turns_the_target() {
    let mut world = env();
    let place = PlaceAction {
        instance: 1,
        target: Vector2::new(0.05, -0.02),
        yaw: 0.3,
    };
    world.execute(&Action::Place(place)).unwrap();
    let prim = world.target().unwrap();
    assert!((prim.center() - Vector3::new(0.05, -0.02, 0.02)).norm() < 1e-12);
    let corner = prim.to_world(&Vector3::new(0.03, 0.0, 0.0)) - prim.center();
    assert!((corner.y.atan2(corner.x) - 0.3).abs() < 1e-12);
    // other instances are not touched
    let mut other = env();
    other.execute(&Action::Place(PlaceAction { instance: 2, ..place })).unwrap();
    assert_eq!(other.scene, env().scene);
}

#[test]
fn missing_target_is_an_environment_error() {
    let mut world = env();
    world.instance = 9;
    assert!(world.execute(&Action::Push(PushAction::from_angle(Vector2::zeros(), 0.0, 0.01))).is_err());
    assert_eq!(world.observe().unwrap().len(), 4);
}

#[test]
fn builtins_are_named_and_dispatch_by_action_kind() {
    let reg = DynamicsRegistry::with_builtins(PusherParams::default()).unwrap();
    assert_eq!(reg.names(), ["place", "pusher-granular", "pusher-rigid"]);
    let kps = keypoints(vec![Vector3::new(0.0, 0.0, 0.01), Vector3::new(0.02, 0.0, 0.01)]);
    let push = Action::Push(PushAction::from_angle(Vector2::new(-0.03, 0.0), 0.0, 0.025));
    let place = Action::Place(PlaceAction {
        instance: 1,
        target: Vector2::new(0.1, 0.1),
        yaw: 0.0,
    });
    let rigid = reg.get("pusher-rigid").unwrap().step(&kps, &push).unwrap();
    let granular = reg.get("pusher-granular").unwrap().step(&kps, &push).unwrap();
    // only the first point is in the sweep; the rigid model carries the second along
    assert_eq!(granular.points[1], kps.points[1]);
    assert!((granular.points[0].x - 0.005).abs() < 1e-12);
    assert!((rigid.points[1].x - 0.025).abs() < 1e-12);
    assert!(matches!(
        reg.get("pusher-rigid").unwrap().step(&kps, &place),
        Err(DynamicsError::Unsupported { action: "place", .. })
    ));
    assert!(matches!(
        reg.get("place").unwrap().step(&kps, &push),
        Err(DynamicsError::Unsupported { action: "push", .. })
    ));
    let placed = reg.get("place").unwrap().step(&kps, &place).unwrap();
    assert!((placed.centroid() - Vector3::new(0.1, 0.1, 0.01)).norm() < 1e-12);
}

struct Drift(Vector3<f64>);

impl Dynamics for Drift {
    fn name(&self) -> &str {
        "drift"
    }

    fn step(&self, kps: &KeypointSet, _: &Action) -> Result<KeypointSet, DynamicsError> {
        Ok(kps.with_points(kps.points.iter().map(|p| p + self.0).collect()))
    }
}

#[test]
fn registry_accepts_custom_models_once() {
    let mut reg = DynamicsRegistry::with_builtins(PusherParams::default()).unwrap();
    let handle = reg.register("drift", Arc::new(Drift(Vector3::new(0.0, 0.0, 0.1)))).unwrap();
    assert_eq!(handle.to_string(), "drift");
    assert_eq!(
        reg.register("drift", Arc::new(Drift(Vector3::zeros()))).unwrap_err(),
        DynamicsError::Duplicate("drift".into())
    );
    let kps = keypoints(vec![Vector3::zeros()]);
    let out = reg.get("drift").unwrap().step(&kps, &Action::Push(PushAction::from_angle(Vector2::zeros(), 0.0, 0.0))).unwrap();
    assert_eq!(out.points[0].z, 0.1);
    let Err(err) = reg.get("nope") else { panic!("unknown name resolved") };
    assert!(err.to_string().contains("pusher-rigid"), "{err}");
}

#[test]
fn clamped_push_matches_the_longest_allowed() {
    let params = PusherParams::default();
    let pts = vec![Vector3::new(0.0, 0.0, 0.0)];
    let long = pusher_points(&pts, &PushAction::from_angle(Vector2::new(-0.02, 0.0), 0.0, 1.0), &params);
    let max = pusher_points(&pts, &PushAction::from_angle(Vector2::new(-0.02, 0.0), 0.0, params.max_push), &params);
    assert_eq!(long, max);
    assert!((long[0].x - (-0.02 + params.max_push + params.radius)).abs() < 1e-12);
}
