//! Keypoint dynamics `s_{t+1} = f(s_t, a_t)` behind a named registry, with a
//! quasi-static planar pusher and a pick-and-place teleport as built-ins.
//!
//! The pusher is a disc of radius `r = radius + band` swept in the table plane from
//! `start` along `direction` for `length`. A point at lateral offset `e < r` from the
//! sweep line is contacted when its along-line coordinate `t` lies in
//! `(-h, length + h)` with `h = sqrt(r² - e²)`, and ends at `t = length + h`, just
//! ahead of the disc's final position. Heights are never changed.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{Rotation2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tracking::KeypointSet;

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("dynamics '{0}' is already registered")]
    Duplicate(String),
    #[error("unknown dynamics '{name}'; available: {}", available.join(", "))]
    Unknown { name: String, available: Vec<String> },
    #[error("dynamics '{dynamics}' does not support {action} actions")]
    Unsupported { dynamics: String, action: &'static str },
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("invalid pusher parameters: {0}")]
    InvalidParams(String),
}

/// Planar push on the table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PushAction {
    pub start: Vector2<f64>,
    /// Unit push direction.
    pub direction: Vector2<f64>,
    pub length: f64,
}

impl PushAction {
    pub fn new(start: Vector2<f64>, direction: Vector2<f64>, length: f64) -> Result<Self, DynamicsError> {
        let a = Self {
            start,
            direction,
            length,
        };
        a.validate()?;
        Ok(a)
    }

    /// Push along the direction at angle `theta` from world +x.
    pub fn from_angle(start: Vector2<f64>, theta: f64, length: f64) -> Self {
        Self {
            start,
            direction: Vector2::new(theta.cos(), theta.sin()),
            length,
        }
    }

    pub fn angle(&self) -> f64 {
        self.direction.y.atan2(self.direction.x)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if ((self.direction.norm() - 1.0).abs()) > 1e-6 {
            return Err(DynamicsError::InvalidAction(format!(
                "push direction must be unit length, got norm {}",
                self.direction.norm()
            )));
        }
        if !(self.length >= 0.0 && self.length.is_finite()) {
            return Err(DynamicsError::InvalidAction(format!(
                "push length must be non-negative, got {}",
                self.length
            )));
        }
        if !self.start.iter().all(|v| v.is_finite()) {
            return Err(DynamicsError::InvalidAction("push start is not finite".into()));
        }
        Ok(())
    }
}

/// Pick an instance up and set it down with its planar centroid at `target`,
/// rotated by `yaw` about the vertical axis through the centroid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaceAction {
    pub instance: u8,
    pub target: Vector2<f64>,
    pub yaw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Push(PushAction),
    Place(PlaceAction),
}

impl Action {
    pub fn kind(&self) -> &'static str {
        match self {
            Action::Push(_) => "push",
            Action::Place(_) => "place",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PusherParams {
    pub radius: f64,
    /// Extra contact margin added to the radius.
    pub band: f64,
    /// Move all points of the instance together instead of point by point.
    pub rigid_group: bool,
    /// Longest allowed push.
    pub max_push: f64,
}

impl Default for PusherParams {
    fn default() -> Self {
        Self {
            radius: 0.01,
            band: 0.0,
            rigid_group: true,
            max_push: 0.15,
        }
    }
}

impl PusherParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(DynamicsError::InvalidParams("radius must be positive".into()));
        }
        if !(self.band >= 0.0 && self.band.is_finite()) {
            return Err(DynamicsError::InvalidParams("band must be non-negative".into()));
        }
        if !(self.max_push >= 0.0) {
            return Err(DynamicsError::InvalidParams("max_push must be non-negative".into()));
        }
        Ok(())
    }

    pub fn effective_radius(&self) -> f64 {
        self.radius + self.band
    }
}

/// How far each point must advance along the push direction; 0 when untouched.
fn push_depths(points: &[Vector3<f64>], a: &PushAction, r: f64, length: f64) -> Vec<f64> {
    let dir = a.direction;
    let perp = Vector2::new(-dir.y, dir.x);
    points
        .iter()
        .map(|p| {
            let rel = Vector2::new(p.x, p.y) - a.start;
            let t = rel.dot(&dir);
            let e = rel.dot(&perp).abs();
            if e >= r {
                return 0.0;
            }
            let h = (r * r - e * e).sqrt();
            if t > -h && t < length + h {
                length + h - t
            } else {
                0.0
            }
        })
        .collect()
}

/// Applies one push to a point set. Lengths beyond `max_push` are clamped.
pub fn pusher_points(points: &[Vector3<f64>], a: &PushAction, params: &PusherParams) -> Vec<Vector3<f64>> {
    let length = a.length.min(params.max_push);
    if !(length > 0.0) {
        return points.to_vec();
    }
    let shift = push_depths(points, a, params.effective_radius(), length);
    let dir = Vector3::new(a.direction.x, a.direction.y, 0.0);
    if params.rigid_group {
        let d = shift.iter().copied().fold(0.0, f64::max);
        if d == 0.0 {
            return points.to_vec();
        }
        points.iter().map(|p| p + dir * d).collect()
    } else {
        points
            .iter()
            .zip(&shift)
            .map(|(p, &d)| if d > 0.0 { p + dir * d } else { *p })
            .collect()
    }
}

pub fn pusher_step(kps: &KeypointSet, a: &PushAction, params: &PusherParams) -> KeypointSet {
    kps.with_points(pusher_points(&kps.points, a, params))
}

/// Moves the planar centroid of `points` to `target` after a yaw about it.
pub fn place_points(points: &[Vector3<f64>], target: Vector2<f64>, yaw: f64) -> Vec<Vector3<f64>> {
    if points.is_empty() {
        return Vec::new();
    }
    let c = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let c2 = Vector2::new(c.x, c.y);
    let rot = Rotation2::new(yaw);
    points
        .iter()
        .map(|p| {
            let q = target + rot * (Vector2::new(p.x, p.y) - c2);
            Vector3::new(q.x, q.y, p.z)
        })
        .collect()
}

pub fn place_step(kps: &KeypointSet, a: &PlaceAction) -> KeypointSet {
    if a.instance != kps.instance {
        return kps.clone();
    }
    kps.with_points(place_points(&kps.points, a.target, a.yaw))
}

/// A deterministic model of how keypoints respond to an action.
pub trait Dynamics: Send + Sync {
    fn name(&self) -> &str;

    fn deterministic(&self) -> bool {
        true
    }

    /// Must preserve the number of points.
    fn step(&self, kps: &KeypointSet, action: &Action) -> Result<KeypointSet, DynamicsError>;
}

#[derive(Debug, Clone)]
pub struct Pusher {
    name: String,
    pub params: PusherParams,
}

impl Pusher {
    pub fn new(name: impl Into<String>, params: PusherParams) -> Result<Self, DynamicsError> {
        params.validate()?;
        Ok(Self {
            name: name.into(),
            params,
        })
    }
}

impl Dynamics for Pusher {
    fn name(&self) -> &str {
        &self.name
    }

    fn step(&self, kps: &KeypointSet, action: &Action) -> Result<KeypointSet, DynamicsError> {
        match action {
            Action::Push(a) => {
                a.validate()?;
                Ok(pusher_step(kps, a, &self.params))
            }
            Action::Place(_) => Err(DynamicsError::Unsupported {
                dynamics: self.name.clone(),
                action: action.kind(),
            }),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Place;

impl Dynamics for Place {
    fn name(&self) -> &str {
        "place"
    }

    fn step(&self, kps: &KeypointSet, action: &Action) -> Result<KeypointSet, DynamicsError> {
        match action {
            Action::Place(a) => Ok(place_step(kps, a)),
            Action::Push(_) => Err(DynamicsError::Unsupported {
                dynamics: "place".into(),
                action: action.kind(),
            }),
        }
    }
}

/// Name of a registered model.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DynamicsHandle(pub String);

impl fmt::Display for DynamicsHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Default)]
pub struct DynamicsRegistry {
    models: BTreeMap<String, Arc<dyn Dynamics>>,
}

impl fmt::Debug for DynamicsRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.models.keys()).finish()
    }
}

impl DynamicsRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// `pusher-rigid`, `pusher-granular` and `place`, with the pusher geometry taken from
    /// `params` (its `rigid_group` flag is overridden per model).
    pub fn with_builtins(params: PusherParams) -> Result<Self, DynamicsError> {
        let mut reg = Self::new();
        let rigid = PusherParams {
            rigid_group: true,
            ..params
        };
        let granular = PusherParams {
            rigid_group: false,
            ..params
        };
        reg.register("pusher-rigid", Arc::new(Pusher::new("pusher-rigid", rigid)?))?;
        reg.register("pusher-granular", Arc::new(Pusher::new("pusher-granular", granular)?))?;
        reg.register("place", Arc::new(Place))?;
        Ok(reg)
    }

    pub fn register(&mut self, name: &str, model: Arc<dyn Dynamics>) -> Result<DynamicsHandle, DynamicsError> {
        if self.models.contains_key(name) {
            return Err(DynamicsError::Duplicate(name.to_string()));
        }
        self.models.insert(name.to_string(), model);
        Ok(DynamicsHandle(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Dynamics>, DynamicsError> {
        self.models
            .get(name)
            .cloned()
            .ok_or_else(|| DynamicsError::Unknown {
                name: name.to_string(),
                available: self.names(),
            })
    }

    pub fn names(&self) -> Vec<String> {
        self.models.keys().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params(rigid: bool) -> PusherParams {
        PusherParams {
            radius: 0.01,
            band: 0.0,
            rigid_group: rigid,
            max_push: 1.0,
        }
    }

    fn push_x(length: f64) -> PushAction {
        PushAction::new(Vector2::zeros(), Vector2::x(), length).unwrap()
    }

    #[test]
    fn far_push_is_identity() {
        let pts = vec![Vector3::new(0.05, 0.2, 0.0), Vector3::new(-0.1, -0.3, 0.01)];
        for rigid in [true, false] {
            assert_eq!(pusher_points(&pts, &push_x(0.1), &params(rigid)), pts);
        }
    }

    #[test]
    fn point_on_line_ends_at_disc_front() {
        let p = Vector3::new(0.05, 0.0, 0.02);
        let out = pusher_points(&[p], &push_x(0.08), &params(false))[0];
        let center = Vector3::new(0.08, 0.0, 0.02);
        assert_relative_eq!((out - center).norm(), 0.01, epsilon = 1e-15);
        assert_eq!(out.z, 0.02);
    }

    #[test]
    fn rigid_group_translates_all_points_together() {
        let pts = vec![
            Vector3::new(0.05, 0.005, 0.0),
            Vector3::new(0.07, 0.05, 0.0),
            Vector3::new(0.09, -0.04, 0.01),
        ];
        let out = pusher_points(&pts, &push_x(0.08), &params(true));
        let d = out[0] - pts[0];
        assert!(d.x > 0.0);
        for (a, b) in out.iter().zip(&pts) {
            assert_relative_eq!(a - b, d, epsilon = 1e-15);
        }
        // Granular mode only moves the contacted point.
        let out = pusher_points(&pts, &push_x(0.08), &params(false));
        assert_eq!(&out[1..], &pts[1..]);
        assert_ne!(out[0], pts[0]);
    }

    #[test]
    fn band_widens_contact() {
        let p = vec![Vector3::new(0.05, 0.012, 0.0)];
        assert_eq!(pusher_points(&p, &push_x(0.08), &params(false)), p);
        let wide = PusherParams { band: 0.005, ..params(false) };
        assert_ne!(pusher_points(&p, &push_x(0.08), &wide), p);
    }

    #[test]
    fn action_validation() {
        assert!(PushAction::new(Vector2::zeros(), Vector2::new(1.0, 1.0), 0.1).is_err());
        assert!(PushAction::new(Vector2::zeros(), Vector2::x(), -0.1).is_err());
        let a = PushAction::from_angle(Vector2::zeros(), 0.3, 0.1);
        assert_relative_eq!(a.angle(), 0.3, epsilon = 1e-15);
    }

    #[test]
    fn place_moves_centroid() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.1), Vector3::new(0.2, 0.0, 0.3)];
        let out = place_points(&pts, Vector2::new(1.0, 1.0), std::f64::consts::FRAC_PI_2);
        assert_relative_eq!(out[0], Vector3::new(1.0, 0.9, 0.1), epsilon = 1e-12);
        assert_relative_eq!(out[1], Vector3::new(1.0, 1.1, 0.3), epsilon = 1e-12);
    }

    #[test]
    fn registry_rules() {
        let mut reg = DynamicsRegistry::with_builtins(PusherParams::default()).unwrap();
        assert_eq!(reg.names(), ["place", "pusher-granular", "pusher-rigid"]);
        assert_eq!(reg.get("pusher-rigid").unwrap().name(), "pusher-rigid");
        assert_eq!(
            reg.register("place", Arc::new(Place)).unwrap_err(),
            DynamicsError::Duplicate("place".into())
        );
        let err = reg.get("gnn").err().unwrap();
        assert!(err.to_string().contains("pusher-granular"));
        let pusher = reg.get("pusher-rigid").unwrap();
        let kps = KeypointSet::new(vec![Vector3::zeros()], vec![vec![0.0]], 1).unwrap();
        let place = Action::Place(PlaceAction {
            instance: 1,
            target: Vector2::zeros(),
            yaw: 0.0,
        });
        assert!(pusher.step(&kps, &place).is_err());
    }

    proptest! {
        #[test]
        fn pusher_invariants(
            pts in prop::collection::vec(prop::array::uniform3(-0.2f64..0.2), 1..30),
            start in prop::array::uniform2(-0.2f64..0.2),
            theta in -3.2f64..3.2,
            length in 0.0f64..0.2,
            shift in prop::array::uniform2(-0.5f64..0.5),
            rigid in any::<bool>(),
        ) {
            let pts: Vec<Vector3<f64>> = pts.into_iter().map(Vector3::from).collect();
            let p = params(rigid);
            let a = PushAction::from_angle(Vector2::from(start), theta, length);
            let out = pusher_points(&pts, &a, &p);
            prop_assert_eq!(out.len(), pts.len());

            // Locality: points beyond the swept capsule are untouched.
            if !rigid {
                for (o, q) in out.iter().zip(&pts) {
                    let q2 = Vector2::new(q.x, q.y);
                    let t = (q2 - a.start).dot(&a.direction).clamp(0.0, a.length);
                    let dist = (q2 - (a.start + a.direction * t)).norm();
                    if dist > p.effective_radius() {
                        prop_assert_eq!(o, q);
                    }
                }
            }

            // Translation equivariance.
            let s = Vector3::new(shift[0], shift[1], 0.0);
            let moved: Vec<_> = pts.iter().map(|q| q + s).collect();
            let a2 = PushAction { start: a.start + Vector2::new(shift[0], shift[1]), ..a };
            for (x, y) in pusher_points(&moved, &a2, &p).iter().zip(&out) {
                prop_assert!((x - (y + s)).norm() < 1e-12);
            }

            let zero = PushAction { length: 0.0, ..a };
            prop_assert_eq!(pusher_points(&pts, &zero, &p), pts);
        }
    }
}
