//! Rearrangement cost, MPPI action optimisation and the closed perception-planning loop.
//!
//! The task cost is the summed squared pixel distance between the keypoints
//! projected into the reference camera and their goal pixels. MPPI scores each
//! rollout by this cost at the end of the horizon and updates the nominal action
//! sequence with weights `exp(-(S_k - min S) / λ)`.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correspondence::{goal_points, CorrespondenceError, GoalPoints, GoalSpec};
use crate::dynamics::{pusher_points, Action, Dynamics, DynamicsError, PlaceAction, PushAction, PusherParams};
use crate::field::{CameraView, FieldError, FieldParams, FusedField};
use crate::geometry::{Camera, PixelCoord};
use crate::mesh::GridSpec;
use crate::synth::{render_views, Primitive, ProceduralFeatureSpec, RenderOptions, SynthError};
use crate::tracking::{sample_keypoints, track_step, KeypointSet, TrackConfig, TrackError};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid planner configuration: {0}")]
    Config(String),
    #[error("length mismatch: {0} projected points vs {1} goal points")]
    LengthMismatch(usize, usize),
    #[error("keypoint {0} is behind the reference camera")]
    BehindCamera(usize),
    #[error(transparent)]
    Tracking(#[from] TrackError),
    #[error(transparent)]
    Correspondence(#[from] CorrespondenceError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("environment: {0}")]
    Environment(String),
}

/// Projects keypoints into the reference camera.
pub fn project_to_reference(points: &[Vector3<f64>], camera: &Camera) -> Result<Vec<PixelCoord>, PlanError> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| camera.project(p).map(|pr| pr.pixel).ok_or(PlanError::BehindCamera(i)))
        .collect()
}

/// `Σ_j ||s2d_j - goal_j||²` in squared pixels.
pub fn cost(s2d: &[PixelCoord], goal: &[PixelCoord]) -> Result<f64, PlanError> {
    if s2d.len() != goal.len() {
        return Err(PlanError::LengthMismatch(s2d.len(), goal.len()));
    }
    Ok(s2d
        .iter()
        .zip(goal)
        .map(|(a, b)| (a.u - b.u).powi(2) + (a.v - b.v).powi(2))
        .sum())
}

/// Continuous parameterisation of one action for sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionSpace {
    /// `[start_x, start_y, angle, length]`; length is clamped to `[0, max_push]`.
    Push { max_push: f64 },
    /// `[target_x, target_y, yaw]` for the given instance.
    Place { instance: u8 },
}

impl ActionSpace {
    pub fn dim(&self) -> usize {
        match self {
            ActionSpace::Push { .. } => 4,
            ActionSpace::Place { .. } => 3,
        }
    }

    pub fn default_sigma(&self) -> Vec<f64> {
        match self {
            ActionSpace::Push { .. } => vec![0.02, 0.02, 0.2, 0.02],
            ActionSpace::Place { .. } => vec![0.02, 0.02, 0.2],
        }
    }

    pub fn decode(&self, p: &[f64]) -> Action {
        match *self {
            ActionSpace::Push { max_push } => Action::Push(PushAction::from_angle(
                Vector2::new(p[0], p[1]),
                p[2],
                p[3].clamp(0.0, max_push),
            )),
            ActionSpace::Place { instance } => Action::Place(PlaceAction {
                instance,
                target: Vector2::new(p[0], p[1]),
                yaw: p[2],
            }),
        }
    }

    /// Parameters that leave the state unchanged.
    pub fn idle(&self, kps: &KeypointSet) -> Vec<f64> {
        match self {
            ActionSpace::Push { .. } => vec![0.0, 0.0, 0.0, 0.0],
            ActionSpace::Place { .. } => {
                let c = kps.centroid();
                vec![c.x, c.y, 0.0]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    pub horizon: usize,
    pub samples: usize,
    pub lambda: f64,
    /// Standard deviation per action parameter.
    pub noise_sigma: Vec<f64>,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            horizon: 1,
            samples: 128,
            lambda: 0.05,
            noise_sigma: vec![0.02, 0.02, 0.2, 0.02],
            iterations: 8,
            seed: 0,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self, dim: usize) -> Result<(), PlanError> {
        if self.horizon < 1 {
            return Err(PlanError::Config("horizon must be at least 1".into()));
        }
        if self.samples < 2 {
            return Err(PlanError::Config("samples must be at least 2".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(PlanError::Config("lambda must be positive".into()));
        }
        if self.noise_sigma.len() != dim {
            return Err(PlanError::Config(format!(
                "noise_sigma has {} entries, action has {dim} parameters",
                self.noise_sigma.len()
            )));
        }
        if self.noise_sigma.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(PlanError::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Normalised MPPI weights; infinite scores get weight 0. All-infinite input gives
/// all zeros.
pub fn mppi_weights(scores: &[f64], lambda: f64) -> Vec<f64> {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return vec![0.0; scores.len()];
    }
    let mut w: Vec<f64> = scores
        .iter()
        .map(|s| if s.is_finite() { (-(s - min) / lambda).exp() } else { 0.0 })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct MppiResult {
    /// Flattened `horizon x dim` parameters.
    pub nominal: Vec<f64>,
    /// Rollout cost of the returned nominal.
    pub cost: f64,
    /// Nominal cost before the first and after every iteration.
    pub history: Vec<f64>,
}

/// Generic MPPI over flattened parameter sequences. Each iteration scores the
/// unperturbed nominal plus `samples` Gaussian perturbations of it.
pub fn mppi_optimize<F>(initial: &[f64], sigma: &[f64], cfg: &PlanConfig, rollout: F) -> MppiResult
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let dim = sigma.len();
    assert!(dim > 0 && initial.len().is_multiple_of(dim), "nominal must be a whole number of steps");
    let mut nominal = initial.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = vec![rollout(&nominal)];
    for _ in 0..cfg.iterations {
        let mut eps = vec![vec![0.0; nominal.len()]; cfg.samples + 1];
        for e in eps.iter_mut().skip(1) {
            for (i, v) in e.iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = z * sigma[i % dim];
            }
        }
        let scores: Vec<f64> = eps
            .par_iter()
            .map(|e| {
                let trial: Vec<f64> = nominal.iter().zip(e).map(|(a, b)| a + b).collect();
                let s = rollout(&trial);
                if s.is_nan() {
                    f64::INFINITY
                } else {
                    s
                }
            })
            .collect();
        let weights = mppi_weights(&scores, cfg.lambda);
        for (w, e) in weights.iter().zip(&eps) {
            for (n, d) in nominal.iter_mut().zip(e) {
                *n += w * d;
            }
        }
        history.push(rollout(&nominal));
    }
    MppiResult {
        cost: *history.last().expect("history is never empty"),
        nominal,
        history,
    }
}

/// Terminal cost of applying `params` (one action per step) from `start`.
pub fn rollout_cost(
    dynamics: &dyn Dynamics,
    space: &ActionSpace,
    start: &KeypointSet,
    params: &[f64],
    goal: &GoalPoints,
    camera: &Camera,
) -> f64 {
    let mut state = start.clone();
    for p in params.chunks_exact(space.dim()) {
        match dynamics.step(&state, &space.decode(p)) {
            Ok(next) if next.len() == state.len() => state = next,
            _ => return f64::INFINITY,
        }
    }
    project_to_reference(&state.points, camera)
        .and_then(|s2d| cost(&s2d, &goal.points))
        .unwrap_or(f64::INFINITY)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub actions: Vec<Action>,
    pub params: Vec<f64>,
    /// Predicted terminal cost of the plan.
    pub cost: f64,
    pub history: Vec<f64>,
}

/// Optimises an action sequence for `s0` starting from `initial` (flattened
/// parameters, one block per horizon step).
pub fn mppi_plan(
    dynamics: &dyn Dynamics,
    space: &ActionSpace,
    s0: &KeypointSet,
    goal_pts: &GoalPoints,
    goal: &GoalSpec,
    initial: &[f64],
    cfg: &PlanConfig,
) -> Result<Plan, PlanError> {
    cfg.validate(space.dim())?;
    if initial.len() != cfg.horizon * space.dim() {
        return Err(PlanError::Config(format!(
            "initial sequence has {} parameters, expected {}",
            initial.len(),
            cfg.horizon * space.dim()
        )));
    }
    if goal_pts.points.len() != s0.len() {
        return Err(PlanError::LengthMismatch(s0.len(), goal_pts.points.len()));
    }
    let result = mppi_optimize(initial, &cfg.noise_sigma, cfg, |p| {
        rollout_cost(dynamics, space, s0, p, goal_pts, &goal.camera)
    });
    Ok(Plan {
        actions: result
            .nominal
            .chunks_exact(space.dim())
            .map(|p| space.decode(p))
            .collect(),
        params: result.nominal,
        cost: result.cost,
        history: result.history,
    })
}

/// Intersection of the reference camera ray through `pixel` with the plane `z = height`.
pub fn pixel_to_plane(camera: &Camera, pixel: PixelCoord, height: f64) -> Option<Vector3<f64>> {
    let origin = camera.pose.center();
    let dir = camera.pose.rotation().transpose() * camera.intrinsics.ray(pixel);
    if dir.z.abs() < 1e-12 {
        return None;
    }
    let t = (height - origin.z) / dir.z;
    (t > 0.0).then(|| origin + dir * t)
}

/// Initial parameters aimed at the goal: for pushes, a straight push through the
/// keypoint centroid towards the goal centroid, starting just behind the object.
pub fn heuristic_initial(
    space: &ActionSpace,
    kps: &KeypointSet,
    goal_pts: &GoalPoints,
    camera: &Camera,
    horizon: usize,
    pusher_radius: f64,
) -> Vec<f64> {
    let c = kps.centroid();
    let targets: Vec<Vector3<f64>> = goal_pts
        .points
        .iter()
        .filter_map(|&px| pixel_to_plane(camera, px, c.z))
        .collect();
    let mut params = Vec::with_capacity(horizon * space.dim());
    if targets.is_empty() {
        for _ in 0..horizon {
            params.extend(space.idle(kps));
        }
        return params;
    }
    let g = targets.iter().sum::<Vector3<f64>>() / targets.len() as f64;
    let delta = Vector2::new(g.x - c.x, g.y - c.y);
    match space {
        ActionSpace::Push { .. } => {
            let dist = delta.norm();
            let dir = if dist > 0.0 { delta / dist } else { Vector2::x() };
            let behind = kps
                .points
                .iter()
                .map(|p| -(Vector2::new(p.x - c.x, p.y - c.y)).dot(&dir))
                .fold(0.0, f64::max);
            let gap = 0.005;
            let start = Vector2::new(c.x, c.y) - dir * (behind + pusher_radius + gap);
            params.extend([start.x, start.y, dir.y.atan2(dir.x), dist / horizon as f64 + gap]);
            for k in 1..horizon {
                let s = start + dir * (k as f64 * dist / horizon as f64);
                params.extend([s.x, s.y, dir.y.atan2(dir.x), dist / horizon as f64 + gap]);
            }
        }
        ActionSpace::Place { .. } => {
            for _ in 0..horizon {
                params.extend([g.x, g.y, 0.0]);
            }
        }
    }
    params
}

/// A world that can be observed and acted on.
pub trait Environment {
    fn observe(&mut self) -> Result<Vec<CameraView>, PlanError>;
    fn execute(&mut self, action: &Action) -> Result<(), PlanError>;
}

/// Synthetic table-top world: primitives rendered by fixed cameras, with pushes and
/// placements applied to one rigid instance.
#[derive(Debug, Clone)]
pub struct PusherEnvironment {
    pub scene: Vec<Primitive>,
    pub cameras: Vec<Camera>,
    pub features: ProceduralFeatureSpec,
    pub render: RenderOptions,
    pub instance: u8,
    pub pusher: PusherParams,
    /// Spacing of the contact outline sampled on the pushed instance.
    pub contact_spacing: f64,
}

impl PusherEnvironment {
    pub fn target(&self) -> Option<&Primitive> {
        self.scene.iter().find(|p| p.instance == self.instance)
    }

    fn target_mut(&mut self) -> Result<&mut Primitive, PlanError> {
        let id = self.instance;
        self.scene
            .iter_mut()
            .find(|p| p.instance == id)
            .ok_or_else(|| PlanError::Environment(format!("instance {id} is not in the scene")))
    }
}

impl Environment for PusherEnvironment {
    fn observe(&mut self) -> Result<Vec<CameraView>, PlanError> {
        Ok(render_views(&self.scene, &self.cameras, &self.features, &self.render)?)
    }

    fn execute(&mut self, action: &Action) -> Result<(), PlanError> {
        let spacing = self.contact_spacing;
        let pusher = PusherParams {
            rigid_group: true,
            ..self.pusher
        };
        let prim = self.target_mut()?;
        match action {
            Action::Push(a) => {
                a.validate()?;
                let outline = prim.footprint(spacing);
                let moved = pusher_points(&outline, a, &pusher);
                if let (Some(before), Some(after)) = (outline.first(), moved.first()) {
                    let shift = after - before;
                    *prim = prim.moved(&Matrix3::identity(), &shift);
                }
            }
            Action::Place(a) => {
                if a.instance == prim.instance {
                    let c = prim.center();
                    let rot = *nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), a.yaw).matrix();
                    let target = Vector3::new(a.target.x, a.target.y, c.z);
                    *prim = prim.moved(&rot, &(target - rot * c));
                }
            }
        }
        Ok(())
    }
}

/// How the loop chooses keypoints on the first frame.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointInit {
    pub grid: GridSpec,
    pub instance: u8,
    pub count: usize,
    pub tau_surf: f64,
}

/// Goal cost per keypoint, squared pixels, at which the loop stops.
pub const DEFAULT_GOAL_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub plan: PlanConfig,
    pub space: ActionSpace,
    pub track: TrackConfig,
    pub keypoints: KeypointInit,
    /// Stop once cost per keypoint falls to this many squared pixels.
    pub goal_threshold: f64,
    pub max_steps: usize,
    /// Goal mask label to match against, if the goal has masks.
    pub goal_instance: Option<u8>,
    /// Pusher radius used to place the initial push.
    pub pusher_radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MpcStatus {
    Success,
    BudgetExhausted,
    TrackingLost,
}

/// One executed action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Observed cost before acting.
    pub cost: f64,
    /// Cost the planner predicted after the action.
    pub predicted_cost: f64,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcLog {
    pub records: Vec<StepRecord>,
    /// Observed cost at every perception step, including the last.
    pub costs: Vec<f64>,
    pub status: MpcStatus,
    pub keypoints: KeypointSet,
    pub goal: GoalPoints,
}

impl MpcLog {
    pub fn initial_cost(&self) -> f64 {
        self.costs[0]
    }

    pub fn final_cost(&self) -> f64 {
        *self.costs.last().expect("at least one observation")
    }
}

/// Builds fields from observations with fixed parameters.
pub fn default_perception(params: FieldParams) -> impl Fn(Vec<CameraView>) -> Result<FusedField, PlanError> {
    move |views| Ok(FusedField::new(views, params)?)
}

/// Closed loop: perceive, track, correspond, plan, act, until the goal threshold or
/// the step budget is reached.
pub fn mpc_loop(
    env: &mut dyn Environment,
    perception: &dyn Fn(Vec<CameraView>) -> Result<FusedField, PlanError>,
    dynamics: &dyn Dynamics,
    goal: &GoalSpec,
    cfg: &MpcConfig,
) -> Result<MpcLog, PlanError> {
    mpc_loop_observed(env, perception, dynamics, goal, cfg, &mut |_, _| {})
}

/// [`mpc_loop`] that also hands every perceived field to `observer`.
pub fn mpc_loop_observed(
    env: &mut dyn Environment,
    perception: &dyn Fn(Vec<CameraView>) -> Result<FusedField, PlanError>,
    dynamics: &dyn Dynamics,
    goal: &GoalSpec,
    cfg: &MpcConfig,
    observer: &mut dyn FnMut(usize, &FusedField),
) -> Result<MpcLog, PlanError> {
    cfg.plan.validate(cfg.space.dim())?;
    let init = &cfg.keypoints;
    let field = perception(env.observe()?)?;
    observer(0, &field);
    let mut kps = sample_keypoints(&field, &init.grid, init.instance, init.count, init.tau_surf)?;
    let mut records = Vec::new();
    let mut costs = Vec::new();
    let mut predicted: Option<KeypointSet> = None;
    let mut step = 0;
    let (status, goal_pts) = loop {
        if let Some(pred) = predicted.take() {
            let field = perception(env.observe()?)?;
            observer(step, &field);
            kps = track_step(&field, &pred, &cfg.track)?;
            if kps.lost {
                break (MpcStatus::TrackingLost, None);
            }
        }
        let goal_pts = goal_points(&kps, goal, cfg.goal_instance, false)?;
        let c = cost(&project_to_reference(&kps.points, &goal.camera)?, &goal_pts.points)?;
        costs.push(c);
        if c <= cfg.goal_threshold * kps.len() as f64 {
            break (MpcStatus::Success, Some(goal_pts));
        }
        if step >= cfg.max_steps {
            break (MpcStatus::BudgetExhausted, Some(goal_pts));
        }
        let initial = heuristic_initial(
            &cfg.space,
            &kps,
            &goal_pts,
            &goal.camera,
            cfg.plan.horizon,
            cfg.pusher_radius,
        );
        let plan_cfg = PlanConfig {
            seed: cfg.plan.seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            ..cfg.plan.clone()
        };
        let plan = mppi_plan(dynamics, &cfg.space, &kps, &goal_pts, goal, &initial, &plan_cfg)?;
        let action = plan.actions[0];
        env.execute(&action)?;
        predicted = Some(dynamics.step(&kps, &action)?);
        records.push(StepRecord {
            step,
            cost: c,
            predicted_cost: plan.cost,
            action,
        });
        step += 1;
    };
    let goal = match goal_pts {
        Some(g) => g,
        None => goal_points(&kps, goal, cfg.goal_instance, false)?,
    };
    if status == MpcStatus::TrackingLost {
        costs.push(f64::NAN);
    }
    Ok(MpcLog {
        records,
        costs,
        status,
        keypoints: kps,
        goal,
    })
}
