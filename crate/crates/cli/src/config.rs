//! JSON configuration file. Every section and field is optional; command-line flags
//! override the file, which overrides the defaults below.

use d3fields::dynamics::PusherParams;
use d3fields::planning::PlanConfig;
use d3fields::synth::{CameraDescription, SceneDescription};
use d3fields::tracking::TrackConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub fuse: FuseSection,
    pub mesh: MeshSection,
    pub track: TrackSection,
    pub correspond: CorrespondSection,
    pub plan: PlanSection,
}

/// `[min_x, min_y, min_z, max_x, max_y, max_z]`, metres.
pub type Bounds = [f64; 6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuseSection {
    pub cell: f64,
    pub bounds: Option<Bounds>,
}

impl Default for FuseSection {
    fn default() -> Self {
        Self {
            cell: 0.01,
            bounds: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ColorMode {
    Instance,
    Pca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshSection {
    pub cell: f64,
    pub iso: f64,
    pub bounds: Option<Bounds>,
    pub colors: ColorMode,
}

impl Default for MeshSection {
    fn default() -> Self {
        Self {
            cell: 0.004,
            iso: 0.0,
            bounds: None,
            colors: ColorMode::Instance,
        }
    }
}

/// Where and how many keypoints to sample on the first frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeypointSection {
    pub instance: u8,
    pub count: usize,
    pub tau_surf: f64,
    pub cell: f64,
    /// Defaults to the instance's observed extent padded by `pad`.
    pub bounds: Option<Bounds>,
    pub pad: f64,
}

impl Default for KeypointSection {
    fn default() -> Self {
        Self {
            instance: 1,
            count: 40,
            tau_surf: 0.002,
            cell: 0.003,
            bounds: None,
            pad: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackSection {
    pub keypoints: KeypointSection,
    pub step: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub lambda_dist: f64,
    pub rigid: bool,
    pub max_halvings: usize,
}

impl Default for TrackSection {
    fn default() -> Self {
        let t = TrackConfig::default();
        Self {
            keypoints: KeypointSection::default(),
            step: t.step,
            max_iterations: t.max_iterations,
            tolerance: t.tolerance,
            lambda_dist: t.lambda_dist,
            rigid: true,
            max_halvings: t.max_halvings,
        }
    }
}

impl TrackSection {
    pub fn config(&self) -> TrackConfig {
        TrackConfig {
            step: self.step,
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            lambda_dist: self.lambda_dist,
            rigid: self.rigid,
            max_halvings: self.max_halvings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrespondSection {
    pub keypoints: KeypointSection,
    pub sharpness: f64,
    /// Goal mask label to match; the best match by mean descriptor when absent.
    pub goal_instance: Option<u8>,
    /// Height of the default top-down goal camera above the workspace centre.
    pub camera_height: f64,
    pub camera_hfov_deg: f64,
}

impl Default for CorrespondSection {
    fn default() -> Self {
        Self {
            keypoints: KeypointSection::default(),
            sharpness: d3fields::correspondence::DEFAULT_SHARPNESS,
            goal_instance: None,
            camera_height: 0.5,
            camera_hfov_deg: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSection {
    pub dynamics: String,
    pub pusher: PusherParams,
    pub mppi: PlanConfig,
    pub max_steps: usize,
    /// Squared pixels per keypoint.
    pub goal_threshold: f64,
    pub keypoints: KeypointSection,
    pub track: TrackSection,
    /// Workspace; the default is a block on a table seen by four cameras.
    pub scene: Option<SceneDescription>,
    /// Instance the environment moves.
    pub instance: u8,
    /// The goal is the workspace with the instance moved by this offset and yaw.
    pub goal_offset: [f64; 3],
    pub goal_yaw: f64,
    /// Reference camera; top-down over the origin when absent.
    pub reference: Option<CameraDescription>,
    pub contact_spacing: f64,
    /// Cell of the per-step PLY snapshots.
    pub snapshot_cell: f64,
}

impl Default for PlanSection {
    fn default() -> Self {
        Self {
            dynamics: "pusher-rigid".into(),
            pusher: PusherParams::default(),
            mppi: PlanConfig::default(),
            max_steps: 20,
            goal_threshold: d3fields::planning::DEFAULT_GOAL_THRESHOLD,
            keypoints: KeypointSection {
                tau_surf: 0.003,
                ..Default::default()
            },
            track: TrackSection::default(),
            scene: None,
            instance: 1,
            goal_offset: [0.1, 0.0, 0.0],
            goal_yaw: 0.0,
            reference: None,
            contact_spacing: 0.002,
            snapshot_cell: 0.004,
        }
    }
}
