//! Multi-view fused implicit descriptor fields for scene representation, keypoint
//! tracking, goal correspondence and sampling-based planning.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod correspondence;
pub mod dynamics;
pub mod field;
pub mod geometry;
pub mod io;
pub mod mesh;
pub mod planning;
pub mod synth;
pub mod tracking;

pub use field::{build_field, CameraView, FieldError, FieldParams, FieldValue, FusedField};
pub use geometry::{ImageMap, Intrinsics, PixelCoord, Pose};
