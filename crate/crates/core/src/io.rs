//! On-disk formats: binary map files and scene directories.
//!
//! Map file layout (all integers little-endian `u32`):
//!
//! ```text
//! offset  0  magic "D3FM"
//!         4  version (1)
//!         8  height H
//!        12  width W
//!        16  channels C
//!        20  dtype tag (0 = f32, 1 = u8)
//!        24  payload, row-major H x W x C, little-endian
//! ```
//!
//! A scene directory holds `scene.json` plus one sub-directory per view containing
//! `camera.json`, `depth.f32`, `feat.f32` and `mask.u8` (instance id per pixel).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{CameraView, FieldParams, FusedField, InstanceMasks};
use crate::geometry::{ImageMap, Intrinsics, Pose};

pub const MAGIC: [u8; 4] = *b"D3FM";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

pub const SCENE_FILE: &str = "scene.json";
pub const CAMERA_FILE: &str = "camera.json";
pub const DEPTH_FILE: &str = "depth.f32";
pub const FEATURE_FILE: &str = "feat.f32";
pub const MASK_FILE: &str = "mask.u8";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: bad magic, not a D3FM map file")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{path}: expected dtype {expected}, found tag {found}")]
    WrongDType {
        path: PathBuf,
        expected: &'static str,
        found: u32,
    },
    #[error("{path}: dimension mismatch: {detail}")]
    DimensionMismatch { path: PathBuf, detail: String },
    #[error("{path}: instance id {id} is not below M = {count}")]
    InstanceOutOfRange { path: PathBuf, id: u8, count: usize },
    #[error("{path}: {detail}")]
    Invalid { path: PathBuf, detail: String },
}

impl IoError {
    /// Stable short code for diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            IoError::Io { .. } => "E_IO",
            IoError::Json { .. } => "E_JSON",
            IoError::BadMagic { .. } => "E_MAGIC",
            IoError::UnsupportedVersion { .. } => "E_VERSION",
            IoError::WrongDType { .. } => "E_DTYPE",
            IoError::DimensionMismatch { .. } => "E_DIM",
            IoError::InstanceOutOfRange { .. } => "E_INSTANCE",
            IoError::Invalid { .. } => "E_INVALID",
        }
    }

    pub fn path(&self) -> &Path {
        match self {
            IoError::Io { path, .. }
            | IoError::Json { path, .. }
            | IoError::BadMagic { path }
            | IoError::UnsupportedVersion { path, .. }
            | IoError::WrongDType { path, .. }
            | IoError::DimensionMismatch { path, .. }
            | IoError::InstanceOutOfRange { path, .. }
            | IoError::Invalid { path, .. } => path,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Element types storable in a map file.
pub trait MapElement: Copy + Send + Sync {
    const TAG: u32;
    const NAME: &'static str;
    const SIZE: usize;
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
}

impl MapElement for f32 {
    const TAG: u32 = 0;
    const NAME: &'static str = "f32";
    const SIZE: usize = 4;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl MapElement for u8 {
    const TAG: u32 = 1;
    const NAME: &'static str = "u8";
    const SIZE: usize = 1;
    fn put(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn get(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

pub fn encode_map<T: MapElement>(map: &ImageMap<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + map.data().len() * T::SIZE);
    out.extend_from_slice(&MAGIC);
    for v in [
        VERSION,
        map.height() as u32,
        map.width() as u32,
        map.channels() as u32,
        T::TAG,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in map.data() {
        v.put(&mut out);
    }
    out
}

/// Decodes a map file image; `path` only labels errors.
pub fn decode_map<T: MapElement>(bytes: &[u8], path: &Path) -> Result<ImageMap<T>, IoError> {
    let path_buf = || path.to_path_buf();
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(IoError::BadMagic { path: path_buf() });
    }
    if bytes.len() < HEADER_LEN {
        return Err(IoError::DimensionMismatch {
            path: path_buf(),
            detail: format!("header truncated at {} bytes", bytes.len()),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != VERSION {
        return Err(IoError::UnsupportedVersion {
            path: path_buf(),
            version,
        });
    }
    let (h, w, c, tag) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4));
    if tag != T::TAG {
        return Err(IoError::WrongDType {
            path: path_buf(),
            expected: T::NAME,
            found: tag,
        });
    }
    let payload = &bytes[HEADER_LEN..];
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c))
        .and_then(|n| n.checked_mul(T::SIZE));
    if expected != Some(payload.len()) {
        return Err(IoError::DimensionMismatch {
            path: path_buf(),
            detail: format!(
                "header says {h}x{w}x{c} {} but payload has {} bytes",
                T::NAME,
                payload.len()
            ),
        });
    }
    let data = payload.chunks_exact(T::SIZE).map(T::get).collect();
    ImageMap::new(w, h, c, data).map_err(|e| IoError::DimensionMismatch {
        path: path_buf(),
        detail: e.to_string(),
    })
}

pub fn write_map<T: MapElement>(path: &Path, map: &ImageMap<T>) -> Result<(), IoError> {
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&encode_map(map)).map_err(io_err(path))
}

pub fn read_map<T: MapElement>(path: &Path) -> Result<ImageMap<T>, IoError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    decode_map(&bytes, path)
}

/// `camera.json` contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraFile {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    pub rotation: [f64; 9],
    /// World-to-camera translation, metres.
    pub translation: [f64; 3],
}

impl CameraFile {
    pub fn new(pose: &Pose, intr: &Intrinsics) -> Self {
        let r = pose.rotation();
        let mut rotation = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rotation[3 * i + j] = r[(i, j)];
            }
        }
        let t = pose.translation();
        Self {
            width: intr.width,
            height: intr.height,
            fx: intr.fx,
            fy: intr.fy,
            cx: intr.cx,
            cy: intr.cy,
            rotation,
            translation: [t.x, t.y, t.z],
        }
    }

    pub fn camera(&self, path: &Path) -> Result<(Pose, Intrinsics), IoError> {
        let invalid = |detail: String| IoError::Invalid {
            path: path.to_path_buf(),
            detail,
        };
        let intr = Intrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
            .map_err(|e| invalid(e.to_string()))?;
        let pose = Pose::new(
            Matrix3::from_row_slice(&self.rotation),
            Vector3::from(self.translation),
        )
        .map_err(|e| invalid(e.to_string()))?;
        Ok((pose, intr))
    }
}

/// `scene.json` contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub version: u32,
    pub num_views: usize,
    pub feature_dim: usize,
    pub instance_count: usize,
    pub mu: f64,
    pub delta: f64,
    pub views: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub views: Vec<CameraView>,
    pub params: FieldParams,
}

impl Scene {
    pub fn feature_dim(&self) -> usize {
        self.views.first().map_or(0, CameraView::feature_dim)
    }

    pub fn instance_count(&self) -> usize {
        self.views.first().map_or(0, CameraView::instance_count)
    }

    pub fn into_field(self) -> Result<FusedField, crate::field::FieldError> {
        FusedField::new(self.views, self.params)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn view_dir_name(index: usize) -> String {
    format!("view_{index:03}")
}

/// Writes one view's camera, depth, features and labels into `dir`.
pub fn write_view(dir: &Path, view: &CameraView) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(&dir.join(CAMERA_FILE), &CameraFile::new(&view.pose, &view.intrinsics))?;
    write_map(&dir.join(DEPTH_FILE), &view.depth)?;
    write_map(&dir.join(FEATURE_FILE), &view.features)?;
    write_map(&dir.join(MASK_FILE), view.masks.labels())
}

pub fn write_scene(dir: &Path, views: &[CameraView], params: FieldParams) -> Result<(), IoError> {
    let first = views.first().ok_or_else(|| IoError::Invalid {
        path: dir.to_path_buf(),
        detail: "scene has no views".into(),
    })?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let names: Vec<String> = (0..views.len()).map(view_dir_name).collect();
    for (view, name) in views.iter().zip(&names) {
        write_view(&dir.join(name), view)?;
    }
    write_json(
        &dir.join(SCENE_FILE),
        &SceneFile {
            version: VERSION,
            num_views: views.len(),
            feature_dim: first.feature_dim(),
            instance_count: first.instance_count(),
            mu: params.mu,
            delta: params.delta,
            views: names,
        },
    )
}

/// Reads and fully validates a view directory. `expected` is `(N, M)` from `scene.json`.
pub fn read_view(dir: &Path, expected: Option<(usize, usize)>) -> Result<CameraView, IoError> {
    let camera_path = dir.join(CAMERA_FILE);
    let (pose, intr) = read_json::<CameraFile>(&camera_path)?.camera(&camera_path)?;
    let depth_path = dir.join(DEPTH_FILE);
    let feat_path = dir.join(FEATURE_FILE);
    let mask_path = dir.join(MASK_FILE);
    let depth: ImageMap<f32> = read_map(&depth_path)?;
    let features: ImageMap<f32> = read_map(&feat_path)?;
    let labels: ImageMap<u8> = read_map(&mask_path)?;
    let check = |path: &Path, w: usize, h: usize, c: usize, want_c: Option<usize>| {
        if w != intr.width || h != intr.height || want_c.is_some_and(|wc| wc != c) {
            Err(IoError::DimensionMismatch {
                path: path.to_path_buf(),
                detail: format!(
                    "map is {h}x{w}x{c}, camera is {}x{} with {} channels expected",
                    intr.height,
                    intr.width,
                    want_c.map_or("any".to_string(), |c| c.to_string())
                ),
            })
        } else {
            Ok(())
        }
    };
    check(&depth_path, depth.width(), depth.height(), depth.channels(), Some(1))?;
    check(
        &feat_path,
        features.width(),
        features.height(),
        features.channels(),
        expected.map(|e| e.0),
    )?;
    check(&mask_path, labels.width(), labels.height(), labels.channels(), Some(1))?;
    let count = match expected {
        Some((_, m)) => m,
        None => labels.data().iter().copied().max().unwrap_or(0) as usize + 1,
    };
    if let Some(&id) = labels.data().iter().find(|&&l| l as usize >= count) {
        return Err(IoError::InstanceOutOfRange {
            path: mask_path,
            id,
            count,
        });
    }
    if let Some(bad) = depth.data().iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
        return Err(IoError::Invalid {
            path: depth_path,
            detail: format!("invalid depth value {bad}"),
        });
    }
    let masks = InstanceMasks::from_labels(labels, count).map_err(|e| IoError::Invalid {
        path: mask_path,
        detail: e.to_string(),
    })?;
    Ok(CameraView {
        intrinsics: intr,
        pose,
        depth,
        features,
        masks,
    })
}

pub fn read_scene(dir: &Path) -> Result<Scene, IoError> {
    let scene_path = dir.join(SCENE_FILE);
    let scene: SceneFile = read_json(&scene_path)?;
    if scene.version != VERSION {
        return Err(IoError::UnsupportedVersion {
            path: scene_path,
            version: scene.version,
        });
    }
    if scene.views.len() != scene.num_views || scene.views.is_empty() {
        return Err(IoError::DimensionMismatch {
            path: scene_path,
            detail: format!(
                "num_views = {} but {} view directories listed",
                scene.num_views,
                scene.views.len()
            ),
        });
    }
    let params = FieldParams {
        mu: scene.mu,
        delta: scene.delta,
    };
    params.validate().map_err(|e| IoError::Invalid {
        path: scene_path.clone(),
        detail: e.to_string(),
    })?;
    let expected = Some((scene.feature_dim, scene.instance_count));
    let views = scene
        .views
        .par_iter()
        .map(|name| read_view(&dir.join(name), expected))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Scene { views, params })
}
