use std::cell::RefCell;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use d3fields::correspondence::{goal_points, GoalSpec};
use d3fields::dynamics::DynamicsRegistry;
use d3fields::field::{FieldParams, FusedField, NO_RETURN};
use d3fields::geometry::{back_project, Camera, ImageMap, PixelCoord};
use d3fields::io::{read_json, read_map, read_scene, write_map, write_scene, CameraFile};
use d3fields::mesh::{export_ply, extract_mesh, sample_grid, GridSpec};
use d3fields::planning::{
    default_perception, mpc_loop_observed, ActionSpace, Environment, KeypointInit, MpcConfig, PlanConfig,
    PusherEnvironment,
};
use d3fields::synth::{
    corner_cameras, intrinsics_fov, render_views, top_down_camera, Primitive, ProceduralFeatureSpec, RenderOptions,
    SceneDescription,
};
use d3fields::tracking::{sample_keypoints, track_step, KeypointSet};
use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::Serialize;

use crate::config::{Bounds, ColorMode, Config, KeypointSection};
use crate::{Cli, CliError, Command, GridArgs, KeypointArgs};

pub fn dispatch(cli: &Cli, config: &Config) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth { description, output } => synth(description, output, cli.seed),
        Command::Fuse { scene, grid, dump } => fuse(scene, grid, dump.as_deref(), config),
        Command::Mesh {
            scene,
            grid,
            output,
            iso,
            colors,
        } => mesh(scene, grid, output, *iso, *colors, config),
        Command::Track {
            frames,
            keypoints,
            output,
            non_rigid,
        } => track(frames, keypoints, output, *non_rigid, config),
        Command::Correspond {
            scene,
            keypoints,
            goal_features,
            goal_masks,
            goal_camera,
            goal_instance,
            sharpness,
            output,
            heatmaps,
        } => correspond(
            &CorrespondArgs {
                scene,
                keypoints,
                goal_features,
                goal_masks: goal_masks.as_deref(),
                goal_camera: goal_camera.as_deref(),
                goal_instance: *goal_instance,
                sharpness: *sharpness,
                output,
                heatmaps: heatmaps.as_deref(),
            },
            config,
        ),
        Command::Plan {
            dynamics,
            max_steps,
            output,
            snapshots,
        } => plan(dynamics.as_deref(), *max_steps, output, snapshots.as_deref(), cli, config),
    }
}

fn synth(description: &Path, output: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut desc: SceneDescription = read_json(description)?;
    if let Some(seed) = seed {
        desc.render.noise_seed = seed;
    }
    let views = desc.render().map_err(|e| CliError::data(description, e))?;
    let params = FieldParams {
        mu: desc.mu,
        delta: desc.delta,
    };
    params.validate().map_err(|e| CliError::data(description, e))?;
    write_scene(output, &views, params)?;
    Ok(())
}

fn load_field(scene: &Path) -> Result<FusedField, CliError> {
    read_scene(scene)?.into_field().map_err(|e| CliError::data(scene, e))
}

fn split(b: Bounds) -> (Vector3<f64>, Vector3<f64>) {
    (Vector3::new(b[0], b[1], b[2]), Vector3::new(b[3], b[4], b[5]))
}

/// Lattice from flags, then the config section, then `fallback`.
fn resolve_grid(
    args: &GridArgs,
    cell: f64,
    bounds: Option<Bounds>,
    fallback: impl FnOnce() -> Option<(Vector3<f64>, Vector3<f64>)>,
    source: &Path,
) -> Result<GridSpec, CliError> {
    let cell = args.cell.unwrap_or(cell);
    let (lo, hi) = match (args.bounds, bounds) {
        (Some(b), _) | (None, Some(b)) => split(b),
        (None, None) => fallback().ok_or_else(|| CliError::data(source, "no depth returns to bound the grid"))?,
    };
    GridSpec::covering(lo, hi, cell).map_err(|e| CliError::Usage(e.to_string()))
}

/// Extent of the back-projected pixels labelled `instance`, padded by `pad`.
fn instance_bounds(field: &FusedField, instance: u8, pad: f64) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for view in field.views() {
        for y in 0..view.depth.height() {
            for x in 0..view.depth.width() {
                let z = view.depth.texel(x, y)[0];
                if z == NO_RETURN || view.masks.label(x, y) != instance {
                    continue;
                }
                let p = back_project(PixelCoord::new(x as f64, y as f64), z as f64, &view.pose, &view.intrinsics);
                lo = lo.inf(&p);
                hi = hi.sup(&p);
            }
        }
    }
    lo.x.is_finite().then(|| (lo - Vector3::repeat(pad), hi + Vector3::repeat(pad)))
}

#[derive(Serialize)]
struct GridStats {
    origin: [f64; 3],
    cell: f64,
    points: [usize; 3],
    observed: usize,
    inside: usize,
    d_min: Option<f64>,
    d_max: Option<f64>,
}

#[derive(Serialize)]
struct FieldStats {
    views: usize,
    feature_dim: usize,
    instances: usize,
    mu: f64,
    delta: f64,
    observed_bounds: Option<Bounds>,
    grid: GridStats,
}

/// Writes a summary line to stdout; a closed pipe is not an error.
fn print_line(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}").and_then(|_| out.flush());
}

fn fuse(scene: &Path, args: &GridArgs, dump: Option<&Path>, config: &Config) -> Result<(), CliError> {
    let field = load_field(scene)?;
    let observed = GridSpec::observed_bounds(&field, 0.0);
    let grid = resolve_grid(args, config.fuse.cell, config.fuse.bounds, || observed, scene)?;
    let values = sample_grid(&field, &grid);
    let seen: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    let stats = FieldStats {
        views: field.view_count(),
        feature_dim: field.feature_dim(),
        instances: field.instance_count(),
        mu: field.mu(),
        delta: field.params().delta,
        observed_bounds: observed.map(|(lo, hi)| [lo.x, lo.y, lo.z, hi.x, hi.y, hi.z]),
        grid: GridStats {
            origin: grid.origin.into(),
            cell: grid.cell,
            points: grid.points(),
            observed: seen.len(),
            inside: seen.iter().filter(|&&d| d > 0.0).count(),
            d_min: seen.iter().copied().reduce(f64::min),
            d_max: seen.iter().copied().reduce(f64::max),
        },
    };
    if let Some(path) = dump {
        let [px, py, pz] = grid.points();
        let data = values.iter().map(|&v| v as f32).collect();
        let map = ImageMap::new(px, py * pz, 1, data).expect("lattice size");
        write_map(path, &map)?;
    }
    print_line(&serde_json::to_string_pretty(&stats).expect("stats serialise"));
    Ok(())
}

fn mesh(
    scene: &Path,
    args: &GridArgs,
    output: &Path,
    iso: Option<f64>,
    colors: Option<ColorMode>,
    config: &Config,
) -> Result<(), CliError> {
    let section = &config.mesh;
    let field = load_field(scene)?;
    let grid = resolve_grid(args, section.cell, section.bounds, || GridSpec::observed_bounds(&field, field.mu()), scene)?;
    let mut mesh = extract_mesh(&field, &grid, iso.unwrap_or(section.iso)).map_err(|e| CliError::Usage(e.to_string()))?;
    if colors.unwrap_or(section.colors) == ColorMode::Pca {
        mesh = mesh.with_pca_colors();
    }
    export_ply(&mesh, output).map_err(|e| CliError::data(output, e))?;
    print_line(
        &serde_json::json!({
            "vertices": mesh.vertices().len(),
            "triangles": mesh.triangles().len(),
            "watertight": mesh.mesh.is_watertight(),
        })
        .to_string(),
    );
    Ok(())
}

fn keypoint_section(args: &KeypointArgs, section: &KeypointSection) -> KeypointSection {
    KeypointSection {
        instance: args.instance.unwrap_or(section.instance),
        count: args.count.unwrap_or(section.count),
        tau_surf: args.tau_surf.unwrap_or(section.tau_surf),
        ..section.clone()
    }
}

fn keypoint_grid(field: &FusedField, args: &GridArgs, kp: &KeypointSection, source: &Path) -> Result<GridSpec, CliError> {
    resolve_grid(args, kp.cell, kp.bounds, || instance_bounds(field, kp.instance, kp.pad), source)
}

fn init_keypoints(field: &FusedField, args: &KeypointArgs, section: &KeypointSection, source: &Path) -> Result<KeypointSet, CliError> {
    let kp = keypoint_section(args, section);
    let grid = keypoint_grid(field, &args.grid, &kp, source)?;
    sample_keypoints(field, &grid, kp.instance, kp.count, kp.tau_surf).map_err(|e| CliError::data(source, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| CliError::data(path, e))
}

#[derive(Serialize)]
struct TrackRow {
    frame: usize,
    point: usize,
    x: f64,
    y: f64,
    z: f64,
    lost: u8,
}

fn track(frames: &[PathBuf], args: &KeypointArgs, output: &Path, non_rigid: bool, config: &Config) -> Result<(), CliError> {
    let section = &config.track;
    let cfg = d3fields::tracking::TrackConfig {
        rigid: section.rigid && !non_rigid,
        ..section.config()
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let first = load_field(&frames[0])?;
    let mut kps = init_keypoints(&first, args, &section.keypoints, &frames[0])?;
    drop(first);
    let mut out = csv_writer(output)?;
    let mut write = |kps: &KeypointSet, frame: usize| -> Result<(), CliError> {
        for (point, p) in kps.points.iter().enumerate() {
            out.serialize(TrackRow {
                frame,
                point,
                x: p.x,
                y: p.y,
                z: p.z,
                lost: kps.lost as u8,
            })
            .map_err(|e| CliError::data(output, e))?;
        }
        Ok(())
    };
    write(&kps, 0)?;
    for (frame, path) in frames.iter().enumerate().skip(1) {
        let field = load_field(path)?;
        kps = track_step(&field, &kps, &cfg).map_err(|e| CliError::data(path, e))?;
        write(&kps, frame)?;
    }
    out.flush().map_err(|e| CliError::data(output, e))
}

struct CorrespondArgs<'a> {
    scene: &'a Path,
    keypoints: &'a KeypointArgs,
    goal_features: &'a Path,
    goal_masks: Option<&'a Path>,
    goal_camera: Option<&'a Path>,
    goal_instance: Option<u8>,
    sharpness: Option<f64>,
    output: &'a Path,
    heatmaps: Option<&'a Path>,
}

#[derive(Serialize)]
struct GoalRow {
    point: usize,
    x: f64,
    y: f64,
    z: f64,
    u: f64,
    v: f64,
}

fn correspond(a: &CorrespondArgs, config: &Config) -> Result<(), CliError> {
    let section = &config.correspond;
    let field = load_field(a.scene)?;
    let kps = init_keypoints(&field, a.keypoints, &section.keypoints, a.scene)?;
    let features: ImageMap<f32> = read_map(a.goal_features)?;
    let masks = a.goal_masks.map(read_map::<u8>).transpose()?;
    let camera = match a.goal_camera {
        Some(path) => {
            let (pose, intrinsics) = read_json::<CameraFile>(path)?.camera(path)?;
            Camera { pose, intrinsics }
        }
        None => {
            let centre = instance_bounds(&field, kps.instance, 0.0)
                .map(|(lo, hi)| (lo + hi) / 2.0)
                .unwrap_or_else(|| kps.centroid());
            let intr = intrinsics_fov(features.width(), features.height(), section.camera_hfov_deg)
                .map_err(|e| CliError::data(a.goal_features, e))?;
            top_down_camera(Vector3::new(centre.x, centre.y, 0.0), section.camera_height, intr)
                .map_err(|e| CliError::Usage(e.to_string()))?
        }
    };
    let goal = GoalSpec {
        features,
        masks,
        sharpness: a.sharpness.unwrap_or(section.sharpness),
        camera,
    };
    let found = goal_points(&kps, &goal, a.goal_instance.or(section.goal_instance), a.heatmaps.is_some())
        .map_err(|e| CliError::data(a.goal_features, e))?;
    let mut out = csv_writer(a.output)?;
    for (point, (p, g)) in kps.points.iter().zip(&found.points).enumerate() {
        out.serialize(GoalRow {
            point,
            x: p.x,
            y: p.y,
            z: p.z,
            u: g.u,
            v: g.v,
        })
        .map_err(|e| CliError::data(a.output, e))?;
    }
    out.flush().map_err(|e| CliError::data(a.output, e))?;
    if let (Some(dir), Some(maps)) = (a.heatmaps, &found.heatmaps) {
        fs::create_dir_all(dir).map_err(|e| CliError::data(dir, e))?;
        for (j, map) in maps.iter().enumerate() {
            let path = dir.join(format!("heatmap_{j:04}.png"));
            let peak = map.data().iter().copied().fold(0.0, f64::max);
            let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
            let pixels = map.data().iter().map(|b| (b * scale).round() as u8).collect();
            let img = image::GrayImage::from_raw(map.width() as u32, map.height() as u32, pixels).expect("heatmap size");
            img.save(&path).map_err(|e| CliError::data(&path, e))?;
        }
    }
    Ok(())
}

/// A block on a table seen by four elevated cameras.
fn default_workspace() -> (Vec<Primitive>, Vec<Camera>) {
    let block = Primitive::cuboid(Vector3::new(0.0, 0.0, 0.02), Matrix3::identity(), [0.03, 0.03, 0.02], 0, 1)
        .expect("valid block");
    let ground = Primitive::ground(0.0, 0.5, 1, 2).expect("valid ground");
    let intr = intrinsics_fov(320, 240, 60.0).expect("valid intrinsics");
    let cams = corner_cameras(Vector3::zeros(), 0.5, 0.4, intr).expect("valid rig");
    (vec![block, ground], cams)
}

#[derive(Serialize)]
struct Summary {
    status: d3fields::planning::MpcStatus,
    steps: usize,
    initial_cost: f64,
    final_cost: f64,
    costs: Vec<f64>,
}

fn plan(
    dynamics: Option<&str>,
    max_steps: Option<usize>,
    output: &Path,
    snapshots: Option<&Path>,
    cli: &Cli,
    config: &Config,
) -> Result<(), CliError> {
    let section = &config.plan;
    let source = cli.config.clone().unwrap_or_else(|| PathBuf::from("plan"));
    let data = |e: &dyn std::fmt::Display| CliError::data(&source, e);

    let (scene, cameras, features, mut render, params) = match &section.scene {
        Some(desc) => (
            desc.primitives().map_err(|e| data(&e))?,
            desc.cameras().map_err(|e| data(&e))?,
            desc.features,
            desc.render,
            FieldParams {
                mu: desc.mu,
                delta: desc.delta,
            },
        ),
        None => {
            let (s, c) = default_workspace();
            (s, c, ProceduralFeatureSpec::default(), RenderOptions::default(), FieldParams::default())
        }
    };
    params.validate().map_err(|e| data(&e))?;
    let mut mppi = section.mppi.clone();
    if let Some(seed) = cli.seed {
        mppi.seed = seed;
        render.noise_seed = seed;
    }
    let reference = match &section.reference {
        Some(c) => c.build().map_err(|e| data(&e))?,
        None => top_down_camera(Vector3::zeros(), 0.5, intrinsics_fov(320, 240, 60.0).expect("valid intrinsics"))
            .expect("valid reference"),
    };

    let target = scene
        .iter()
        .find(|p| p.instance == section.instance)
        .ok_or_else(|| data(&format!("instance {} is not in the scene", section.instance)))?;
    let goal_scene: Vec<Primitive> = scene
        .iter()
        .map(|p| {
            if p.instance != section.instance {
                return p.clone();
            }
            let rot = *Rotation3::from_axis_angle(&Vector3::z_axis(), section.goal_yaw).matrix();
            let c = target.center();
            p.moved(&rot, &(c - rot * c + Vector3::from(section.goal_offset)))
        })
        .collect();
    let goal_view = render_views(&goal_scene, &[reference], &features, &render)
        .map_err(|e| data(&e))?
        .remove(0);
    let goal = GoalSpec {
        features: goal_view.features,
        masks: Some(goal_view.masks.labels().clone()),
        sharpness: config.correspond.sharpness,
        camera: reference,
    };

    let registry = DynamicsRegistry::with_builtins(section.pusher).map_err(|e| CliError::Usage(e.to_string()))?;
    let name = dynamics.unwrap_or(&section.dynamics);
    let Ok(model) = registry.get(name) else {
        return Err(CliError::Usage(registry.get(name).err().expect("lookup failed").to_string()));
    };
    let space = if name == "place" {
        ActionSpace::Place {
            instance: section.instance,
        }
    } else {
        ActionSpace::Push {
            max_push: section.pusher.max_push,
        }
    };
    if name == "place" && mppi.noise_sigma == PlanConfig::default().noise_sigma {
        mppi.noise_sigma = space.default_sigma();
    }

    let mut env = PusherEnvironment {
        scene,
        cameras,
        features,
        render,
        instance: section.instance,
        pusher: section.pusher,
        contact_spacing: section.contact_spacing,
    };
    let perception = default_perception(params);
    let first = perception(env.observe().map_err(|e| data(&e))?).map_err(|e| data(&e))?;
    let kp = KeypointSection {
        instance: section.instance,
        ..section.keypoints.clone()
    };
    let no_flags = GridArgs {
        cell: None,
        bounds: None,
    };
    let grid = keypoint_grid(&first, &no_flags, &kp, &source)?;
    let snapshot_grid = match snapshots {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| CliError::data(dir, e))?;
            let reach = Vector3::from(section.goal_offset).norm() + 0.02;
            let (lo, hi) = instance_bounds(&first, kp.instance, 0.0).ok_or_else(|| data(&"instance is not observed"))?;
            let lo = Vector3::new(lo.x - reach, lo.y - reach, lo.z - 0.02);
            let hi = Vector3::new(hi.x + reach, hi.y + reach, hi.z + 0.02);
            Some(GridSpec::covering(lo, hi, section.snapshot_cell).map_err(|e| CliError::Usage(e.to_string()))?)
        }
        None => None,
    };
    drop(first);

    let cfg = MpcConfig {
        plan: mppi,
        space,
        track: section.track.config(),
        keypoints: KeypointInit {
            grid,
            instance: kp.instance,
            count: kp.count,
            tau_surf: kp.tau_surf,
        },
        goal_threshold: section.goal_threshold,
        max_steps: max_steps.unwrap_or(section.max_steps),
        goal_instance: Some(section.instance),
        pusher_radius: section.pusher.radius,
    };
    let snapshot_error: RefCell<Option<CliError>> = RefCell::new(None);
    let mut observer = |step: usize, field: &FusedField| {
        let (Some(dir), Some(grid)) = (snapshots, &snapshot_grid) else { return };
        if snapshot_error.borrow().is_some() {
            return;
        }
        let path = dir.join(format!("step_{step:03}.ply"));
        let result = extract_mesh(field, grid, 0.0)
            .map_err(|e| CliError::Usage(e.to_string()))
            .and_then(|m| export_ply(&m, &path).map_err(|e| CliError::data(&path, e)));
        if let Err(e) = result {
            *snapshot_error.borrow_mut() = Some(e);
        }
    };
    let log = mpc_loop_observed(&mut env, &perception, model.as_ref(), &goal, &cfg, &mut observer).map_err(|e| data(&e))?;
    if let Some(e) = snapshot_error.into_inner() {
        return Err(e);
    }

    let mut text = String::new();
    for record in &log.records {
        text.push_str(&serde_json::to_string(record).expect("record serialises"));
        text.push('\n');
    }
    let summary = Summary {
        status: log.status,
        steps: log.records.len(),
        initial_cost: log.initial_cost(),
        final_cost: log.final_cost(),
        costs: log.costs.clone(),
    };
    text.push_str(&serde_json::to_string(&summary).expect("summary serialises"));
    text.push('\n');
    let mut file = fs::File::create(output).map_err(|e| CliError::data(output, e))?;
    file.write_all(text.as_bytes()).map_err(|e| CliError::data(output, e))
}
