use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use d3fields::geometry::ImageMap;
use d3fields::io::{read_map, read_scene, view_dir_name, DEPTH_FILE, FEATURE_FILE, MASK_FILE, CAMERA_FILE};
use d3fields::mesh::read_ply;

const SCENE: &str = r#"{
  "primitives": [
    {"kind": "sphere", "radius": 0.04, "center": [-0.05, 0.0, 0.04], "category": 0, "instance": 1},
    {"kind": "box", "half_extents": [0.03, 0.02, 0.02], "center": [0.06, 0.0, 0.02], "rotation": [0, 0, 0.3], "category": 1, "instance": 2}
  ],
  "cameras": [
    {"eye": [0.35, 0.35, 0.4], "target": [0, 0, 0], "width": 96, "height": 72, "hfov_deg": 60},
    {"eye": [-0.35, 0.35, 0.4], "target": [0, 0, 0], "width": 96, "height": 72, "hfov_deg": 60},
    {"eye": [-0.35, -0.35, 0.4], "target": [0, 0, 0], "width": 96, "height": 72, "hfov_deg": 60},
    {"eye": [0.35, -0.35, 0.4], "target": [0, 0, 0], "width": 96, "height": 72, "hfov_deg": 60}
  ],
  "features": {"dim": 8, "seed": 1},
  "render": {"depth_noise_std": 0.0005}
}"#;

fn d3fields(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_d3fields"))
        .args(args.iter().map(|a| a.as_ref()))
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let desc = dir.join("scene.json");
    fs::write(&desc, SCENE).unwrap();
    let scene = dir.join(name);
    let out = d3fields(&[&"synth", &desc, &"-o", &scene, &"--seed", &seed.to_string()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    scene
}

#[test]
fn synth_writes_a_loadable_scene() {
    let dir = tempfile::tempdir().unwrap();
    let scene = read_scene(&synth(dir.path(), "s", 1)).unwrap();
    assert_eq!(scene.views.len(), 4);
    assert_eq!(scene.feature_dim(), 8);
    assert_eq!(scene.instance_count(), 3);
}

#[test]
fn seed_changes_only_the_noise() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a", 1);
    let b = synth(dir.path(), "b", 1);
    let c = synth(dir.path(), "c", 2);
    let depth = |s: &Path| fs::read(s.join(view_dir_name(0)).join(DEPTH_FILE)).unwrap();
    let feat = |s: &Path| fs::read(s.join(view_dir_name(0)).join(FEATURE_FILE)).unwrap();
    assert_eq!(depth(&a), depth(&b));
    assert_ne!(depth(&a), depth(&c));
    assert_eq!(feat(&a), feat(&c));
}

#[test]
fn mesh_happy_path_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(dir.path(), "s", 1);
    let (a, b) = (dir.path().join("a.ply"), dir.path().join("b.ply"));
    for path in [&a, &b] {
        let out = d3fields(&[&"mesh", &scene, &"--cell", &"0.004", &"-o", path]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let mesh = read_ply(&a).unwrap();
    assert!(mesh.triangles.len() > 100);
    let summary: serde_json::Value = serde_json::from_slice(
        &d3fields(&[&"mesh", &scene, &"--cell", &"0.004", &"-o", &b, &"--threads", &"1"]).stdout,
    )
    .unwrap();
    assert_eq!(summary["triangles"], mesh.triangles.len());
    // one worker gives the same bytes
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn config_file_sets_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(dir.path(), "s", 1);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"mesh": {"cell": 0.01, "colors": "pca"}}"#).unwrap();
    let count = |extra: &[&dyn AsRef<std::ffi::OsStr>]| {
        let out_path = dir.path().join("m.ply");
        let mut args: Vec<&dyn AsRef<std::ffi::OsStr>> = vec![&"--config", &cfg, &"mesh", &scene, &"-o", &out_path];
        args.extend_from_slice(extra);
        let out = d3fields(&args);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        read_ply(&out_path).unwrap().vertices.len()
    };
    let coarse = count(&[]);
    let fine = count(&[&"--cell", &"0.004"]);
    assert!(fine > 3 * coarse, "{fine} vs {coarse}");

    fs::write(&cfg, r#"{"mesh": {"cel": 0.01}}"#).unwrap();
    let out = d3fields(&[&"--config", &cfg, &"mesh", &scene, &"-o", &dir.path().join("m.ply")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("cfg.json"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = d3fields(&[&"mesh", &"-o", &dir.path().join("x.ply")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"));
    let out = d3fields(&[&"frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"));
    let out = d3fields(&[&"--threads", &"0", &"fuse", &dir.path()]);
    assert_eq!(out.status.code(), Some(1));
    let out = d3fields(&[&"mesh", &dir.path(), &"--bounds", &"-1,0,1", &"-o", &dir.path().join("x.ply")]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(d3fields(&[&"--help"]).status.code(), Some(0));
}

#[test]
fn corrupt_scene_exits_two_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(dir.path(), "s", 1);
    let mask = scene.join(view_dir_name(2)).join(MASK_FILE);
    let bytes = fs::read(&mask).unwrap();
    fs::write(&mask, &bytes[..bytes.len() / 2]).unwrap();
    let out = d3fields(&[&"mesh", &scene, &"-o", &dir.path().join("x.ply")]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains(&mask.display().to_string()), "{msg}");
    let out = d3fields(&[&"fuse", &dir.path().join("absent")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fuse_reports_stats_and_dumps_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(dir.path(), "s", 1);
    let dump = dir.path().join("grid.f32");
    let out = d3fields(&[&"fuse", &scene, &"--cell", &"0.01", &"--dump", &dump]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stats["views"], 4);
    assert_eq!(stats["feature_dim"], 8);
    assert_eq!(stats["instances"], 3);
    let points: Vec<usize> = serde_json::from_value(stats["grid"]["points"].clone()).unwrap();
    let map: ImageMap<f32> = read_map(&dump).unwrap();
    assert_eq!((map.width(), map.height()), (points[0], points[1] * points[2]));
    let observed = map.data().iter().filter(|v| !v.is_nan()).count();
    assert_eq!(stats["grid"]["observed"], observed);
    assert!(observed > 0);
}

#[test]
fn track_writes_one_row_per_point_and_frame() {
    let dir = tempfile::tempdir().unwrap();
    let s0 = synth(dir.path(), "s0", 1);
    let s1 = synth(dir.path(), "s1", 2);
    let csv = dir.path().join("traj.csv");
    let out = d3fields(&[&"track", &s0, &s1, &s0, &"--instance", &"2", &"--count", &"12", &"-o", &csv]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("frame,point,x,y,z,lost"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 36);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!((r[0] as usize, r[1] as usize), (i / 12, i % 12));
        assert_eq!(r[5], 0.0);
    }
    // noise-only frames barely move the points
    for i in 0..12 {
        let d: f64 = (2..5).map(|k| (rows[i][k] - rows[12 + i][k]).powi(2)).sum::<f64>().sqrt();
        assert!(d < 3e-3, "point {i} moved {d}");
    }
    let again = dir.path().join("again.csv");
    d3fields(&[&"track", &s0, &s1, &s0, &"--instance", &"2", &"--count", &"12", &"-o", &again]);
    assert_eq!(fs::read(&csv).unwrap(), fs::read(&again).unwrap());

    let out = d3fields(&[&"track", &s0, &"--instance", &"9", &"-o", &csv]);
    assert_eq!(out.status.code(), Some(2));
}

fn goal_rows(csv: &Path, masks: &ImageMap<u8>, instance: u8) -> usize {
    let text = fs::read_to_string(csv).unwrap();
    assert_eq!(text.lines().next(), Some("point,x,y,z,u,v"));
    let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
    for y in 0..masks.height() {
        for x in 0..masks.width() {
            if masks.texel(x, y)[0] == instance {
                lo = [lo[0].min(x as f64), lo[1].min(y as f64)];
                hi = [hi[0].max(x as f64), hi[1].max(y as f64)];
            }
        }
    }
    // an expectation over the instance's pixels stays within their bounding box
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        let inside = (0..2).all(|k| v[4 + k] >= lo[k] - 1e-6 && v[4 + k] <= hi[k] + 1e-6);
        assert!(inside, "goal pixel ({}, {}) outside instance {instance}", v[4], v[5]);
    }
    text.lines().count() - 1
}

#[test]
fn correspond_writes_points_and_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(dir.path(), "s", 1);
    let view = scene.join(view_dir_name(1));
    let masks: ImageMap<u8> = read_map(&view.join(MASK_FILE)).unwrap();
    let (csv, maps) = (dir.path().join("goal.csv"), dir.path().join("maps"));
    let run = |extra: &[&dyn AsRef<std::ffi::OsStr>]| {
        let (f, m, c) = (view.join(FEATURE_FILE), view.join(MASK_FILE), view.join(CAMERA_FILE));
        let mut args: Vec<&dyn AsRef<std::ffi::OsStr>> = vec![
            &"correspond", &scene, &"--goal-features", &f, &"--goal-masks", &m, &"--goal-camera", &c, &"-o", &csv,
        ];
        args.extend_from_slice(extra);
        let out = d3fields(&args);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    };

    // paired by mean descriptor
    run(&[&"--instance", &"1"]);
    assert_eq!(goal_rows(&csv, &masks, 1), 40);
    run(&[&"--instance", &"2", &"--count", &"10"]);
    assert_eq!(goal_rows(&csv, &masks, 2), 10);

    run(&[&"--instance", &"1", &"--count", &"6", &"--goal-instance", &"1", &"--heatmaps", &maps]);
    assert_eq!(goal_rows(&csv, &masks, 1), 6);
    for j in 0..6 {
        let img = image::open(maps.join(format!("heatmap_{j:04}.png"))).unwrap().into_luma8();
        assert_eq!(img.dimensions(), (96, 72));
        assert_eq!(img.pixels().map(|p| p.0[0]).max(), Some(255));
        for (x, y, p) in img.enumerate_pixels() {
            if masks.texel(x as usize, y as usize)[0] != 1 {
                assert_eq!(p.0[0], 0);
            }
        }
    }
    let out = d3fields(&[&"correspond", &scene, &"--goal-features", &view.join(MASK_FILE), &"-o", &csv]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains(MASK_FILE));
}

#[test]
fn plan_logs_steps_as_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let snaps = dir.path().join("snaps");
    let out = d3fields(&[&"plan", &"--max-steps", &"1", &"--seed", &"4", &"-o", &a, &"--snapshots", &snaps]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    d3fields(&[&"plan", &"--max-steps", &"1", &"--seed", &"4", &"-o", &b]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let lines: Vec<serde_json::Value> = fs::read_to_string(&a)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["step"], 0);
    assert_eq!(lines[0]["action"]["kind"], "push");
    let summary = &lines[1];
    assert_eq!(summary["steps"], 1);
    assert!(summary["final_cost"].as_f64().unwrap() < summary["initial_cost"].as_f64().unwrap());
    assert!(read_ply(&snaps.join("step_000.ply")).unwrap().triangles.len() > 100);
    assert!(snaps.join("step_001.ply").exists());

    let out = d3fields(&[&"plan", &"--max-steps", &"0", &"-o", &a]);
    assert_eq!(out.status.code(), Some(0));
    let text = fs::read_to_string(&a).unwrap();
    let only: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(only["status"], "budget_exhausted");

    let out = d3fields(&[&"plan", &"--dynamics", &"gnn", &"-o", &a]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("pusher-rigid"));
}
