use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pickplace_core::calib::{project, BoardSpec, CameraIntrinsics, CorrespondenceFile, ViewRecord};
use pickplace_core::geom3::{pose_error, rodrigues_exp};
use pickplace_core::handeye::StationSample;
use pickplace_core::{Pose, Vec3};
use serde_json::Value;

fn pickplace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pickplace")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = pickplace(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write_pose(path: &Path, pose: &Pose) {
    fs::write(path, serde_json::to_string(pose).unwrap()).unwrap();
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simulate_register_match() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let grasp = Pose::new(rodrigues_exp(&Vec3::new(std::f64::consts::PI, 0.0, 0.0)), Vec3::new(0.0, 0.0, 0.015));
    write_pose(&d.join("grasp.json"), &grasp);
    let moved = Pose::new(rodrigues_exp(&Vec3::new(0.0, 0.0, 0.4)), Vec3::new(0.08, -0.03, 0.0));
    write_pose(&d.join("moved.json"), &moved);

    let sim = |seed: &str, pose: Option<&str>, out: &str| {
        let mut args =
            vec!["simulate", "--shape", "box", "--dims", "0.12,0.08,0.05", "--eye", "0.5,-0.45,0.55", "--noise", "0.0005", "--seed", seed];
        if let Some(pose) = pose {
            args.extend(["--object-pose", pose]);
        }
        args.extend(["--out", out]);
        ok(&args);
    };
    sim("1", None, p(&d.join("face.ply")));
    sim("2", Some(p(&d.join("moved.json"))), p(&d.join("scan.ply")));

    let (db, face, grasp_file) = (d.join("db"), d.join("face.ply"), d.join("grasp.json"));
    let args = ["register", "--db", p(&db), "--object", "block", "--cloud", p(&face), "--grasp", p(&grasp_file), "--gripper", "two_finger"];
    assert_eq!(String::from_utf8(ok(&args).stdout).unwrap().trim(), "block_0");
    assert_eq!(String::from_utf8(ok(&args).stdout).unwrap().trim(), "block_1");
    assert!(db.join("block/manifest.json").is_file());

    ok(&["match", "--db", p(&db), "--scanned", p(&d.join("scan.ply")), "--out", p(&d.join("match.json"))]);
    let m = read(&d.join("match.json"));
    assert_eq!(m["object_id"], "block");
    assert!(m["score"].as_f64().unwrap() >= 0.7);
    let got: Pose = serde_json::from_value(m["grasp_in_scene"].clone()).unwrap();
    let (er, et) = pose_error(&got, &moved.compose(&grasp));
    assert!(er <= 1f64.to_radians() && et <= 0.003, "{er} {et}");

    // A can is not a block.
    ok(&["simulate", "--shape", "cylinder", "--dims", "0.03,0.1", "--eye", "0.5,-0.45,0.55", "--out", p(&d.join("can.ply"))]);
    let out = pickplace(&["match", "--db", p(&db), "--scanned", p(&d.join("can.ply")), "--out", p(&d.join("none.json"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("below threshold"));
    assert!(!d.join("none.json").exists());
}

#[test]
fn align_and_plan() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let moved = Pose::new(rodrigues_exp(&Vec3::new(0.05, -0.05, 0.3)), Vec3::new(0.02, 0.01, -0.01));
    write_pose(&d.join("moved.json"), &moved);
    ok(&["simulate", "--shape", "lshape", "--dims", "0.1,0.1,0.03,0.04", "--seed", "5", "--out", p(&d.join("a.ply"))]);
    ok(&[
        "simulate",
        "--shape",
        "lshape",
        "--dims",
        "0.1,0.1,0.03,0.04",
        "--seed",
        "5",
        "--object-pose",
        p(&d.join("moved.json")),
        "--out",
        p(&d.join("b.ply")),
    ]);
    fs::write(d.join("icp.json"), r#"{"max_iterations": 100, "convergence_delta_rmse": 1e-10}"#).unwrap();
    ok(&[
        "align",
        "--registered",
        p(&d.join("a.ply")),
        "--scanned",
        p(&d.join("b.ply")),
        "--params",
        p(&d.join("icp.json")),
        "--out",
        p(&d.join("align.json")),
    ]);
    let a = read(&d.join("align.json"));
    let t: Pose = serde_json::from_value(a["transform"].clone()).unwrap();
    let (er, et) = pose_error(&t, &moved);
    assert!(er <= 1e-6 && et <= 1e-6, "{er} {et}");
    assert_eq!(a["fitness"], 1.0);

    ok(&[
        "plan",
        "--grasp",
        p(&d.join("moved.json")),
        "--place",
        p(&d.join("moved.json")),
        "--approach-offset",
        "0.05",
        "--out",
        p(&d.join("plan.json")),
    ]);
    let plan = read(&d.join("plan.json"));
    let labels: Vec<&str> = plan["waypoints"].as_array().unwrap().iter().map(|w| w["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["approach", "grasp", "lift", "transit", "place_approach", "place", "retreat"]);
    assert_eq!(plan["waypoints"][1]["gripper"], "close");

    let out = pickplace(&[
        "plan",
        "--grasp",
        p(&d.join("moved.json")),
        "--place",
        p(&d.join("moved.json")),
        "--approach-offset",
        "0",
        "--out",
        p(&d.join("bad.json")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn calibrate_and_handeye_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let k = CameraIntrinsics { fx: 700.0, fy: 700.0, cx: 320.0, cy: 240.0, skew: 0.0, k1: 0.0, k2: 0.0 };
    let board = BoardSpec { cols: 8, rows: 6, square_size_m: 0.03 };
    let views: Vec<ViewRecord> = [(0.3, 0.0), (0.0, 0.35), (-0.3, 0.2), (0.25, -0.3), (-0.2, -0.25)]
        .iter()
        .map(|&(a, b)| {
            let rot = rodrigues_exp(&Vec3::new(a, b, 0.1));
            let pose = Pose::new(rot, Vec3::new(0.0, 0.0, 0.6) - rot * Vec3::new(0.105, 0.075, 0.0));
            let image = board.object_points().into_iter().map(|x| {
                let px = project(&k, &pose.transform_point(&x)).unwrap();
                [px.x, px.y]
            });
            ViewRecord { object: None, image: image.collect() }
        })
        .collect();
    fs::write(d.join("views.json"), serde_json::to_string(&CorrespondenceFile::Board { board, views }).unwrap()).unwrap();
    ok(&["calibrate", "--views", p(&d.join("views.json")), "--out", p(&d.join("calib.json"))]);
    let c = read(&d.join("calib.json"));
    assert!((c["intrinsics"]["fx"].as_f64().unwrap() - 700.0).abs() <= 1e-3);
    assert_eq!(c["board_poses"].as_array().unwrap().len(), 5);

    let x = Pose::new(rodrigues_exp(&Vec3::new(0.0, -2.3, 0.0)), Vec3::new(1.1, 0.0, 0.7));
    let y = Pose::from_translation(Vec3::new(0.0, 0.0, 0.06));
    let stations: Vec<StationSample> = (0..15)
        .map(|i| {
            let t = i as f64;
            let ee = Pose::new(
                rodrigues_exp(&Vec3::new(0.4 * (0.7 * t).sin(), 0.5 * (1.3 * t).cos(), 0.3 * t - 2.0)),
                Vec3::new(0.5, 0.02 * t, 0.3),
            );
            StationSample { base_to_ee: ee, cam_to_marker: x.inverse().compose(&ee).compose(&y) }
        })
        .collect();
    fs::write(d.join("stations.json"), serde_json::to_string(&stations).unwrap()).unwrap();
    ok(&["handeye", "--stations", p(&d.join("stations.json")), "--out", p(&d.join("he.json"))]);
    let he = read(&d.join("he.json"));
    assert_eq!(he["camera_frame"], "camera");
    assert_eq!(he["pairs"], 14);
    let got: Pose = serde_json::from_value(he["base_to_camera"].clone()).unwrap();
    let (er, et) = pose_error(&got, &x);
    assert!(er <= 1e-6 && et <= 1e-6);
}

#[test]
fn run_reports_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("small.toml"), "[scenes]\ncount = 2\n").unwrap();
    let out = ok(&["run", "--config", p(&d.join("small.toml")), "--seed", "11"]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["seeds"]["seed"], 11);
    assert_eq!(report["summary"]["planned"], 2);
    assert_eq!(report["summary"]["exit_code"], 0);

    ok(&["run", "--config", p(&d.join("small.toml")), "--seed", "11", "--out", p(&d.join("a.json"))]);
    assert_eq!(fs::read(d.join("a.json")).unwrap(), out.stdout);

    let foreign = "[scenes]\ncount = 0\nunregistered_count = 1\nunregistered = { kind = \"cylinder\", dimensions = [0.03, 0.1], sample_density = 150000.0 }\n";
    fs::write(d.join("foreign.toml"), foreign).unwrap();
    let out = pickplace(&["run", "--config", p(&d.join("foreign.toml")), "--out", p(&d.join("b.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(read(&d.join("b.json"))["scenes"][0]["status"], "no_match");

    fs::write(d.join("bad.toml"), "[scenes]\ncuont = 2\n").unwrap();
    let out = pickplace(&["run", "--config", p(&d.join("bad.toml"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml"));
}
