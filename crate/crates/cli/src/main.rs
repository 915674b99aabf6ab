use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use pickplace_core::calib::{calibrate, CorrespondenceFile, LmParams};
use pickplace_core::cloud::{load_ply, save_ply};
use pickplace_core::graspdb::{GraspDb, GripperType, MatchParams};
use pickplace_core::handeye::{calibrate_eye_to_hand, HandEyeParams, StationSample};
use pickplace_core::pipeline::{
    look_at, plan_pick_place, run_pipeline, simulate_view, synth_cloud, PipelineConfig, ShapeKind, ShapeSpec, ViewSpec, Visibility,
};
use pickplace_core::register::{align_object, IcpParams};
use pickplace_core::sampling::derive_seed;
use pickplace_core::{Pose, Vec3};

#[derive(Parser)]
#[command(name = "pickplace", version, about = "Vision-guided pick-and-place toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Intrinsic calibration from planar correspondences.
    Calibrate {
        /// Correspondence file (list of views, or board spec plus views).
        #[arg(long)]
        views: PathBuf,
        /// Levenberg-Marquardt parameters (JSON).
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Eye-to-hand calibration from robot stations.
    Handeye {
        /// JSON list of {"base_to_ee", "cam_to_marker"} poses.
        #[arg(long)]
        stations: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adds a taught face (cloud plus grasp) to a grasp database.
    Register {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        object: String,
        /// Face cloud in the robot base frame (PLY).
        #[arg(long)]
        cloud: PathBuf,
        /// Grasp pose `robot_base_to_gripper` (JSON).
        #[arg(long)]
        grasp: PathBuf,
        #[arg(long, value_parser = parse_gripper)]
        gripper: GripperType,
    },
    /// Matches a scanned cloud against a grasp database.
    Match {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        scanned: PathBuf,
        /// Match parameters (JSON).
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aligns a registered cloud onto a scanned cloud.
    Align {
        #[arg(long)]
        registered: PathBuf,
        #[arg(long)]
        scanned: PathBuf,
        /// ICP parameters (JSON).
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pick-and-place waypoints for a grasp and a place pose.
    Plan {
        /// Grasp pose (JSON).
        #[arg(long)]
        grasp: PathBuf,
        /// Place pose (JSON).
        #[arg(long)]
        place: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        approach_offset: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Samples a synthetic object cloud, optionally as seen by a camera.
    Simulate {
        #[arg(long, value_enum)]
        shape: Shape,
        /// Comma-separated dimensions in meters: box x,y,z; cylinder
        /// radius,height; lshape leg_x,leg_y,thickness,depth.
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<f64>,
        /// Surface samples per square meter.
        #[arg(long, default_value_t = 1.5e5)]
        density: f64,
        /// Object pose `robot_base_to_object` (JSON); identity if omitted.
        #[arg(long)]
        object_pose: Option<PathBuf>,
        /// Camera position x,y,z in the base frame. Without it the full
        /// cloud is written.
        #[arg(long, value_parser = parse_vec3)]
        eye: Option<Vec3>,
        /// Gaussian noise per coordinate, meters.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs the simulated end-to-end pipeline and writes its report.
    Run {
        /// Pipeline config (TOML or JSON); the built-in demo if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Report path; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Shape {
    Box,
    Cylinder,
    Lshape,
}

fn parse_gripper(s: &str) -> Result<GripperType, String> {
    s.parse()
}

fn parse_vec3(s: &str) -> Result<Vec3, String> {
    let v: Vec<f64> = s.split(',').map(|c| c.trim().parse::<f64>().map_err(|e| format!("{c:?}: {e}"))).collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, z] => Ok(Vec3::new(x, y, z)),
        _ => Err(format!("expected x,y,z, got {} values", v.len())),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_params<T: DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), |p| read_json(p))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_cloud(path: &Path) -> Result<pickplace_core::cloud::PointCloud> {
    load_ply(path).with_context(|| format!("loading {}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn execute(command: Command) -> Result<ExitCode> {
    match command {
        Command::Calibrate { views, params, out } => {
            let file: CorrespondenceFile = read_json(&views)?;
            let views = file.into_views()?;
            let params: LmParams = read_params(params.as_ref())?;
            let result = calibrate(&views, &params)?;
            log::info!("calibrated from {} views, rms {:.4} px", views.len(), result.rms_px);
            write_json(&out, &result)?;
        }
        Command::Handeye { stations, params, out } => {
            let samples: Vec<StationSample> = read_json(&stations)?;
            let params: HandEyeParams = read_params(params.as_ref())?;
            let result = calibrate_eye_to_hand(&samples, &params)?;
            write_json(&out, &result)?;
        }
        Command::Register { db, object, cloud, grasp, gripper } => {
            let mut grasp_db = if db.exists() { GraspDb::load(&db)? } else { GraspDb::new() };
            let cloud = load_cloud(&cloud)?;
            let grasp: Pose = read_json(&grasp)?;
            let face_id = grasp_db.register_face(&object, cloud, grasp, gripper)?;
            grasp_db.save(&db)?;
            println!("{face_id}");
        }
        Command::Match { db, scanned, params, out } => {
            let grasp_db = GraspDb::load(&db)?;
            let scanned = load_cloud(&scanned)?;
            let params: MatchParams = read_params(params.as_ref())?;
            let result = grasp_db.match_object(&scanned, &params)?;
            log::info!("matched {} with score {:.3}", result.face_id, result.score);
            write_json(&out, &result)?;
        }
        Command::Align { registered, scanned, params, out } => {
            let registered = load_cloud(&registered)?;
            let scanned = load_cloud(&scanned)?;
            let params: IcpParams = read_params(params.as_ref())?;
            let result = align_object(&registered, &scanned, &params)?;
            write_json(&out, &result)?;
        }
        Command::Plan { grasp, place, approach_offset, out } => {
            let grasp: Pose = read_json(&grasp)?;
            let place: Pose = read_json(&place)?;
            write_json(&out, &plan_pick_place(&grasp, &place, approach_offset)?)?;
        }
        Command::Simulate { shape, dims, density, object_pose, eye, noise, seed, out } => {
            let kind = match shape {
                Shape::Box => ShapeKind::Box,
                Shape::Cylinder => ShapeKind::Cylinder,
                Shape::Lshape => ShapeKind::Lshape,
            };
            let spec = ShapeSpec { kind, dimensions: dims, sample_density: density };
            let model = synth_cloud(&spec, seed)?;
            let object_pose: Pose = match object_pose {
                Some(p) => read_json(&p)?,
                None => Pose::identity(),
            };
            let (camera_pose, visibility) = match eye {
                Some(eye) => {
                    let target = object_pose.transform_point(&model.centroid().unwrap_or_else(Vec3::zeros));
                    (look_at(&eye, &target, &Vec3::z())?, Visibility::CameraFacing)
                }
                None => (Pose::identity(), Visibility::Full),
            };
            let view = ViewSpec { object_pose, camera_pose, noise_sigma: noise, visibility, seed: derive_seed(seed, 1) };
            let cloud = simulate_view(&model, &view)?;
            save_ply(&cloud, &out).with_context(|| format!("writing {}", out.display()))?;
            log::info!("wrote {} points", cloud.len());
        }
        Command::Run { config, seed, out } => {
            let mut config = match config {
                Some(p) => PipelineConfig::from_path(&p)?,
                None => PipelineConfig::default(),
            };
            if let Some(s) = seed {
                config.seed = s;
            }
            let report = run_pipeline(&config)?;
            let json = report.to_json();
            match out {
                Some(p) => fs::write(&p, &json).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{json}"),
            }
            if let Some(e) = report.first_error() {
                log::warn!("{e}");
            }
            let s = &report.summary;
            eprintln!("{}/{} scenes planned, {} within tolerance", s.planned, s.scenes, s.within_tolerance);
            let code = report.exit_code();
            if code != 0 {
                return Ok(ExitCode::from(u8::try_from(code).unwrap_or(1)));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
