//! Taught grasps: per-face clouds paired with the grasp demonstrated on
//! that face, matched against freshly scanned clouds.
//!
//! On disk a database is a directory with one subdirectory per object:
//!
//! ```text
//! <db>/<object_id>/manifest.json
//! <db>/<object_id>/face_0.ply
//! <db>/<object_id>/face_1.ply
//! ```
//!
//! Everything is stored in the `robot_base` frame.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::ply::{read_ply, write_ply};
use crate::cloud::{voxel_downsample, PlyError, PlyFormat, PointCloud};
use crate::geom3::{FrameId, Pose, Vec3};
use crate::register::{coarse_align_pca, compute_fitness, icp_from_each, yaw_hypotheses, AlignmentResult, IcpParams, RegisterError};

pub const SCHEMA_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum GraspDbError {
    #[error("cloud is in frame {got:?}; expected {expected:?}")]
    WrongFrame { expected: String, got: String },
    #[error("cloud is empty")]
    EmptyCloud,
    #[error("database has no faces to match against")]
    EmptyDb,
    #[error("no registered face matches: best score {best_score:.3} (face {best_face:?}) is below threshold {threshold}")]
    NoMatch { best_score: f64, best_face: Option<String>, threshold: f64 },
    #[error("invalid object id {0:?}: use 1-128 characters from [A-Za-z0-9_.-], not starting with '.'")]
    InvalidObjectId(String),
    #[error("invalid database: {0}")]
    Invalid(String),
    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("manifest references missing cloud file {0}")]
    MissingSidecar(PathBuf),
    #[error("{path}: schema_version {found} is not supported (expected {expected})")]
    SchemaVersionMismatch { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripperType {
    TwoFinger,
    ThreeFinger,
}

impl std::str::FromStr for GripperType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "two_finger" => Ok(Self::TwoFinger),
            "three_finger" => Ok(Self::ThreeFinger),
            other => Err(format!("unknown gripper type {other:?} (expected two_finger or three_finger)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceRecord {
    pub face_id: String,
    pub cloud: PointCloud,
    /// Gripper pose at grasp time (`robot_base_to_gripper`).
    pub grasp: Pose,
    pub gripper_type: GripperType,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectModel {
    pub object_id: String,
    pub faces: Vec<FaceRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchParams {
    /// Final (fine) ICP stage.
    pub icp: IcpParams,
    /// Distance within which a point counts as matched when scoring,
    /// meters.
    pub score_gate: f64,
    /// Minimum match score.
    pub accept_threshold: f64,
    /// Correspondence gate of the coarse stage, meters.
    pub coarse_gate: f64,
    /// Voxel edge for the coarse stage clouds; 0 keeps every point.
    pub coarse_voxel: f64,
    /// Extra starts rotated about the base z axis, added to the PCA starts.
    pub yaw_hypotheses: usize,
    /// Coarse results per face carried into the fine stage.
    pub refine_top: usize,
    /// Discard alignments that tilt the base z axis by more than this
    /// (degrees). For objects that keep resting on the same face.
    pub max_tilt_deg: Option<f64>,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            icp: IcpParams { max_correspondence_dist: 0.01, ..IcpParams::default() },
            score_gate: 0.004,
            accept_threshold: 0.7,
            coarse_gate: 0.03,
            coarse_voxel: 0.008,
            yaw_hypotheses: 12,
            refine_top: 3,
            max_tilt_deg: None,
        }
    }
}

impl MatchParams {
    pub fn validate(&self) -> Result<(), GraspDbError> {
        self.icp.validate().map_err(|e| GraspDbError::Invalid(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.accept_threshold) {
            return Err(GraspDbError::Invalid(format!("accept_threshold must be in [0, 1], got {}", self.accept_threshold)));
        }
        if !(self.score_gate.is_finite() && self.score_gate > 0.0) {
            return Err(GraspDbError::Invalid(format!("score_gate must be positive, got {}", self.score_gate)));
        }
        if !(self.coarse_gate.is_finite() && self.coarse_gate > 0.0) {
            return Err(GraspDbError::Invalid(format!("coarse_gate must be positive, got {}", self.coarse_gate)));
        }
        if !(self.coarse_voxel.is_finite() && self.coarse_voxel >= 0.0) {
            return Err(GraspDbError::Invalid(format!("coarse_voxel must be >= 0, got {}", self.coarse_voxel)));
        }
        if let Some(t) = self.max_tilt_deg {
            if !(t.is_finite() && t >= 0.0) {
                return Err(GraspDbError::Invalid(format!("max_tilt_deg must be >= 0, got {t}")));
            }
        }
        if self.refine_top < 1 {
            return Err(GraspDbError::Invalid("refine_top must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub object_id: String,
    pub face_id: String,
    pub alignment: AlignmentResult,
    /// Fraction of aligned face points within `score_gate` of the scan.
    pub fitness: f64,
    /// Fraction of scanned points within `score_gate` of the aligned face.
    pub overlap: f64,
    /// `min(fitness, overlap)`, the ranking and acceptance score.
    pub score: f64,
    pub grasp_in_scene: Pose,
}

struct Candidate {
    alignment: AlignmentResult,
    fitness: f64,
    overlap: f64,
}

impl Candidate {
    fn new(alignment: AlignmentResult, face: &PointCloud, scanned: &PointCloud, gate: f64) -> Self {
        let fitness = compute_fitness(face, scanned, &alignment.transform, gate).0;
        let overlap = compute_fitness(scanned, face, &alignment.transform.inverse(), gate).0;
        Self { alignment, fitness, overlap }
    }

    fn score(&self) -> f64 {
        self.fitness.min(self.overlap)
    }

    /// Higher score, then lower RMSE.
    fn beats(&self, other: &Candidate) -> bool {
        self.score() > other.score() || (self.score() == other.score() && self.alignment.inlier_rmse < other.alignment.inlier_rmse)
    }
}

/// Angle between the base z axis and its image under `pose`.
fn tilt(pose: &Pose) -> f64 {
    (pose.rotation() * Vec3::z()).z.clamp(-1.0, 1.0).acos()
}

fn downsample(cloud: &PointCloud, voxel: f64) -> PointCloud {
    if voxel > 0.0 {
        voxel_downsample(cloud, voxel).expect("positive voxel")
    } else {
        cloud.clone()
    }
}

/// Multi-start, coarse-to-fine alignment of one taught face onto the scan.
fn align_face(
    face: &PointCloud,
    scanned: &PointCloud,
    scanned_coarse: &PointCloud,
    params: &MatchParams,
) -> Result<Candidate, RegisterError> {
    let mut starts = coarse_align_pca(face, scanned).unwrap_or_default();
    starts.extend(yaw_hypotheses(face, scanned, params.yaw_hypotheses)?);
    if starts.is_empty() {
        starts.push(Pose::identity());
    }
    let max_tilt = params.max_tilt_deg.map(f64::to_radians);
    let upright = |p: &Pose| max_tilt.is_none_or(|m| tilt(p) <= m);
    let face_coarse = downsample(face, params.coarse_voxel);
    let coarse_params = IcpParams { max_correspondence_dist: params.coarse_gate, ..params.icp };
    let mut coarse: Vec<(usize, Candidate)> = icp_from_each(&face_coarse, scanned_coarse, &starts, &coarse_params)?
        .into_iter()
        .enumerate()
        .filter_map(|(i, r)| r.ok().map(|a| (i, a)))
        .filter(|(_, a)| upright(&a.transform))
        .map(|(i, a)| (i, Candidate::new(a, &face_coarse, scanned_coarse, params.coarse_gate)))
        .collect();
    coarse.sort_by(|(i, a), (j, b)| {
        b.score().total_cmp(&a.score()).then(a.alignment.inlier_rmse.total_cmp(&b.alignment.inlier_rmse)).then(i.cmp(j))
    });
    let inits: Vec<Pose> = coarse.iter().take(params.refine_top).map(|(_, c)| c.alignment.transform).collect();
    if inits.is_empty() {
        return Err(RegisterError::NoCorrespondences);
    }
    let mut best: Option<Candidate> = None;
    let mut first_err = None;
    for r in icp_from_each(face, scanned, &inits, &params.icp)? {
        match r {
            Ok(a) if !upright(&a.transform) => {}
            Ok(a) => {
                let c = Candidate::new(a, face, scanned, params.score_gate);
                if best.as_ref().is_none_or(|b| c.beats(b)) {
                    best = Some(c);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_err.unwrap_or(RegisterError::NoCorrespondences))
}

/// Grasp for the moved object: the alignment applied to the taught grasp.
pub fn transfer_grasp(alignment: &Pose, registered_grasp: &Pose) -> Pose {
    alignment.compose(registered_grasp)
}

fn validate_object_id(id: &str) -> Result<(), GraspDbError> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(GraspDbError::InvalidObjectId(id.to_string()))
    }
}

fn check_cloud(cloud: &PointCloud) -> Result<(), GraspDbError> {
    if cloud.frame().as_str() != FrameId::ROBOT_BASE {
        return Err(GraspDbError::WrongFrame { expected: FrameId::ROBOT_BASE.into(), got: cloud.frame().as_str().into() });
    }
    if cloud.is_empty() {
        return Err(GraspDbError::EmptyCloud);
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GraspDb {
    objects: BTreeMap<String, ObjectModel>,
}

impl GraspDb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn objects(&self) -> impl Iterator<Item = &ObjectModel> {
        self.objects.values()
    }

    pub fn object(&self, object_id: &str) -> Option<&ObjectModel> {
        self.objects.get(object_id)
    }

    pub fn face_count(&self) -> usize {
        self.objects.values().map(|o| o.faces.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.face_count() == 0
    }

    /// Records a taught face and returns its id, `<object_id>_<ordinal>`.
    pub fn register_face(
        &mut self,
        object_id: &str,
        cloud: PointCloud,
        grasp: Pose,
        gripper_type: GripperType,
    ) -> Result<String, GraspDbError> {
        self.register_face_at(object_id, cloud, grasp, gripper_type, Utc::now())
    }

    /// [`register_face`](Self::register_face) with an explicit timestamp.
    pub fn register_face_at(
        &mut self,
        object_id: &str,
        cloud: PointCloud,
        grasp: Pose,
        gripper_type: GripperType,
        created_at: DateTime<Utc>,
    ) -> Result<String, GraspDbError> {
        validate_object_id(object_id)?;
        check_cloud(&cloud)?;
        if !grasp.is_finite() {
            return Err(GraspDbError::Invalid("grasp pose is not finite".into()));
        }
        let model = self
            .objects
            .entry(object_id.to_string())
            .or_insert_with(|| ObjectModel { object_id: object_id.to_string(), faces: Vec::new() });
        let face_id = format!("{object_id}_{}", model.faces.len());
        model.faces.push(FaceRecord { face_id: face_id.clone(), cloud, grasp, gripper_type, created_at });
        Ok(face_id)
    }

    /// Aligns every registered face onto `scanned` and returns the best one.
    ///
    /// Each face is aligned from the PCA starts plus `yaw_hypotheses` starts,
    /// first on voxel-downsampled clouds with a wide gate, then on the full
    /// clouds with the fine gate. Faces are ranked by score, the smaller of
    /// fitness and overlap, then by lower inlier RMSE, then by face id.
    pub fn match_object(&self, scanned: &PointCloud, params: &MatchParams) -> Result<MatchResult, GraspDbError> {
        params.validate()?;
        check_cloud(scanned)?;
        let faces: Vec<(&ObjectModel, &FaceRecord)> = self.objects.values().flat_map(|o| o.faces.iter().map(move |f| (o, f))).collect();
        if faces.is_empty() {
            return Err(GraspDbError::EmptyDb);
        }
        let scanned_coarse = downsample(scanned, params.coarse_voxel);
        let results: Vec<Result<Candidate, RegisterError>> =
            faces.par_iter().map(|(_, f)| align_face(&f.cloud, scanned, &scanned_coarse, params)).collect();

        let mut best: Option<(usize, Candidate)> = None;
        for (i, r) in results.into_iter().enumerate() {
            let c = match r {
                Ok(c) => c,
                Err(e) => {
                    log::debug!("face {} not aligned: {e}", faces[i].1.face_id);
                    continue;
                }
            };
            let wins = match &best {
                None => true,
                Some((j, b)) => c.beats(b) || (!b.beats(&c) && faces[i].1.face_id < faces[*j].1.face_id),
            };
            if wins {
                best = Some((i, c));
            }
        }
        let threshold = params.accept_threshold;
        match best {
            Some((i, c)) if c.score() >= threshold => {
                let (object, face) = faces[i];
                Ok(MatchResult {
                    object_id: object.object_id.clone(),
                    face_id: face.face_id.clone(),
                    grasp_in_scene: transfer_grasp(&c.alignment.transform, &face.grasp),
                    score: c.score(),
                    fitness: c.fitness,
                    overlap: c.overlap,
                    alignment: c.alignment,
                })
            }
            Some((i, c)) => Err(GraspDbError::NoMatch { best_score: c.score(), best_face: Some(faces[i].1.face_id.clone()), threshold }),
            None => Err(GraspDbError::NoMatch { best_score: 0.0, best_face: None, threshold }),
        }
    }

    /// Writes the database under `root`. Each file is written to a temporary
    /// sibling and renamed into place; object directories and face files
    /// that are no longer part of the database are removed.
    pub fn save(&self, root: impl AsRef<Path>) -> Result<(), GraspDbError> {
        let root = root.as_ref();
        fs::create_dir_all(root).map_err(io_err(root))?;
        for model in self.objects.values() {
            let dir = root.join(&model.object_id);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let mut entries = Vec::with_capacity(model.faces.len());
            for (n, face) in model.faces.iter().enumerate() {
                let file = format!("face_{n}.ply");
                write_atomic(&dir.join(&file), |w| write_ply(&face.cloud, w, PlyFormat::Ascii))?;
                entries.push(FaceEntry {
                    face_id: face.face_id.clone(),
                    cloud_file: file,
                    points: face.cloud.len(),
                    grasp: face.grasp,
                    gripper_type: face.gripper_type,
                    created_at: face.created_at,
                });
            }
            let manifest = Manifest { schema_version: SCHEMA_VERSION, object_id: model.object_id.clone(), faces: entries };
            write_atomic(&dir.join(MANIFEST), |w| {
                serde_json::to_writer_pretty(&mut *w, &manifest)?;
                w.write_all(b"\n")
            })?;
            remove_stale_faces(&dir, model.faces.len())?;
        }
        for dir in object_dirs(root)? {
            let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if !self.objects.contains_key(name) {
                fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
            }
        }
        Ok(())
    }

    /// Reads a database written by [`save`](Self::save), validating every
    /// record.
    pub fn load(root: impl AsRef<Path>) -> Result<Self, GraspDbError> {
        let root = root.as_ref();
        let mut db = GraspDb::new();
        for dir in object_dirs(root)? {
            let path = dir.join(MANIFEST);
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| GraspDbError::Parse { path: path.clone(), message: e.to_string() })?;
            let found = value.get("schema_version").and_then(|v| v.as_u64());
            match found {
                Some(v) if v == u64::from(SCHEMA_VERSION) => {}
                Some(v) => {
                    return Err(GraspDbError::SchemaVersionMismatch {
                        path,
                        found: u32::try_from(v).unwrap_or(u32::MAX),
                        expected: SCHEMA_VERSION,
                    })
                }
                None => return Err(GraspDbError::Parse { path, message: "missing or non-integer schema_version".into() }),
            }
            let manifest: Manifest =
                serde_json::from_value(value).map_err(|e| GraspDbError::Parse { path: path.clone(), message: e.to_string() })?;
            let dir_name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if manifest.object_id != dir_name {
                return Err(GraspDbError::Invalid(format!(
                    "{}: object_id {:?} does not match its directory",
                    path.display(),
                    manifest.object_id
                )));
            }
            validate_object_id(&manifest.object_id)?;
            let mut faces = Vec::with_capacity(manifest.faces.len());
            for entry in manifest.faces {
                if faces.iter().any(|f: &FaceRecord| f.face_id == entry.face_id) {
                    return Err(GraspDbError::Invalid(format!("{}: duplicate face id {:?}", path.display(), entry.face_id)));
                }
                if entry.cloud_file.contains(['/', '\\']) || entry.cloud_file.starts_with('.') {
                    return Err(GraspDbError::Invalid(format!("{}: bad cloud file name {:?}", path.display(), entry.cloud_file)));
                }
                let ply = dir.join(&entry.cloud_file);
                let file = match fs::File::open(&ply) {
                    Ok(f) => f,
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(GraspDbError::MissingSidecar(ply)),
                    Err(e) => return Err(GraspDbError::Io { path: ply, source: e }),
                };
                let cloud = read_ply(std::io::BufReader::new(file)).map_err(|e| match e {
                    PlyError::Io(source) => GraspDbError::Io { path: ply.clone(), source },
                    other => GraspDbError::Parse { path: ply.clone(), message: other.to_string() },
                })?;
                check_cloud(&cloud)?;
                if cloud.len() != entry.points {
                    return Err(GraspDbError::Invalid(format!(
                        "{} holds {} points but the manifest declares {}",
                        ply.display(),
                        cloud.len(),
                        entry.points
                    )));
                }
                faces.push(FaceRecord {
                    face_id: entry.face_id,
                    cloud,
                    grasp: entry.grasp,
                    gripper_type: entry.gripper_type,
                    created_at: entry.created_at,
                });
            }
            db.objects.insert(manifest.object_id.clone(), ObjectModel { object_id: manifest.object_id, faces });
        }
        Ok(db)
    }
}

pub fn save_db(db: &GraspDb, root: impl AsRef<Path>) -> Result<(), GraspDbError> {
    db.save(root)
}

pub fn load_db(root: impl AsRef<Path>) -> Result<GraspDb, GraspDbError> {
    GraspDb::load(root)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    object_id: String,
    faces: Vec<FaceEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FaceEntry {
    face_id: String,
    cloud_file: String,
    points: usize,
    grasp: Pose,
    gripper_type: GripperType,
    created_at: DateTime<Utc>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GraspDbError + '_ {
    move |source| GraspDbError::Io { path: path.to_path_buf(), source }
}

fn write_atomic(
    path: &Path,
    write: impl FnOnce(&mut BufWriter<&mut tempfile::NamedTempFile>) -> std::io::Result<()>,
) -> Result<(), GraspDbError> {
    let dir = path.parent().expect("file inside a directory");
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    {
        let mut w = BufWriter::new(&mut tmp);
        write(&mut w).map_err(io_err(path))?;
        w.flush().map_err(io_err(path))?;
    }
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| GraspDbError::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

/// Subdirectories of `root` that hold a manifest, sorted by name.
fn object_dirs(root: &Path) -> Result<Vec<PathBuf>, GraspDbError> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let path = entry.path();
        if path.is_dir() && path.join(MANIFEST).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn remove_stale_faces(dir: &Path, keep: usize) -> Result<(), GraspDbError> {
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let index = name.strip_prefix("face_").and_then(|s| s.strip_suffix(".ply")).and_then(|s| s.parse::<usize>().ok());
        if index.is_some_and(|n| n >= keep) {
            fs::remove_file(&path).map_err(io_err(&path))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom3::{pose_error, rodrigues_exp, Vec3};
    use crate::sampling::{random_pose, seeded_rng};
    use chrono::TimeZone;
    use rand::Rng;

    /// An asymmetric blob of surface-like points around `offset`.
    fn shape(seed: u64, offset: Vec3) -> PointCloud {
        let mut rng = seeded_rng(seed);
        let mut pts = Vec::new();
        for _ in 0..600 {
            let u: f64 = rng.random_range(0.0..1.0);
            let v: f64 = rng.random_range(0.0..1.0);
            pts.push(offset + Vec3::new(0.08 * u, 0.05 * v, 0.02 * (3.0 * u).sin() * v + 0.01 * u * u));
        }
        for _ in 0..200 {
            let v: f64 = rng.random_range(0.0..1.0);
            let w: f64 = rng.random_range(0.0..1.0);
            pts.push(offset + Vec3::new(0.0, 0.05 * v, 0.04 * w));
        }
        PointCloud::new(pts, FrameId::robot_base()).unwrap()
    }

    fn when() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 5, 1, 12, 0, 0).unwrap()
    }

    fn grasp() -> Pose {
        Pose::new(rodrigues_exp(&Vec3::new(3.0, 0.1, 0.0)), Vec3::new(0.04, 0.025, 0.05))
    }

    #[test]
    fn face_naming_and_errors() {
        let mut db = GraspDb::new();
        assert_eq!(db.register_face_at("bracket", shape(1, Vec3::zeros()), grasp(), GripperType::TwoFinger, when()).unwrap(), "bracket_0");
        for n in 1..4 {
            let id = db.register_face_at("bracket", shape(n, Vec3::zeros()), grasp(), GripperType::TwoFinger, when()).unwrap();
            assert_eq!(id, format!("bracket_{n}"));
        }
        let model = db.object("bracket").unwrap();
        assert_eq!(model.faces.len(), 4);
        let mut ids: Vec<_> = model.faces.iter().map(|f| f.face_id.clone()).collect();
        ids.dedup();
        assert_eq!(ids.len(), 4);

        let cam = shape(5, Vec3::zeros()).with_frame(FrameId::camera());
        assert!(matches!(db.register_face("bracket", cam, grasp(), GripperType::TwoFinger), Err(GraspDbError::WrongFrame { .. })));
        let empty = PointCloud::empty(FrameId::robot_base());
        assert!(matches!(db.register_face("bracket", empty, grasp(), GripperType::TwoFinger), Err(GraspDbError::EmptyCloud)));
        assert!(matches!(
            db.register_face("../evil", shape(1, Vec3::zeros()), grasp(), GripperType::TwoFinger),
            Err(GraspDbError::InvalidObjectId(_))
        ));
    }

    #[test]
    fn transfer_examples() {
        let g = grasp();
        assert_eq!(transfer_grasp(&Pose::identity(), &g), g);
        let moved = transfer_grasp(&Pose::from_translation(Vec3::new(0.1, 0.0, 0.0)), &g);
        assert!((moved.translation() - (g.translation() + Vec3::new(0.1, 0.0, 0.0))).norm() <= 1e-15);
        assert_eq!(moved.rotation(), g.rotation());

        // Object-relative grasp is preserved: obj⁻¹ ∘ grasp before and after moving by G.
        let mut rng = seeded_rng(2);
        let obj = random_pose(&mut rng, 0.5);
        let motion = random_pose(&mut rng, 0.5);
        let taught_rel = obj.inverse().compose(&g);
        let after_rel = motion.compose(&obj).inverse().compose(&transfer_grasp(&motion, &g));
        let (r, t) = pose_error(&taught_rel, &after_rel);
        assert!(r <= 1e-9 && t <= 1e-9);
    }

    fn two_object_db() -> GraspDb {
        let mut db = GraspDb::new();
        for (obj, base) in [("alpha", 10), ("beta", 20)] {
            for k in 0..3 {
                let g = Pose::new(rodrigues_exp(&Vec3::new(0.1 * k as f64, 3.0, 0.0)), Vec3::new(0.01 * k as f64, 0.0, 0.3));
                let gripper = if k % 2 == 0 { GripperType::TwoFinger } else { GripperType::ThreeFinger };
                db.register_face_at(obj, shape(base + k, Vec3::new(0.0, 0.0, k as f64 * 0.01)), g, gripper, when()).unwrap();
            }
        }
        db
    }

    #[test]
    fn match_verbatim_and_moved() {
        let db = two_object_db();
        let face = &db.object("beta").unwrap().faces[1];
        let r = db.match_object(&face.cloud, &MatchParams::default()).unwrap();
        assert_eq!((r.object_id.as_str(), r.face_id.as_str()), ("beta", "beta_1"));
        assert_eq!(r.alignment.fitness, 1.0);
        let (er, et) = pose_error(&r.grasp_in_scene, &face.grasp);
        assert!(er <= 1e-9 && et <= 1e-9);

        let mut rng = seeded_rng(3);
        let g = random_pose(&mut rng, 0.3);
        let scanned = face.cloud.transformed(&g, FrameId::robot_base());
        let r = db.match_object(&scanned, &MatchParams::default()).unwrap();
        assert_eq!(r.face_id, "beta_1");
        let (er, et) = pose_error(&r.grasp_in_scene, &g.compose(&face.grasp));
        assert!(er <= 0.5f64.to_radians() && et <= 0.002);
        // Object-frame grasp invariance.
        let (er, et) = pose_error(&g.inverse().compose(&r.grasp_in_scene), &face.grasp);
        assert!(er <= 0.5f64.to_radians() && et <= 0.002);
    }

    #[test]
    fn match_unregistered_and_threshold_monotone() {
        let db = two_object_db();
        let mut rng = seeded_rng(4);
        let pts =
            (0..500).map(|_| Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1))).collect();
        let foreign = PointCloud::new(pts, FrameId::robot_base()).unwrap();
        for threshold in [0.7, 0.8, 0.95] {
            let params = MatchParams { accept_threshold: threshold, ..Default::default() };
            assert!(matches!(db.match_object(&foreign, &params), Err(GraspDbError::NoMatch { .. })));
        }
        assert!(matches!(GraspDb::new().match_object(&foreign, &MatchParams::default()), Err(GraspDbError::EmptyDb)));
        let cam = foreign.with_frame(FrameId::camera());
        assert!(matches!(db.match_object(&cam, &MatchParams::default()), Err(GraspDbError::WrongFrame { .. })));
    }

    #[test]
    fn tilt_limit_rejects_toppled_alignments() {
        let db = two_object_db();
        let face = &db.object("alpha").unwrap().faces[0];
        let upright = Pose::new(rodrigues_exp(&Vec3::new(0.0, 0.0, 1.0)), Vec3::new(0.3, 0.1, 0.0));
        let toppled = Pose::new(rodrigues_exp(&Vec3::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0)), Vec3::new(0.3, 0.1, 0.0));
        let limited = MatchParams { max_tilt_deg: Some(10.0), ..Default::default() };
        for params in [MatchParams::default(), limited] {
            let r = db.match_object(&face.cloud.transformed(&upright, FrameId::robot_base()), &params).unwrap();
            assert_eq!(r.face_id, "alpha_0");
        }
        let scanned = face.cloud.transformed(&toppled, FrameId::robot_base());
        assert_eq!(db.match_object(&scanned, &MatchParams::default()).unwrap().face_id, "alpha_0");
        match db.match_object(&scanned, &limited) {
            Ok(r) => assert!(tilt(&r.alignment.transform) <= 10f64.to_radians()),
            Err(e) => assert!(matches!(e, GraspDbError::NoMatch { .. })),
        }
        assert!(MatchParams { max_tilt_deg: Some(-1.0), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn score_counts_unexplained_scan_points() {
        let db = two_object_db();
        let face = &db.object("alpha").unwrap().faces[1];
        // Clutter next to the face that no taught point explains.
        let mut rng = seeded_rng(6);
        let clutter = |n: usize, rng: &mut crate::sampling::SimRng| -> Vec<Vec3> {
            (0..n).map(|_| Vec3::new(rng.random_range(0.12..0.16), rng.random_range(0.0..0.05), rng.random_range(0.0..0.02))).collect()
        };
        let mut pts = face.cloud.points().to_vec();
        pts.extend(clutter(100, &mut rng));
        let scanned = PointCloud::new(pts, FrameId::robot_base()).unwrap();
        let r = db.match_object(&scanned, &MatchParams::default()).unwrap();
        assert_eq!(r.face_id, "alpha_1");
        assert_eq!(r.fitness, 1.0);
        assert!((r.overlap - 800.0 / 900.0).abs() <= 1e-9, "{}", r.overlap);
        assert_eq!(r.score, r.fitness.min(r.overlap));
        assert!(r.alignment.fitness >= r.score);

        let mut pts = face.cloud.points().to_vec();
        pts.extend(clutter(800, &mut rng));
        let scanned = PointCloud::new(pts, FrameId::robot_base()).unwrap();
        match db.match_object(&scanned, &MatchParams::default()) {
            Err(GraspDbError::NoMatch { best_score, .. }) => assert!(best_score < 0.7),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn match_is_deterministic() {
        let db = two_object_db();
        let face = &db.object("alpha").unwrap().faces[2];
        let scanned = face.cloud.transformed(&random_pose(&mut seeded_rng(5), 0.2), FrameId::robot_base());
        let a = serde_json::to_string(&db.match_object(&scanned, &MatchParams::default()).unwrap()).unwrap();
        let b = serde_json::to_string(&db.match_object(&scanned, &MatchParams::default()).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let db = two_object_db();
        db.save(dir.path()).unwrap();
        assert!(dir.path().join("alpha/manifest.json").is_file());
        assert!(dir.path().join("beta/face_2.ply").is_file());
        let back = GraspDb::load(dir.path()).unwrap();
        assert_eq!(back, db);

        // Re-saving a smaller database removes what is gone.
        let mut small = GraspDb::new();
        small.register_face_at("alpha", shape(1, Vec3::zeros()), grasp(), GripperType::TwoFinger, when()).unwrap();
        small.save(dir.path()).unwrap();
        assert!(!dir.path().join("beta").exists());
        assert!(!dir.path().join("alpha/face_1.ply").exists());
        assert_eq!(GraspDb::load(dir.path()).unwrap(), small);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        two_object_db().save(dir.path()).unwrap();
        fs::remove_file(dir.path().join("beta/face_1.ply")).unwrap();
        match GraspDb::load(dir.path()) {
            Err(GraspDbError::MissingSidecar(p)) => assert!(p.ends_with("beta/face_1.ply")),
            other => panic!("{other:?}"),
        }

        let dir = tempfile::tempdir().unwrap();
        two_object_db().save(dir.path()).unwrap();
        let path = dir.path().join("alpha/manifest.json");
        let text = fs::read_to_string(&path).unwrap().replacen("\"schema_version\": 1", "\"schema_version\": 99", 1);
        fs::write(&path, text).unwrap();
        assert!(matches!(GraspDb::load(dir.path()), Err(GraspDbError::SchemaVersionMismatch { found: 99, .. })));

        fs::write(&path, "{not json").unwrap();
        assert!(matches!(GraspDb::load(dir.path()), Err(GraspDbError::Parse { .. })));
        assert!(matches!(GraspDb::load(dir.path().join("nope")), Err(GraspDbError::Io { .. })));
    }

    #[test]
    fn grasp_precision_survives_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut db = GraspDb::new();
        let g = Pose::new(rodrigues_exp(&Vec3::new(0.123456789012345, -1.1, 2.0)), Vec3::new(0.1 + 0.2, 1.0 / 3.0, -2e-17));
        db.register_face_at("p", shape(9, Vec3::zeros()), g, GripperType::ThreeFinger, when()).unwrap();
        db.save(dir.path()).unwrap();
        let back = GraspDb::load(dir.path()).unwrap();
        assert_eq!(back.object("p").unwrap().faces[0].grasp.wxyz(), g.wxyz());
        assert_eq!(back.object("p").unwrap().faces[0].grasp.translation(), g.translation());
    }
}
