//! Synthetic depth-camera and LiDAR streams by sphere tracing analytic
//! scenes, plus the on-disk dataset format.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Frame, GeometryError, Pose, Scene, Vec3};

pub const HIT_TOLERANCE: f64 = 1e-4;
pub const MAX_TRACE_STEPS: usize = 256;
pub const DEFAULT_MAX_POSE_STEP: f64 = 0.5;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Error, Debug)]
pub enum SimError {
    #[error("ray direction is not unit length (norm {0})")]
    NonUnitDirection(f64),
    #[error("empty frame: every ray missed")]
    EmptyFrame,
    #[error("invalid sensor model: {0}")]
    InvalidModel(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {reason}")]
    MalformedManifest { path: PathBuf, reason: String },
    #[error("truncated point file {path}: {len} bytes is not a multiple of 12")]
    TruncatedPoints { path: PathBuf, len: usize },
    #[error("point file {path}: non-finite value in point {index}")]
    NonFinitePoint { path: PathBuf, index: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io { path: path.to_path_buf(), source }
}

/// Pinhole depth camera. Camera frame: +x right, +y down, +z optical axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthCameraModel {
    pub width: usize,
    pub height: usize,
    /// Radians.
    pub horizontal_fov: f64,
    pub max_range: f64,
}

impl Default for DepthCameraModel {
    fn default() -> Self {
        Self { width: 64, height: 64, horizontal_fov: 90f64.to_radians(), max_range: 8.0 }
    }
}

impl DepthCameraModel {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.width < 8 || self.height < 8 {
            return Err(SimError::InvalidModel("camera resolution must be at least 8x8".into()));
        }
        if !(self.horizontal_fov > 0.0 && self.horizontal_fov < PI) {
            return Err(SimError::InvalidModel("horizontal fov must lie in (0, pi)".into()));
        }
        if !(self.max_range > 0.0) {
            return Err(SimError::InvalidModel("max range must be positive".into()));
        }
        Ok(())
    }

    /// Unit ray directions in the camera frame, row-major over pixels.
    pub fn ray_directions(&self) -> Vec<Vec3> {
        let f = (self.width as f64 / 2.0) / (self.horizontal_fov / 2.0).tan();
        let (cx, cy) = (self.width as f64 / 2.0, self.height as f64 / 2.0);
        let mut dirs = Vec::with_capacity(self.width * self.height);
        for v in 0..self.height {
            for u in 0..self.width {
                let d = Vec3::new((u as f64 + 0.5 - cx) / f, (v as f64 + 0.5 - cy) / f, 1.0);
                dirs.push(d.normalized().expect("non-zero ray"));
            }
        }
        dirs
    }
}

/// Spinning multi-ring LiDAR. Sensor frame: +x forward, +z up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarModel {
    pub channels: usize,
    pub horizontal_steps: usize,
    /// Radians, symmetric about the horizon.
    pub vertical_fov: f64,
    pub max_range: f64,
}

impl Default for LidarModel {
    fn default() -> Self {
        Self { channels: 16, horizontal_steps: 360, vertical_fov: 30f64.to_radians(), max_range: 20.0 }
    }
}

impl LidarModel {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.channels < 1 {
            return Err(SimError::InvalidModel("lidar needs at least one channel".into()));
        }
        if self.horizontal_steps < 8 {
            return Err(SimError::InvalidModel("lidar needs at least 8 horizontal steps".into()));
        }
        if !(self.vertical_fov >= 0.0 && self.vertical_fov < PI) {
            return Err(SimError::InvalidModel("vertical fov must lie in [0, pi)".into()));
        }
        if !(self.max_range > 0.0) {
            return Err(SimError::InvalidModel("max range must be positive".into()));
        }
        Ok(())
    }

    pub fn ray_directions(&self) -> Vec<Vec3> {
        let mut dirs = Vec::with_capacity(self.channels * self.horizontal_steps);
        for ring in 0..self.channels {
            let elevation = if self.channels == 1 {
                0.0
            } else {
                -self.vertical_fov / 2.0 + self.vertical_fov * ring as f64 / (self.channels - 1) as f64
            };
            let (se, ce) = elevation.sin_cos();
            for step in 0..self.horizontal_steps {
                let azimuth = 2.0 * PI * step as f64 / self.horizontal_steps as f64;
                let (sa, ca) = azimuth.sin_cos();
                dirs.push(Vec3::new(ce * ca, ce * sa, se));
            }
        }
        dirs
    }
}

/// Ordered sensor poses.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>, max_step: f64) -> Result<Self, SimError> {
        if poses.is_empty() {
            return Err(SimError::InvalidTrajectory("no poses".into()));
        }
        for p in &poses {
            p.validate()?;
        }
        for (i, w) in poses.windows(2).enumerate() {
            let step = w[0].translation.distance(w[1].translation);
            if step > max_step {
                return Err(SimError::InvalidTrajectory(format!(
                    "step {i}->{} moves {step:.3} m, more than {max_step} m",
                    i + 1
                )));
            }
        }
        Ok(Self { poses })
    }
}

/// Marches along `direction` by the SDF value until the surface tolerance
/// is reached. Returns the hit distance, or `None` on a miss.
pub fn sphere_trace(
    scene: &Scene,
    origin: Vec3,
    direction: Vec3,
    max_range: f64,
) -> Result<Option<f64>, SimError> {
    let n = direction.norm();
    if !((n - 1.0).abs() <= 1e-6) {
        return Err(SimError::NonUnitDirection(n));
    }
    Ok(trace_unchecked(scene, origin, direction, max_range))
}

fn trace_unchecked(scene: &Scene, origin: Vec3, direction: Vec3, max_range: f64) -> Option<f64> {
    let mut d = 0.0;
    for _ in 0..MAX_TRACE_STEPS {
        let s = scene.sdf(origin + direction * d);
        if s <= HIT_TOLERANCE {
            return Some(d);
        }
        d += s;
        if d > max_range {
            return None;
        }
    }
    None
}

fn cast_rays(scene: &Scene, pose: &Pose, dirs: &[Vec3], max_range: f64) -> Vec<Vec3> {
    let origin = pose.translation;
    dirs.par_iter()
        .filter_map(|d| {
            let world_dir = pose.rotate(*d);
            trace_unchecked(scene, origin, world_dir, max_range)
                .map(|t| (origin + world_dir * t).to_f32_precision())
        })
        .filter(|p| *p != origin)
        .collect()
}

/// One ray per pixel; misses are dropped.
pub fn render_depth_frame(
    scene: &Scene,
    pose: &Pose,
    model: &DepthCameraModel,
    index: u64,
) -> Result<Frame, SimError> {
    model.validate()?;
    pose.validate()?;
    let points = cast_rays(scene, pose, &model.ray_directions(), model.max_range);
    if points.is_empty() {
        return Err(SimError::EmptyFrame);
    }
    Ok(Frame::new(index, *pose, points)?)
}

pub fn render_lidar_frame(
    scene: &Scene,
    pose: &Pose,
    model: &LidarModel,
    index: u64,
) -> Result<Frame, SimError> {
    model.validate()?;
    pose.validate()?;
    let points = cast_rays(scene, pose, &model.ray_directions(), model.max_range);
    if points.is_empty() {
        return Err(SimError::EmptyFrame);
    }
    Ok(Frame::new(index, *pose, points)?)
}

/// Adds isotropic Gaussian noise to every point (f32-rounded).
pub fn jitter_frame(frame: &mut Frame, sigma: f64, seed: u64) {
    if sigma <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ frame.index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let normal = Normal::new(0.0, sigma).expect("sigma is positive");
    let origin = frame.sensor_origin();
    for p in frame.points.iter_mut() {
        let jittered = (*p
            + Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)))
        .to_f32_precision();
        if jittered != origin {
            *p = jittered;
        }
    }
}

/// Sensor choice for simulated datasets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SensorSpec {
    Depth(DepthCameraModel),
    Lidar(LidarModel),
}

impl SensorSpec {
    /// Sensor pose at `position` facing `target`. LiDAR poses stay level
    /// and only take the heading.
    pub fn pose_toward(&self, position: Vec3, target: Vec3) -> Result<Pose, SimError> {
        match self {
            SensorSpec::Depth(_) => Ok(Pose::look_at(position, target, Vec3::Z)?),
            SensorSpec::Lidar(_) => {
                let d = target - position;
                Ok(Pose::from_yaw(d.y.atan2(d.x), position))
            }
        }
    }

    pub fn render(&self, scene: &Scene, pose: &Pose, index: u64) -> Result<Frame, SimError> {
        match self {
            SensorSpec::Depth(m) => render_depth_frame(scene, pose, m, index),
            SensorSpec::Lidar(m) => render_lidar_frame(scene, pose, m, index),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub position: Vec3,
    pub target: Vec3,
}

/// Declarative trajectory description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrajectorySpec {
    /// Sensor circles `center` at `radius` and `height`, looking outward
    /// (rotated by `yaw_offset_deg`) and tilted down by `pitch_deg`.
    Orbit {
        center: Vec3,
        radius: f64,
        height: f64,
        n_poses: usize,
        #[serde(default = "default_turns")]
        turns: f64,
        #[serde(default)]
        yaw_offset_deg: f64,
        #[serde(default = "default_pitch")]
        pitch_deg: f64,
    },
    Waypoints { waypoints: Vec<Waypoint> },
}

fn default_turns() -> f64 {
    1.0
}

fn default_pitch() -> f64 {
    20.0
}

impl TrajectorySpec {
    pub fn waypoints(&self) -> Vec<Waypoint> {
        match self {
            TrajectorySpec::Orbit { center, radius, height, n_poses, turns, yaw_offset_deg, pitch_deg } => {
                (0..*n_poses)
                    .map(|i| {
                        let theta = 2.0 * PI * turns * i as f64 / *n_poses as f64;
                        let position =
                            Vec3::new(center.x + radius * theta.cos(), center.y + radius * theta.sin(), *height);
                        let yaw = theta + yaw_offset_deg.to_radians();
                        let pitch = -pitch_deg.to_radians();
                        let look = Vec3::new(pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), pitch.sin());
                        Waypoint { position, target: position + look }
                    })
                    .collect()
            }
            TrajectorySpec::Waypoints { waypoints } => waypoints.clone(),
        }
    }

    pub fn build(&self, sensor: &SensorSpec, max_step: f64) -> Result<Trajectory, SimError> {
        let poses = self
            .waypoints()
            .iter()
            .map(|w| sensor.pose_toward(w.position, w.target))
            .collect::<Result<Vec<_>, _>>()?;
        Trajectory::new(poses, max_step)
    }
}

/// Renders every pose of a trajectory. Frames are indexed by pose order.
pub fn simulate_frames(
    scene: &Scene,
    trajectory: &Trajectory,
    sensor: &SensorSpec,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<Frame>, SimError> {
    trajectory
        .poses
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            let mut frame = sensor.render(scene, pose, i as u64)?;
            jitter_frame(&mut frame, noise_sigma, seed);
            Ok(frame)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ManifestPose {
    rotation: [f64; 9],
    translation: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct ManifestFrame {
    index: u64,
    pose: ManifestPose,
    points_file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    frames: Vec<ManifestFrame>,
}

/// Writes `manifest.json` plus one little-endian f32 xyz file per frame.
/// Point coordinates are stored at f32 precision.
pub fn write_dataset(frames: &[Frame], directory: &Path) -> Result<PathBuf, SimError> {
    fs::create_dir_all(directory).map_err(io_err(directory))?;
    let mut records = Vec::with_capacity(frames.len());
    for frame in frames {
        let name = format!("frame_{:06}.bin", frame.index);
        let path = directory.join(&name);
        fs::write(&path, encode_points(&frame.points)).map_err(io_err(&path))?;
        records.push(ManifestFrame {
            index: frame.index,
            pose: ManifestPose {
                rotation: frame.pose.rotation_row_major(),
                translation: frame.pose.translation.to_array(),
            },
            points_file: name,
        });
    }
    let manifest_path = directory.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&Manifest { frames: records }).expect("manifest serializes");
    fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;
    Ok(manifest_path)
}

pub fn encode_points(points: &[Vec3]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(points.len() * 12);
    for p in points {
        for c in p.to_array() {
            bytes.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    bytes
}

/// Parses little-endian f32 xyz triples, rejecting truncation and
/// non-finite values.
pub fn decode_points(bytes: &[u8], path: &Path) -> Result<Vec<Vec3>, SimError> {
    if bytes.len() % 12 != 0 {
        return Err(SimError::TruncatedPoints { path: path.to_path_buf(), len: bytes.len() });
    }
    bytes
        .chunks_exact(12)
        .enumerate()
        .map(|(index, chunk)| {
            let f = |o: usize| f32::from_le_bytes(chunk[o..o + 4].try_into().unwrap()) as f64;
            let p = Vec3::new(f(0), f(4), f(8));
            if p.is_finite() {
                Ok(p)
            } else {
                Err(SimError::NonFinitePoint { path: path.to_path_buf(), index })
            }
        })
        .collect()
}

pub fn load_dataset(manifest_path: &Path) -> Result<Vec<Frame>, SimError> {
    load_dataset_frames(manifest_path)?.into_iter().map(|(_, f)| f).collect()
}

/// Parses the manifest and loads every frame independently, so one bad
/// frame does not prevent reading the others. Each entry carries the
/// manifest's frame index.
pub fn load_dataset_frames(manifest_path: &Path) -> Result<Vec<(u64, Result<Frame, SimError>)>, SimError> {
    let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| SimError::MalformedManifest {
        path: manifest_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    Ok(manifest
        .frames
        .into_iter()
        .map(|rec| {
            let load = || {
                let pose = Pose::from_row_major(rec.pose.rotation, rec.pose.translation)?;
                let path = dir.join(&rec.points_file);
                let bytes = fs::read(&path).map_err(io_err(&path))?;
                let points = decode_points(&bytes, &path)?;
                Ok(Frame::new(rec.index, pose, points)?)
            };
            (rec.index, load())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Aabb, Primitive};

    fn unit_sphere() -> Scene {
        Scene::new(
            vec![Primitive::Sphere { center: Vec3::ZERO, radius: 1.0 }],
            Aabb::new(Vec3::splat(-4.0), Vec3::splat(4.0)),
        )
        .unwrap()
    }

    fn square_room(half: f64) -> Scene {
        Scene::new(
            vec![Primitive::Room { center: Vec3::ZERO, half_extents: Vec3::new(half, half, 1.5) }],
            Aabb::new(Vec3::splat(-half - 1.0), Vec3::splat(half + 1.0)),
        )
        .unwrap()
    }

    fn demo_room() -> Scene {
        Scene::new(
            vec![
                Primitive::Room { center: Vec3::new(0.0, 0.0, 1.5), half_extents: Vec3::new(3.0, 3.0, 1.5) },
                Primitive::Sphere { center: Vec3::new(1.5, 1.0, 1.0), radius: 0.5 },
                Primitive::AxisBox { center: Vec3::new(-1.5, 0.5, 1.0), half_extents: Vec3::new(0.4, 0.3, 0.5) },
            ],
            Aabb::new(Vec3::new(-3.5, -3.5, -0.5), Vec3::new(3.5, 3.5, 3.5)),
        )
        .unwrap()
    }

    #[test]
    fn trace_hits_sphere_front() {
        let d = sphere_trace(&unit_sphere(), Vec3::new(3.0, 0.0, 0.0), -Vec3::X, 10.0).unwrap();
        assert!((d.unwrap() - 2.0).abs() < 1e-3);
        let miss = sphere_trace(&unit_sphere(), Vec3::new(3.0, 0.0, 0.0), Vec3::X, 10.0).unwrap();
        assert!(miss.is_none());
        assert!(matches!(
            sphere_trace(&unit_sphere(), Vec3::ZERO, Vec3::new(2.0, 0.0, 0.0), 1.0),
            Err(SimError::NonUnitDirection(_))
        ));
    }

    #[test]
    fn trace_matches_slab_intersection_for_box() {
        let bx = Aabb::new(Vec3::new(-0.5, -0.3, -0.7), Vec3::new(0.9, 0.4, 0.2));
        let center = (bx.min + bx.max) / 2.0;
        let scene = Scene::new(
            vec![Primitive::AxisBox { center, half_extents: bx.extent() / 2.0 }],
            Aabb::new(Vec3::splat(-5.0), Vec3::splat(5.0)),
        )
        .unwrap();
        let origin = Vec3::new(-3.0, 2.0, 1.5);
        let dir = (Vec3::new(0.2, 0.1, -0.3) - origin).normalized().unwrap();
        let (t_enter, _) = bx.ray_interval(origin, dir).unwrap();
        let d = sphere_trace(&scene, origin, dir, 20.0).unwrap().unwrap();
        assert!((d - t_enter).abs() < 1e-3, "{d} vs {t_enter}");
    }

    #[test]
    fn fronto_parallel_wall_gives_constant_depth() {
        let scene = Scene::new(
            vec![Primitive::Plane { normal: -Vec3::X, offset: -1.0 }],
            Aabb::new(Vec3::splat(-5.0), Vec3::splat(5.0)),
        )
        .unwrap();
        // Wall occupies x > 1; camera at origin looks down +x.
        let pose = Pose::look_at(Vec3::ZERO, Vec3::X, Vec3::Z).unwrap();
        let model = DepthCameraModel { width: 16, height: 16, ..Default::default() };
        let frame = render_depth_frame(&scene, &pose, &model, 0).unwrap();
        assert_eq!(frame.points.len(), 256);
        for p in &frame.points {
            let depth = pose.inverse_rotate(*p - pose.translation).z;
            assert!((depth - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn empty_half_space_is_an_error() {
        let pose = Pose::look_at(Vec3::new(3.0, 0.0, 0.0), Vec3::new(4.0, 0.0, 0.0), Vec3::Z).unwrap();
        let model = DepthCameraModel { width: 16, height: 16, ..Default::default() };
        assert!(matches!(render_depth_frame(&unit_sphere(), &pose, &model, 0), Err(SimError::EmptyFrame)));
        let lidar = LidarModel { channels: 1, horizontal_steps: 16, vertical_fov: 0.0, max_range: 5.0 };
        let far = Pose::from_translation(Vec3::new(50.0, 0.0, 30.0));
        assert!(matches!(render_lidar_frame(&unit_sphere(), &far, &lidar, 0), Err(SimError::EmptyFrame)));
    }

    #[test]
    fn room_depth_points_lie_on_surface() {
        let scene = demo_room();
        let pose = Pose::look_at(Vec3::new(0.0, -1.0, 1.5), Vec3::new(1.0, 1.0, 1.0), Vec3::Z).unwrap();
        let model = DepthCameraModel { width: 64, height: 64, ..Default::default() };
        let frame = render_depth_frame(&scene, &pose, &model, 0).unwrap();
        assert_eq!(frame.points.len(), 64 * 64);
        for p in &frame.points {
            assert!(scene.sdf(*p).abs() <= 1e-3);
            // Segments from the sensor never cross a surface.
            for k in 1..16 {
                let q = pose.translation + (*p - pose.translation) * (k as f64 / 16.0);
                assert!(scene.sdf(q) > 0.0);
            }
        }
    }

    #[test]
    fn single_ring_lidar_matches_square_room_walls() {
        let half = 2.0;
        let scene = square_room(half);
        let lidar = LidarModel { channels: 1, horizontal_steps: 360, vertical_fov: 0.0, max_range: 10.0 };
        let pose = Pose::from_translation(Vec3::ZERO);
        let frame = render_lidar_frame(&scene, &pose, &lidar, 0).unwrap();
        assert_eq!(frame.points.len(), 360);
        for (k, p) in frame.points.iter().enumerate() {
            let a = 2.0 * PI * k as f64 / 360.0;
            // Polygon ray cast: nearest exit through x = ±half or y = ±half.
            let tx = if a.cos().abs() > 1e-12 { half / a.cos().abs() } else { f64::INFINITY };
            let ty = if a.sin().abs() > 1e-12 { half / a.sin().abs() } else { f64::INFINITY };
            let expected = tx.min(ty);
            assert!((p.norm() - expected).abs() < 1e-3, "ray {k}: {} vs {expected}", p.norm());
        }
    }

    #[test]
    fn multi_ring_lidar_bounded_by_ray_count() {
        let lidar = LidarModel { channels: 16, horizontal_steps: 90, ..Default::default() };
        let pose = Pose::from_translation(Vec3::new(0.0, 0.0, 1.5));
        let frame = render_lidar_frame(&demo_room(), &pose, &lidar, 0).unwrap();
        assert!(frame.points.len() <= 16 * 90);
        assert!(!frame.points.is_empty());
    }

    #[test]
    fn trajectory_step_limit() {
        let a = Pose::from_translation(Vec3::ZERO);
        let b = Pose::from_translation(Vec3::new(0.6, 0.0, 0.0));
        assert!(Trajectory::new(vec![a, b], DEFAULT_MAX_POSE_STEP).is_err());
        assert!(Trajectory::new(vec![], DEFAULT_MAX_POSE_STEP).is_err());
        assert!(Trajectory::new(vec![a, b], 1.0).is_ok());
    }

    fn three_frames() -> Vec<Frame> {
        let scene = demo_room();
        let sensor = SensorSpec::Depth(DepthCameraModel { width: 16, height: 16, ..Default::default() });
        let spec = TrajectorySpec::Orbit {
            center: Vec3::ZERO,
            radius: 1.0,
            height: 1.5,
            n_poses: 3,
            turns: 0.2,
            yaw_offset_deg: 0.0,
            pitch_deg: 20.0,
        };
        let traj = spec.build(&sensor, DEFAULT_MAX_POSE_STEP).unwrap();
        simulate_frames(&scene, &traj, &sensor, 0.0, 1).unwrap()
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let frames = three_frames();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&frames, dir.path()).unwrap();
        let loaded = load_dataset(&manifest).unwrap();
        assert_eq!(frames.len(), loaded.len());
        for (a, b) in frames.iter().zip(&loaded) {
            assert_eq!(a.index, b.index);
            assert_eq!(a.pose.rotation_row_major().map(f64::to_bits), b.pose.rotation_row_major().map(f64::to_bits));
            assert_eq!(a.pose.translation.to_array().map(f64::to_bits), b.pose.translation.to_array().map(f64::to_bits));
            let bits = |f: &Frame| f.points.iter().flat_map(|p| p.to_array().map(f64::to_bits)).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn missing_point_file_is_named() {
        let frames = three_frames();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&frames, dir.path()).unwrap();
        fs::remove_file(dir.path().join("frame_000001.bin")).unwrap();
        let err = load_dataset(&manifest).unwrap_err().to_string();
        assert!(err.contains("frame_000001.bin"), "{err}");
    }

    #[test]
    fn nan_and_truncation_rejected() {
        let frames = three_frames();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&frames, dir.path()).unwrap();
        let path = dir.path().join("frame_000000.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_dataset(&manifest), Err(SimError::NonFinitePoint { index: 0, .. })));
        bytes.truncate(bytes.len() - 5);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_dataset(&manifest), Err(SimError::TruncatedPoints { .. })));
        fs::write(&manifest, "{\"frames\": 3}").unwrap();
        assert!(matches!(load_dataset(&manifest), Err(SimError::MalformedManifest { .. })));
    }

    #[test]
    fn jitter_is_seeded() {
        let mut a = three_frames();
        let mut b = a.clone();
        jitter_frame(&mut a[0], 0.01, 5);
        jitter_frame(&mut b[0], 0.01, 5);
        assert_eq!(a[0], b[0]);
        assert_ne!(a[0], three_frames()[0]);
    }
}
