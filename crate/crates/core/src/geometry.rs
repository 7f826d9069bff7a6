//! Geometric primitives, analytic ground-truth scenes and brute-force
//! distance queries.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Index, Mul, Neg, Sub};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Finite-difference step used for ground-truth gradients.
pub const GRADIENT_STEP: f64 = 1e-5;

/// Below this pre-normalization magnitude a finite-difference gradient is
/// treated as sitting on the medial axis.
pub const UNRELIABLE_GRADIENT_MAGNITUDE: f64 = 0.5;

#[derive(Error, Debug)]
pub enum GeometryError {
    #[error("empty point cloud")]
    EmptyPointCloud,
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("scene file {path}: {source}")]
    SceneIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scene file {path}: {source}")]
    SceneParse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// A point or direction in world space, meters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub const fn splat(v: f64) -> Self {
        Self::new(v, v, v)
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    /// Unit vector in the same direction; `None` for the zero vector.
    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| self / n)
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn distance_squared(self, o: Vec3) -> f64 {
        (self - o).norm_squared()
    }

    pub fn abs(self) -> Vec3 {
        Vec3::new(self.x.abs(), self.y.abs(), self.z.abs())
    }

    pub fn max(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn min(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max_element(self) -> f64 {
        self.x.max(self.y).max(self.z)
    }

    pub fn min_element(self) -> f64 {
        self.x.min(self.y).min(self.z)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// Rounds every component through `f32`.
    pub fn to_f32_precision(self) -> Vec3 {
        Vec3::new(self.x as f32 as f64, self.y as f32 as f64, self.z as f32 as f64)
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        v.to_array()
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl fmt::Display for Vec3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

/// Rigid transform from a sensor frame into the world frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Row-major rotation matrix.
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self::from_translation(Vec3::ZERO)
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation,
        }
    }

    /// Validates orthonormality and handedness.
    pub fn new(rotation: [[f64; 3]; 3], translation: Vec3) -> Result<Self, GeometryError> {
        let pose = Self { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let r = &self.rotation;
        if !self.translation.is_finite() || r.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidPose("non-finite entries".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let rtr: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                if (rtr - expected).abs() > 1e-6 {
                    return Err(GeometryError::InvalidPose(format!(
                        "rotation is not orthonormal (RᵀR[{i}][{j}] = {rtr})"
                    )));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-6 {
            return Err(GeometryError::InvalidPose(format!("det(R) = {det}")));
        }
        Ok(())
    }

    /// Rotation about the world z axis by `yaw` radians.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation,
        }
    }

    /// Camera pose at `eye` whose optical (+z) axis points at `target`,
    /// with image +y pointing as close to world `-up` as possible.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self, GeometryError> {
        let forward = (target - eye)
            .normalized()
            .ok_or_else(|| GeometryError::InvalidPose("eye coincides with target".into()))?;
        let right = forward
            .cross(up)
            .normalized()
            .ok_or_else(|| GeometryError::InvalidPose("view direction parallel to up".into()))?;
        let down = forward.cross(right);
        // Columns are the camera axes expressed in world coordinates.
        let rotation = [
            [right.x, down.x, forward.x],
            [right.y, down.y, forward.y],
            [right.z, down.z, forward.z],
        ];
        Pose::new(rotation, eye)
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        Vec3::new(
            r[0][0] * v.x + r[0][1] * v.y + r[0][2] * v.z,
            r[1][0] * v.x + r[1][1] * v.y + r[1][2] * v.z,
            r[2][0] * v.x + r[2][1] * v.y + r[2][2] * v.z,
        )
    }

    pub fn inverse_rotate(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        Vec3::new(
            r[0][0] * v.x + r[1][0] * v.y + r[2][0] * v.z,
            r[0][1] * v.x + r[1][1] * v.y + r[2][1] * v.z,
            r[0][2] * v.x + r[1][2] * v.y + r[2][2] * v.z,
        )
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        self.rotate(p) + self.translation
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]]
    }

    pub fn from_row_major(rotation: [f64; 9], translation: [f64; 3]) -> Result<Self, GeometryError> {
        let r = rotation;
        Pose::new(
            [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
            translation.into(),
        )
    }
}

/// Axis-aligned box given by its min and max corners.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn is_valid(&self) -> bool {
        self.min.is_finite()
            && self.max.is_finite()
            && self.max.x > self.min.x
            && self.max.y > self.min.y
            && self.max.z > self.min.z
    }

    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn expanded(&self, margin: f64) -> Aabb {
        Aabb::new(self.min - Vec3::splat(margin), self.max + Vec3::splat(margin))
    }

    /// Slab-method ray intersection; returns the parametric interval
    /// `[t_enter, t_exit]` clipped to `t >= 0`.
    pub fn ray_interval(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let o = origin[a];
            let d = dir[a];
            let (lo, hi) = (self.min[a], self.max[a]);
            if d.abs() < 1e-300 {
                if o < lo || o > hi {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (mut ta, mut tb) = ((lo - o) * inv, (hi - o) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

/// Solid primitives whose union makes up a scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    Sphere { center: Vec3, radius: f64 },
    #[serde(rename = "box")]
    AxisBox { center: Vec3, half_extents: Vec3 },
    /// Solid half-space `n·x < offset`; the surface faces along `normal`.
    Plane { normal: Vec3, offset: f64 },
    /// Everything outside an axis-aligned box is solid: a closed room.
    Room { center: Vec3, half_extents: Vec3 },
}

fn box_sdf(center: Vec3, half_extents: Vec3, x: Vec3) -> f64 {
    let q = (x - center).abs() - half_extents;
    q.max(Vec3::ZERO).norm() + q.max_element().min(0.0)
}

impl Primitive {
    pub fn sdf(&self, x: Vec3) -> f64 {
        match *self {
            Primitive::Sphere { center, radius } => (x - center).norm() - radius,
            Primitive::AxisBox { center, half_extents } => box_sdf(center, half_extents, x),
            Primitive::Plane { normal, offset } => normal.dot(x) - offset,
            Primitive::Room { center, half_extents } => -box_sdf(center, half_extents, x),
        }
    }

    fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidScene(m.to_string()));
        match *self {
            Primitive::Sphere { center, radius } => {
                if !center.is_finite() || !(radius > 0.0) || !radius.is_finite() {
                    return bad("sphere needs a finite center and radius > 0");
                }
            }
            Primitive::AxisBox { center, half_extents } | Primitive::Room { center, half_extents } => {
                if !center.is_finite() || !half_extents.is_finite() || !(half_extents.min_element() > 0.0) {
                    return bad("box half extents must be positive and finite");
                }
            }
            Primitive::Plane { normal, offset } => {
                if !normal.is_finite() || !offset.is_finite() || (normal.norm() - 1.0).abs() > 1e-9 {
                    return bad("plane normal must have unit length");
                }
            }
        }
        Ok(())
    }
}

/// Result of a finite-difference gradient evaluation of a ground-truth SDF.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gradient {
    Reliable(Vec3),
    /// Finite-difference magnitude fell below the reliability threshold;
    /// carries the raw (unnormalized) estimate.
    Unreliable(Vec3),
}

impl Gradient {
    pub fn reliable(self) -> Option<Vec3> {
        match self {
            Gradient::Reliable(g) => Some(g),
            Gradient::Unreliable(_) => None,
        }
    }

    pub fn is_reliable(self) -> bool {
        matches!(self, Gradient::Reliable(_))
    }
}

/// Union of primitives inside a bounding domain. Serves as exact ground
/// truth when primitives are pairwise disjoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub bounds: Aabb,
}

impl Scene {
    pub fn new(primitives: Vec<Primitive>, bounds: Aabb) -> Result<Self, GeometryError> {
        let scene = Self { primitives, bounds };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.primitives.is_empty() {
            return Err(GeometryError::InvalidScene("no primitives".into()));
        }
        if !self.bounds.is_valid() {
            return Err(GeometryError::InvalidScene("degenerate bounds".into()));
        }
        self.primitives.iter().try_for_each(Primitive::validate)
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| GeometryError::SceneIo {
            path: display.clone(),
            source,
        })?;
        let scene: Scene = serde_json::from_str(&text).map_err(|source| GeometryError::SceneParse {
            path: display,
            source,
        })?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    /// Union by minimum over all primitives.
    pub fn sdf(&self, x: Vec3) -> f64 {
        self.primitives
            .iter()
            .map(|p| p.sdf(x))
            .fold(f64::INFINITY, f64::min)
    }

    /// Central-difference gradient of [`Scene::sdf`], normalized.
    pub fn gradient(&self, x: Vec3) -> Gradient {
        let raw = self.raw_gradient(x);
        let magnitude = raw.norm();
        if magnitude < UNRELIABLE_GRADIENT_MAGNITUDE {
            Gradient::Unreliable(raw)
        } else {
            Gradient::Reliable(raw / magnitude)
        }
    }

    /// Unnormalized central-difference gradient.
    pub fn raw_gradient(&self, x: Vec3) -> Vec3 {
        let h = GRADIENT_STEP;
        let d = |e: Vec3| (self.sdf(x + e * h) - self.sdf(x - e * h)) / (2.0 * h);
        Vec3::new(d(Vec3::X), d(Vec3::Y), d(Vec3::Z))
    }
}

/// A posed point cloud for one time step, world frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: u64,
    pub pose: Pose,
    pub points: Vec<Vec3>,
}

impl Frame {
    pub fn new(index: u64, pose: Pose, points: Vec<Vec3>) -> Result<Self, GeometryError> {
        let frame = Self { index, pose, points };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        self.pose.validate()?;
        if self.points.is_empty() {
            return Err(GeometryError::EmptyPointCloud);
        }
        let origin = self.sensor_origin();
        for (i, p) in self.points.iter().enumerate() {
            if !p.is_finite() {
                return Err(GeometryError::InvalidFrame(format!(
                    "frame {}: point {i} is not finite",
                    self.index
                )));
            }
            if *p == origin {
                return Err(GeometryError::InvalidFrame(format!(
                    "frame {}: point {i} coincides with the sensor origin",
                    self.index
                )));
            }
        }
        Ok(())
    }

    pub fn sensor_origin(&self) -> Vec3 {
        self.pose.translation
    }
}

/// Exact nearest-point query by exhaustive scan. Ties resolve to the lowest
/// index.
pub fn brute_force_min_distance(points: &[Vec3], q: Vec3) -> Result<(f64, usize), GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::EmptyPointCloud);
    }
    let (best, idx) = min_distance_squared(points, q);
    Ok((best.sqrt(), idx))
}

/// Squared-distance scan shared by the local sampler.
pub(crate) fn min_distance_squared(points: &[Vec3], q: Vec3) -> (f64, usize) {
    let mut best = f64::INFINITY;
    let mut idx = 0;
    for (i, p) in points.iter().enumerate() {
        let d = q.distance_squared(*p);
        if d < best {
            best = d;
            idx = i;
        }
    }
    (best, idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_sphere() -> Scene {
        Scene::new(
            vec![Primitive::Sphere { center: Vec3::ZERO, radius: 1.0 }],
            Aabb::new(Vec3::splat(-3.0), Vec3::splat(3.0)),
        )
        .unwrap()
    }

    fn mixed_scene() -> Scene {
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
    fn sphere_sdf_examples() {
        let s = unit_sphere();
        assert_eq!(s.sdf(Vec3::new(2.0, 0.0, 0.0)), 1.0);
        assert_eq!(s.sdf(Vec3::ZERO), -1.0);
    }

    #[test]
    fn box_corner_distance_matches_dense_surface_sampling() {
        let b = Primitive::AxisBox { center: Vec3::ZERO, half_extents: Vec3::splat(1.0) };
        let q = Vec3::new(2.0, 2.0, 0.0);
        // Oracle: densely sample the box surface and take the nearest sample.
        let n = 200;
        let mut best = f64::INFINITY;
        for face in 0..6 {
            let axis = face / 2;
            let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
            for i in 0..=n {
                for j in 0..=n {
                    let u = -1.0 + 2.0 * i as f64 / n as f64;
                    let v = -1.0 + 2.0 * j as f64 / n as f64;
                    let p = match axis {
                        0 => Vec3::new(sign, u, v),
                        1 => Vec3::new(u, sign, v),
                        _ => Vec3::new(u, v, sign),
                    };
                    best = best.min(p.distance(q));
                }
            }
        }
        assert!((best - 2f64.sqrt()).abs() < 1e-9);
        assert!((b.sdf(q) - best).abs() < 1e-9);
    }

    #[test]
    fn gradient_examples() {
        let s = unit_sphere();
        let g = s.gradient(Vec3::new(2.0, 0.0, 0.0)).reliable().unwrap();
        assert!((g - Vec3::X).norm() < 1e-6);
        let g = s.gradient(Vec3::new(0.0, 0.0, 0.5)).reliable().unwrap();
        assert!((g - Vec3::Z).norm() < 1e-6);

        let two = Scene::new(
            vec![
                Primitive::Sphere { center: Vec3::new(1.0, 0.0, 0.0), radius: 0.5 },
                Primitive::Sphere { center: Vec3::new(-1.0, 0.0, 0.0), radius: 0.5 },
            ],
            Aabb::new(Vec3::splat(-3.0), Vec3::splat(3.0)),
        )
        .unwrap();
        assert!(!two.gradient(Vec3::ZERO).is_reliable());
    }

    #[test]
    fn brute_force_examples() {
        assert!(matches!(
            brute_force_min_distance(&[], Vec3::ZERO),
            Err(GeometryError::EmptyPointCloud)
        ));
        assert_eq!(brute_force_min_distance(&[Vec3::X], Vec3::ZERO).unwrap(), (1.0, 0));
        let pts = [Vec3::X, Vec3::new(0.0, 0.5, 0.0)];
        assert_eq!(brute_force_min_distance(&pts, Vec3::ZERO).unwrap(), (0.5, 1));
        // Ties keep the lowest index.
        let pts = [Vec3::X, -Vec3::X];
        assert_eq!(brute_force_min_distance(&pts, Vec3::ZERO).unwrap(), (1.0, 0));
    }

    #[test]
    fn brute_force_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Vec3> = (0..1000)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let dists: Vec<f64> = pts.iter().map(|p| p.norm()).collect();
        let expected = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        let expected_idx = dists.iter().position(|d| *d == expected).unwrap();
        assert_eq!(brute_force_min_distance(&pts, Vec3::ZERO).unwrap(), (expected, expected_idx));
    }

    #[test]
    fn look_at_points_camera_axis_at_target() {
        let pose = Pose::look_at(Vec3::new(1.0, 2.0, 1.5), Vec3::new(3.0, 2.0, 1.0), Vec3::Z).unwrap();
        let fwd = pose.rotate(Vec3::Z);
        let expected = (Vec3::new(2.0, 0.0, -0.5)).normalized().unwrap();
        assert!((fwd - expected).norm() < 1e-12);
        assert!(pose.rotate(Vec3::Y).z < 0.0, "image y points downward");
    }

    #[test]
    fn pose_rejects_reflection() {
        let r = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(Pose::new(r, Vec3::ZERO).is_err());
    }

    #[test]
    fn scene_json_round_trip() {
        let s = mixed_scene();
        let back = Scene::from_json(&s.to_json()).unwrap();
        assert_eq!(s, back);
        let text = r#"{"primitives":[{"type":"sphere","center":[0,0,0],"radius":1.0},
            {"type":"plane","normal":[0,0,1],"offset":0.0}],
            "bounds":{"min":[-1,-1,-1],"max":[1,1,1]}}"#;
        let s = Scene::from_json(text).unwrap();
        s.validate().unwrap();
        assert_eq!(s.primitives.len(), 2);
    }

    #[test]
    fn invalid_primitives_rejected() {
        let bounds = Aabb::new(Vec3::splat(-1.0), Vec3::splat(1.0));
        assert!(Scene::new(vec![Primitive::Sphere { center: Vec3::ZERO, radius: 0.0 }], bounds).is_err());
        assert!(Scene::new(vec![Primitive::Plane { normal: Vec3::new(0.0, 0.0, 2.0), offset: 0.0 }], bounds).is_err());
        let flat = Aabb::new(Vec3::ZERO, Vec3::new(1.0, 1.0, 0.0));
        assert!(Scene::new(vec![Primitive::Sphere { center: Vec3::ZERO, radius: 1.0 }], flat).is_err());
    }

    fn point_in(bounds: Aabb) -> impl Strategy<Value = Vec3> {
        (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(move |(a, b, c)| {
            bounds.min + Vec3::new(a * bounds.extent().x, b * bounds.extent().y, c * bounds.extent().z)
        })
    }

    proptest! {
        #[test]
        fn sdf_is_one_lipschitz(x in point_in(mixed_scene().bounds), y in point_in(mixed_scene().bounds)) {
            let s = mixed_scene();
            prop_assert!((s.sdf(x) - s.sdf(y)).abs() <= x.distance(y) + 1e-9);
        }

        #[test]
        fn union_is_below_each_member(x in point_in(mixed_scene().bounds)) {
            let s = mixed_scene();
            let u = s.sdf(x);
            for p in &s.primitives {
                prop_assert!(u <= p.sdf(x));
            }
        }

        #[test]
        fn reliable_gradients_are_unit(x in point_in(mixed_scene().bounds)) {
            if let Gradient::Reliable(g) = mixed_scene().gradient(x) {
                prop_assert!((g.norm() - 1.0).abs() < 1e-4);
            }
        }

        #[test]
        fn cloud_points_have_zero_distance(
            pts in proptest::collection::vec((-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64), 1..64),
            k in 0usize..64,
        ) {
            let pts: Vec<Vec3> = pts.into_iter().map(|(a, b, c)| Vec3::new(a, b, c)).collect();
            let q = pts[k % pts.len()];
            prop_assert_eq!(brute_force_min_distance(&pts, q).unwrap().0, 0.0);
        }
    }
}
