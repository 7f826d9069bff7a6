//! Coarse global map: projective TSDF fusion into a dense voxel grid and a
//! signed ESDF obtained by wavefront propagation from surface voxels.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Aabb, Frame, Vec3};
use crate::local_sdf::{SampleSource, SdfSample};

pub const DEFAULT_VOXEL_SIZE: f64 = 0.10;
/// Truncation band in voxels.
pub const DEFAULT_TRUNCATION_VOXELS: f64 = 3.0;
pub const MAX_WEIGHT: f64 = 100.0;

const SNAPSHOT_MAGIC: &[u8; 4] = b"CSDF";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Error, Debug)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("frame out of bounds: none of its {0} points lies inside the grid")]
    FrameOutOfBounds(usize),
    #[error("no surface observed")]
    NoSurface,
    #[error("query point {0} is outside the grid")]
    OutOfBounds(Vec3),
    #[error("query point {0} touches unobserved voxels")]
    Unobserved(Vec3),
    #[error("empty {0} stratum: no observed voxels to sample from")]
    EmptyStratum(&'static str),
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("snapshot {path}: {reason}")]
    BadSnapshot { path: PathBuf, reason: String },
}

/// Grid placement; serialized as part of the pipeline config.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: Vec3,
    pub dims: [usize; 3],
    #[serde(default = "default_voxel_size")]
    pub voxel_size: f64,
    /// TSDF truncation in meters; three voxels when omitted.
    #[serde(default)]
    pub truncation: Option<f64>,
}

fn default_voxel_size() -> f64 {
    DEFAULT_VOXEL_SIZE
}

impl GridSpec {
    /// Smallest grid of `voxel_size` voxels covering `bounds`.
    pub fn covering(bounds: &Aabb, voxel_size: f64) -> Self {
        let e = bounds.extent();
        let n = |v: f64| ((v / voxel_size) - 1e-9).ceil().max(1.0) as usize;
        Self { origin: bounds.min, dims: [n(e.x), n(e.y), n(e.z)], voxel_size, truncation: None }
    }
}

/// Near/far sample counts drawn from the grid after each update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoarseSamplerConfig {
    pub n_near: usize,
    pub m_far: usize,
    /// Near-surface threshold on |esdf|, meters.
    pub epsilon: f64,
}

impl Default for CoarseSamplerConfig {
    fn default() -> Self {
        Self { n_near: 10_000, m_far: 30_000, epsilon: 0.05 }
    }
}

impl CoarseSamplerConfig {
    pub fn validate(&self) -> Result<(), GridError> {
        if self.n_near == 0 || self.m_far == 0 {
            return Err(GridError::InvalidConfig("sample counts must be positive".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(GridError::InvalidConfig("epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IntegrationStats {
    pub integrated_points: usize,
    pub skipped_points: usize,
    pub voxel_updates: usize,
}

/// Dense voxel grid with fused TSDF and propagated ESDF.
#[derive(Clone, Debug)]
pub struct CoarseSdfGrid {
    origin: Vec3,
    voxel_size: f64,
    dims: [usize; 3],
    truncation: f64,
    tsdf: Vec<f64>,
    weight: Vec<f64>,
    esdf: Vec<f64>,
}

impl CoarseSdfGrid {
    pub fn new(spec: &GridSpec) -> Result<Self, GridError> {
        if !(spec.voxel_size > 0.0) || !spec.voxel_size.is_finite() {
            return Err(GridError::InvalidGrid("voxel size must be positive".into()));
        }
        if spec.dims.iter().any(|&d| d == 0) {
            return Err(GridError::InvalidGrid("dimensions must be non-zero".into()));
        }
        if !spec.origin.is_finite() {
            return Err(GridError::InvalidGrid("origin must be finite".into()));
        }
        let truncation = spec.truncation.unwrap_or(DEFAULT_TRUNCATION_VOXELS * spec.voxel_size);
        if !(truncation > 0.0) {
            return Err(GridError::InvalidGrid("truncation must be positive".into()));
        }
        let n = spec.dims[0] * spec.dims[1] * spec.dims[2];
        Ok(Self {
            origin: spec.origin,
            voxel_size: spec.voxel_size,
            dims: spec.dims,
            truncation,
            tsdf: vec![truncation; n],
            weight: vec![0.0; n],
            esdf: vec![f64::NAN; n],
        })
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn len(&self) -> usize {
        self.tsdf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tsdf.is_empty()
    }

    pub fn bounds(&self) -> Aabb {
        let e = Vec3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64) * self.voxel_size;
        Aabb::new(self.origin, self.origin + e)
    }

    pub fn linear_index(&self, [i, j, k]: [usize; 3]) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn voxel_coords(&self, linear: usize) -> [usize; 3] {
        let k = linear % self.dims[2];
        let j = (linear / self.dims[2]) % self.dims[1];
        let i = linear / (self.dims[1] * self.dims[2]);
        [i, j, k]
    }

    pub fn voxel_center(&self, [i, j, k]: [usize; 3]) -> Vec3 {
        self.origin
            + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.voxel_size
    }

    /// Voxel containing `p`, if any.
    pub fn voxel_of(&self, p: Vec3) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let u = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if !(u >= 0.0 && u < self.dims[a] as f64) {
                return None;
            }
            out[a] = u as usize;
        }
        Some(out)
    }

    pub fn tsdf(&self, v: [usize; 3]) -> f64 {
        self.tsdf[self.linear_index(v)]
    }

    pub fn weight(&self, v: [usize; 3]) -> f64 {
        self.weight[self.linear_index(v)]
    }

    pub fn esdf(&self, v: [usize; 3]) -> f64 {
        self.esdf[self.linear_index(v)]
    }

    pub fn is_observed(&self, v: [usize; 3]) -> bool {
        self.weight[self.linear_index(v)] > 0.0
    }

    pub fn observed_count(&self) -> usize {
        self.weight.iter().filter(|w| **w > 0.0).count()
    }

    /// Sets a voxel's fused state directly. Intended for tests and tools
    /// that build grids without a sensor.
    pub fn set_voxel(&mut self, v: [usize; 3], tsdf: f64, weight: f64) {
        let idx = self.linear_index(v);
        self.tsdf[idx] = tsdf.clamp(-self.truncation, self.truncation);
        self.weight[idx] = weight.clamp(0.0, MAX_WEIGHT);
    }

    /// Centers of all observed voxels, in linear-index order.
    pub fn observed_voxels(&self) -> impl Iterator<Item = ([usize; 3], Vec3)> + '_ {
        self.weight
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(move |(i, _)| {
                let v = self.voxel_coords(i);
                (v, self.voxel_center(v))
            })
    }

    /// Projective TSDF update along every sensor ray. Voxels in front of
    /// the truncation band receive the clamped `+truncation` value.
    pub fn integrate_frame(&mut self, frame: &Frame) -> Result<IntegrationStats, GridError> {
        let bounds = self.bounds();
        let sensor = frame.sensor_origin();
        let mut stats = IntegrationStats::default();
        for &p in &frame.points {
            if !bounds.contains(p) {
                stats.skipped_points += 1;
                continue;
            }
            let Some(dir) = (p - sensor).normalized() else {
                stats.skipped_points += 1;
                continue;
            };
            let depth = p.distance(sensor);
            stats.integrated_points += 1;
            let trunc = self.truncation;
            let mut updates = 0;
            self.traverse(sensor, dir, depth + trunc, |grid, v| {
                let center = grid.voxel_center(v);
                let sdf = depth - (center - sensor).dot(dir);
                if sdf < -trunc {
                    return;
                }
                let idx = grid.linear_index(v);
                let value = sdf.min(trunc);
                let w = grid.weight[idx];
                grid.tsdf[idx] = (grid.tsdf[idx] * w + value) / (w + 1.0);
                grid.weight[idx] = (w + 1.0).min(MAX_WEIGHT);
                updates += 1;
            });
            stats.voxel_updates += updates;
        }
        if stats.integrated_points == 0 {
            return Err(GridError::FrameOutOfBounds(frame.points.len()));
        }
        Ok(stats)
    }

    /// Amanatides–Woo traversal of voxels hit by `origin + t·dir` for
    /// `t ∈ [0, t_max]`.
    fn traverse(&mut self, origin: Vec3, dir: Vec3, t_max: f64, mut visit: impl FnMut(&mut Self, [usize; 3])) {
        let Some((t_enter, t_exit)) = self.bounds().ray_interval(origin, dir) else {
            return;
        };
        let t_end = t_max.min(t_exit);
        if t_enter > t_end {
            return;
        }
        let start = origin + dir * t_enter;
        let mut idx = [0i64; 3];
        let mut step = [0i64; 3];
        let mut t_next = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            let u = ((start[a] - self.origin[a]) / self.voxel_size).floor() as i64;
            idx[a] = u.clamp(0, self.dims[a] as i64 - 1);
            if dir[a] > 0.0 {
                step[a] = 1;
                let boundary = self.origin[a] + (idx[a] + 1) as f64 * self.voxel_size;
                t_next[a] = (boundary - origin[a]) / dir[a];
                t_delta[a] = self.voxel_size / dir[a];
            } else if dir[a] < 0.0 {
                step[a] = -1;
                let boundary = self.origin[a] + idx[a] as f64 * self.voxel_size;
                t_next[a] = (boundary - origin[a]) / dir[a];
                t_delta[a] = -self.voxel_size / dir[a];
            }
        }
        loop {
            visit(self, [idx[0] as usize, idx[1] as usize, idx[2] as usize]);
            let a = if t_next[0] <= t_next[1] && t_next[0] <= t_next[2] {
                0
            } else if t_next[1] <= t_next[2] {
                1
            } else {
                2
            };
            if t_next[a] > t_end {
                break;
            }
            idx[a] += step[a];
            if idx[a] < 0 || idx[a] >= self.dims[a] as i64 {
                break;
            }
            t_next[a] += t_delta[a];
        }
    }

    /// Observed voxels with `|tsdf| < voxel_size`.
    pub fn is_surface(&self, linear: usize) -> bool {
        self.weight[linear] > 0.0 && self.tsdf[linear].abs() < self.voxel_size
    }

    /// Recomputes the ESDF on every observed voxel. The magnitude is the
    /// exact center-to-center distance to the nearest surface voxel anywhere
    /// in the grid; the sign follows the fused TSDF.
    pub fn update_esdf(&mut self) -> Result<(), GridError> {
        let d2 = self.squared_surface_distance()?;
        for (idx, &d2) in d2.iter().enumerate() {
            if self.weight[idx] <= 0.0 {
                self.esdf[idx] = f64::NAN;
                continue;
            }
            let magnitude = self.voxel_size * (d2 as f64).sqrt();
            self.esdf[idx] = if self.tsdf[idx] < 0.0 && magnitude > 0.0 { -magnitude } else { magnitude };
        }
        Ok(())
    }

    /// Squared voxel distance to the nearest surface voxel, by a separable
    /// lower-envelope transform along z, then y, then x. Integer arithmetic
    /// throughout, so the result equals an exhaustive search.
    fn squared_surface_distance(&self) -> Result<Vec<i64>, GridError> {
        let n = self.len();
        let mut d2: Vec<i64> = (0..n).map(|i| if self.is_surface(i) { 0 } else { FAR }).collect();
        if !d2.contains(&0) {
            return Err(GridError::NoSurface);
        }
        let [nx, ny, nz] = self.dims;
        let mut envelope = LowerEnvelope::default();
        let mut line = Vec::new();
        let mut transform_axis = |d2: &mut [i64], len: usize, stride: usize, starts: &mut dyn Iterator<Item = usize>| {
            for start in starts {
                line.clear();
                line.extend((0..len).map(|t| d2[start + t * stride]));
                envelope.transform(&mut line);
                for (t, v) in line.iter().enumerate() {
                    d2[start + t * stride] = *v;
                }
            }
        };
        let index = |i: usize, j: usize, k: usize| (i * ny + j) * nz + k;
        transform_axis(&mut d2, nz, 1, &mut (0..nx).flat_map(|i| (0..ny).map(move |j| index(i, j, 0))));
        transform_axis(&mut d2, ny, nz, &mut (0..nx).flat_map(|i| (0..nz).map(move |k| index(i, 0, k))));
        transform_axis(&mut d2, nx, ny * nz, &mut (0..ny).flat_map(|j| (0..nz).map(move |k| index(0, j, k))));
        Ok(d2)
    }

    fn interpolation_corners(&self, x: Vec3) -> Result<[([i64; 3], f64); 8], GridError> {
        if !x.is_finite() || !self.bounds().contains(x) {
            return Err(GridError::OutOfBounds(x));
        }
        let mut base = [0i64; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let u = (x[a] - self.origin[a]) / self.voxel_size - 0.5;
            let mut i0 = u.floor();
            let mut f = u - i0;
            // Snap rounding noise so voxel centers interpolate exactly.
            if f < 1e-9 {
                f = 0.0;
            } else if f > 1.0 - 1e-9 {
                i0 += 1.0;
                f = 0.0;
            }
            base[a] = i0 as i64;
            frac[a] = f;
        }
        let mut corners = [([0i64; 3], 0.0); 8];
        for (n, corner) in corners.iter_mut().enumerate() {
            let mut w = 1.0;
            let mut v = base;
            for a in 0..3 {
                if (n >> a) & 1 == 1 {
                    v[a] += 1;
                    w *= frac[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            *corner = (v, w);
        }
        Ok(corners)
    }

    fn corner_linear(&self, v: [i64; 3]) -> Option<usize> {
        if (0..3).any(|a| v[a] < 0 || v[a] >= self.dims[a] as i64) {
            return None;
        }
        Some(self.linear_index([v[0] as usize, v[1] as usize, v[2] as usize]))
    }

    /// Trilinear interpolation of the ESDF between the eight surrounding
    /// voxel centers. Corners with zero weight are not required.
    pub fn query(&self, x: Vec3) -> Result<f64, GridError> {
        let mut value = 0.0;
        for (v, w) in self.interpolation_corners(x)? {
            if w == 0.0 {
                continue;
            }
            let idx = self.corner_linear(v).ok_or(GridError::OutOfBounds(x))?;
            if self.weight[idx] <= 0.0 {
                return Err(GridError::Unobserved(x));
            }
            value += w * self.esdf[idx];
        }
        Ok(value)
    }

    /// Like [`CoarseSdfGrid::query`] but drops unobserved or out-of-range
    /// corners and renormalizes the remaining weights.
    pub fn query_observed(&self, x: Vec3) -> Result<f64, GridError> {
        let mut value = 0.0;
        let mut total = 0.0;
        for (v, w) in self.interpolation_corners(x)? {
            if w == 0.0 {
                continue;
            }
            if let Some(idx) = self.corner_linear(v) {
                if self.weight[idx] > 0.0 {
                    value += w * self.esdf[idx];
                    total += w;
                }
            }
        }
        if total > 0.0 {
            Ok(value / total)
        } else {
            Err(GridError::Unobserved(x))
        }
    }

    /// Draws `n_near` samples from observed voxels with `|esdf| < epsilon`
    /// and `m_far` from the remaining observed voxels, each placed uniformly
    /// inside its voxel.
    pub fn sample_training_points(
        &self,
        config: &CoarseSamplerConfig,
        seed: u64,
    ) -> Result<Vec<SdfSample>, GridError> {
        config.validate()?;
        let mut near = Vec::new();
        let mut far = Vec::new();
        for (idx, w) in self.weight.iter().enumerate() {
            if *w <= 0.0 {
                continue;
            }
            if self.esdf[idx].abs() < config.epsilon {
                near.push(idx);
            } else {
                far.push(idx);
            }
        }
        if near.is_empty() {
            return Err(GridError::EmptyStratum("near-surface"));
        }
        if far.is_empty() {
            return Err(GridError::EmptyStratum("far"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(config.n_near + config.m_far);
        for (stratum, count) in [(&near, config.n_near), (&far, config.m_far)] {
            for _ in 0..count {
                let idx = stratum[rng.random_range(0..stratum.len())];
                let position = self.random_point_in_voxel(idx, &mut rng);
                let sdf = self.query_observed(position)?;
                out.push(SdfSample { position, sdf, source: SampleSource::Coarse });
            }
        }
        Ok(out)
    }

    pub(crate) fn random_point_in_voxel(&self, linear: usize, rng: &mut impl Rng) -> Vec3 {
        let [i, j, k] = self.voxel_coords(linear);
        let lo = self.origin + Vec3::new(i as f64, j as f64, k as f64) * self.voxel_size;
        let u = Vec3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
        lo + u * self.voxel_size
    }

    /// Linear indices of observed voxels.
    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.weight[i] > 0.0).collect()
    }

    /// Versioned binary dump: magic, version, origin, voxel size,
    /// truncation, dims, then per voxel `tsdf, weight, esdf` as f32 LE.
    pub fn write_snapshot(&self, path: &Path) -> Result<(), GridError> {
        let mut buf = Vec::with_capacity(64 + self.len() * 12);
        buf.extend_from_slice(SNAPSHOT_MAGIC);
        buf.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        for v in self.origin.to_array() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.voxel_size.to_le_bytes());
        buf.extend_from_slice(&self.truncation.to_le_bytes());
        for d in self.dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for i in 0..self.len() {
            for v in [self.tsdf[i], self.weight[i], self.esdf[i]] {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|source| GridError::Io { path: path.into(), source })?;
        f.write_all(&buf).map_err(|source| GridError::Io { path: path.into(), source })
    }

    pub fn read_snapshot(path: &Path) -> Result<Self, GridError> {
        let io = |source| GridError::Io { path: path.into(), source };
        let bad = |reason: &str| GridError::BadSnapshot { path: path.into(), reason: reason.into() };
        let mut bytes = Vec::new();
        fs::File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
        if bytes.len() < 72 || &bytes[0..4] != SNAPSHOT_MAGIC {
            return Err(bad("missing header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        if u32_at(4) != SNAPSHOT_VERSION {
            return Err(bad("unsupported version"));
        }
        let origin = Vec3::new(f64_at(8), f64_at(16), f64_at(24));
        let voxel_size = f64_at(32);
        let truncation = f64_at(40);
        let dims = [u64_at(48) as usize, u64_at(56) as usize, u64_at(64) as usize];
        let spec = GridSpec { origin, dims, voxel_size, truncation: Some(truncation) };
        let mut grid = CoarseSdfGrid::new(&spec).map_err(|e| bad(&e.to_string()))?;
        let body = &bytes[72..];
        if body.len() != grid.len() * 12 {
            return Err(bad("voxel payload has the wrong length"));
        }
        for (i, rec) in body.chunks_exact(12).enumerate() {
            let f = |o: usize| f32::from_le_bytes(rec[o..o + 4].try_into().unwrap()) as f64;
            grid.tsdf[i] = f(0);
            grid.weight[i] = f(4);
            grid.esdf[i] = f(8);
        }
        Ok(grid)
    }
}

/// Squared distance for voxels with no surface yet: above any in-grid value
/// and far from overflow.
const FAR: i64 = 1 << 40;

/// Buffers for the 1D transform `line[q] <- min_i (q - i)^2 + line[i]`.
#[derive(Default)]
struct LowerEnvelope {
    sites: Vec<usize>,
    starts: Vec<i64>,
    f: Vec<i64>,
}

impl LowerEnvelope {
    fn transform(&mut self, line: &mut [i64]) {
        let n = line.len();
        self.f.clear();
        self.f.extend_from_slice(line);
        self.sites.clear();
        self.starts.clear();
        let f = &self.f;
        let value = |x: i64, i: usize| (x - i as i64).pow(2) + f[i];
        // Last position where parabola `i` is at most parabola `u > i`.
        let separation = |i: usize, u: usize| {
            let (i, u) = (i as i64, u as i64);
            (u * u - i * i + f[u as usize] - f[i as usize]).div_euclid(2 * (u - i))
        };
        for u in 0..n {
            while let (Some(&s), Some(&t)) = (self.sites.last(), self.starts.last()) {
                if value(t, s) <= value(t, u) {
                    break;
                }
                self.sites.pop();
                self.starts.pop();
            }
            match self.sites.last() {
                None => {
                    self.sites.push(u);
                    self.starts.push(0);
                }
                Some(&s) => {
                    let w = 1 + separation(s, u);
                    if w < n as i64 {
                        self.sites.push(u);
                        self.starts.push(w);
                    }
                }
            }
        }
        let mut k = self.sites.len() - 1;
        for q in (0..n).rev() {
            line[q] = value(q as i64, self.sites[k]);
            if k > 0 && q as i64 == self.starts[k] {
                k -= 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose, Primitive, Scene};
    use crate::sensor_sim::{simulate_frames, DepthCameraModel, SensorSpec, TrajectorySpec};
    use proptest::prelude::{prop_assert_eq, prop_oneof, proptest, Just};

    fn squared_offset(a: [usize; 3], b: [usize; 3]) -> i64 {
        (0..3)
            .map(|k| {
                let d = a[k] as i64 - b[k] as i64;
                d * d
            })
            .sum()
    }

    fn small_grid(dims: [usize; 3]) -> CoarseSdfGrid {
        CoarseSdfGrid::new(&GridSpec { origin: Vec3::ZERO, dims, voxel_size: 0.125, truncation: None }).unwrap()
    }

    /// Exhaustive nearest-surface-voxel reference.
    fn oracle_esdf(grid: &CoarseSdfGrid) -> Vec<f64> {
        let surface: Vec<[usize; 3]> =
            (0..grid.len()).filter(|&i| grid.is_surface(i)).map(|i| grid.voxel_coords(i)).collect();
        (0..grid.len())
            .map(|i| {
                if grid.weight[i] <= 0.0 {
                    return f64::NAN;
                }
                let c = grid.voxel_coords(i);
                let d2 = surface.iter().map(|s| squared_offset(c, *s)).min().unwrap();
                let m = grid.voxel_size * (d2 as f64).sqrt();
                if grid.tsdf[i] < 0.0 && m > 0.0 { -m } else { m }
            })
            .collect()
    }

    #[test]
    fn single_ray_projective_values() {
        let spec = GridSpec { origin: Vec3::splat(-2.0), dims: [40, 40, 40], voxel_size: 0.1, truncation: None };
        let mut grid = CoarseSdfGrid::new(&spec).unwrap();
        // Sensor and point on the x axis through voxel centers.
        let sensor = Vec3::new(-0.95, 0.05, 0.05);
        let point = Vec3::new(0.05, 0.05, 0.05);
        let frame = Frame::new(0, Pose::from_translation(sensor), vec![point]).unwrap();
        grid.integrate_frame(&frame).unwrap();
        let at_point = grid.voxel_of(point).unwrap();
        assert!(grid.tsdf(at_point).abs() <= 0.05);
        let front = grid.voxel_of(point - Vec3::new(0.2, 0.0, 0.0)).unwrap();
        assert!((grid.tsdf(front) - 0.2).abs() < 1e-9);
        let far_front = grid.voxel_of(point - Vec3::new(0.6, 0.0, 0.0)).unwrap();
        assert!((grid.tsdf(far_front) - 0.3).abs() < 1e-9, "clamped to truncation");
        let behind = grid.voxel_of(point + Vec3::new(0.2, 0.0, 0.0)).unwrap();
        assert!((grid.tsdf(behind) + 0.2).abs() < 1e-9);
        let beyond = grid.voxel_of(point + Vec3::new(0.5, 0.0, 0.0)).unwrap();
        assert!(!grid.is_observed(beyond));
    }

    #[test]
    fn integrating_twice_doubles_weight() {
        let spec = GridSpec { origin: Vec3::splat(-2.0), dims: [40, 40, 40], voxel_size: 0.1, truncation: None };
        let mut once = CoarseSdfGrid::new(&spec).unwrap();
        let sensor = Vec3::new(-1.23, 0.11, 0.07);
        let pts = vec![Vec3::new(0.4, 0.3, -0.2), Vec3::new(0.5, -0.1, 0.35), Vec3::new(0.45, 0.02, 0.1)];
        let frame = Frame::new(0, Pose::from_translation(sensor), pts).unwrap();
        once.integrate_frame(&frame).unwrap();
        let mut twice = once.clone();
        twice.integrate_frame(&frame).unwrap();
        for i in 0..once.len() {
            if once.weight[i] > 0.0 {
                assert_eq!(twice.weight[i], 2.0 * once.weight[i]);
                assert!((twice.tsdf[i] - once.tsdf[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frame_outside_grid_is_an_error() {
        let mut grid = small_grid([8, 8, 8]);
        let frame = Frame::new(0, Pose::from_translation(Vec3::splat(5.0)), vec![Vec3::splat(6.0)]).unwrap();
        assert!(matches!(grid.integrate_frame(&frame), Err(GridError::FrameOutOfBounds(1))));
    }

    #[test]
    fn esdf_face_and_diagonal_neighbors() {
        let spec = GridSpec { origin: Vec3::ZERO, dims: [5, 5, 5], voxel_size: 0.1, truncation: None };
        let mut grid = CoarseSdfGrid::new(&spec).unwrap();
        for i in 0..grid.len() {
            let v = grid.voxel_coords(i);
            grid.set_voxel(v, 0.3, 1.0);
        }
        grid.set_voxel([2, 2, 2], 0.0, 1.0);
        grid.update_esdf().unwrap();
        assert_eq!(grid.esdf([2, 2, 2]), 0.0);
        assert!((grid.esdf([3, 2, 2]) - 0.1).abs() < 1e-15);
        assert!((grid.esdf([3, 3, 2]) - 0.1 * 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn esdf_without_surface_is_an_error() {
        let mut grid = small_grid([4, 4, 4]);
        assert!(matches!(grid.update_esdf(), Err(GridError::NoSurface)));
        grid.set_voxel([1, 1, 1], 0.3, 1.0);
        assert!(matches!(grid.update_esdf(), Err(GridError::NoSurface)));
    }

    proptest! {
        #[test]
        fn lower_envelope_matches_brute_force(
            line in proptest::collection::vec(prop_oneof![0i64..50, Just(FAR)], 1..40)
        ) {
            let mut out = line.clone();
            LowerEnvelope::default().transform(&mut out);
            for (q, v) in out.iter().enumerate() {
                let best = line.iter().enumerate().map(|(i, f)| (q as i64 - i as i64).pow(2) + f).min().unwrap();
                prop_assert_eq!(*v, best);
            }
        }
    }

    #[test]
    fn esdf_matches_exhaustive_search_on_random_patterns() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let dims = [0; 3].map(|_: usize| rng.random_range(1..=24));
            let mut grid = small_grid(dims);
            let surface_rate = rng.random_range(0.0002..0.05);
            for i in 0..grid.len() {
                let v = grid.voxel_coords(i);
                if rng.random::<f64>() < 0.8 {
                    let t = if rng.random::<f64>() < surface_rate {
                        rng.random_range(-0.1..0.1)
                    } else if rng.random::<bool>() {
                        0.3
                    } else {
                        -0.2
                    };
                    grid.set_voxel(v, t, 1.0);
                }
            }
            grid.set_voxel([0, 0, 0], 0.0, 1.0);
            grid.update_esdf().unwrap();
            let oracle = oracle_esdf(&grid);
            for i in 0..grid.len() {
                if grid.weight[i] > 0.0 {
                    assert_eq!(grid.esdf[i].to_bits(), oracle[i].to_bits(), "voxel {:?}", grid.voxel_coords(i));
                } else {
                    assert!(grid.esdf[i].is_nan());
                }
            }
        }
    }

    fn filled_grid() -> CoarseSdfGrid {
        let mut grid = small_grid([6, 6, 6]);
        for i in 0..grid.len() {
            let v = grid.voxel_coords(i);
            let t = if v[0] == 2 { 0.0 } else { 0.3 };
            grid.set_voxel(v, t, 1.0);
        }
        grid.update_esdf().unwrap();
        grid
    }

    #[test]
    fn query_interpolation_identities() {
        let grid = filled_grid();
        let c = grid.voxel_center([4, 3, 1]);
        assert_eq!(grid.query(c).unwrap(), grid.esdf([4, 3, 1]));
        let a = grid.voxel_center([3, 3, 3]);
        let b = grid.voxel_center([4, 3, 3]);
        let mid = (a + b) / 2.0;
        let expected = (grid.esdf([3, 3, 3]) + grid.esdf([4, 3, 3])) / 2.0;
        assert!((grid.query(mid).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn query_errors_distinguish_cases() {
        let mut grid = filled_grid();
        assert!(matches!(grid.query(Vec3::splat(-1.0)), Err(GridError::OutOfBounds(_))));
        grid.set_voxel([3, 3, 3], 0.3, 0.0);
        let p = grid.voxel_center([3, 3, 3]);
        assert!(matches!(grid.query(p), Err(GridError::Unobserved(_))));
        assert!(grid.query_observed(p + Vec3::splat(0.01)).is_ok());
    }

    #[test]
    fn sampler_counts_bounds_and_determinism() {
        let scene = Scene::new(
            vec![Primitive::Sphere { center: Vec3::new(0.0, 0.0, 1.0), radius: 0.6 }],
            Aabb::new(Vec3::new(-2.0, -2.0, -1.0), Vec3::new(2.0, 2.0, 3.0)),
        )
        .unwrap();
        let sensor = SensorSpec::Depth(DepthCameraModel { width: 32, height: 32, ..Default::default() });
        let traj = TrajectorySpec::Orbit {
            center: Vec3::new(0.0, 0.0, 0.0),
            radius: 1.6,
            height: 1.2,
            n_poses: 24,
            turns: 1.0,
            yaw_offset_deg: 180.0,
            pitch_deg: 0.0,
        }
        .build(&sensor, 0.5)
        .unwrap();
        let frames = simulate_frames(&scene, &traj, &sensor, 0.0, 0).unwrap();
        let mut grid = CoarseSdfGrid::new(&GridSpec::covering(&scene.bounds, 0.1)).unwrap();
        let mut observed_before = 0;
        for f in &frames {
            grid.integrate_frame(f).unwrap();
            let now = grid.observed_count();
            assert!(now >= observed_before);
            observed_before = now;
        }
        grid.update_esdf().unwrap();

        // Backbone accuracy against the analytic field.
        let errs: Vec<f64> = grid.observed_voxels().map(|(v, c)| (grid.esdf(v) - scene.sdf(c)).abs()).collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!(mean <= 0.1 * 3f64.sqrt(), "mean esdf error {mean}");

        // 1-Lipschitz across observed face neighbors.
        for (v, _) in grid.observed_voxels() {
            for a in 0..3 {
                let mut n = v;
                n[a] += 1;
                if n[a] < grid.dims[a] && grid.is_observed(n) {
                    assert!((grid.esdf(v) - grid.esdf(n)).abs() <= grid.voxel_size + 1e-9);
                }
            }
        }

        let cfg = CoarseSamplerConfig::default();
        let samples = grid.sample_training_points(&cfg, 3).unwrap();
        assert_eq!(samples.len(), 40_000);
        let bound = cfg.epsilon + grid.voxel_size * 3f64.sqrt() / 2.0;
        assert!(samples[..10_000].iter().all(|s| s.sdf.abs() < bound));
        assert!(samples.iter().all(|s| s.source == SampleSource::Coarse && s.sdf.is_finite()));
        assert_eq!(samples, grid.sample_training_points(&cfg, 3).unwrap());
        assert_eq!(grid.observed_voxels().count(), grid.observed_count());
    }

    #[test]
    fn empty_strata_are_named() {
        let grid = small_grid([4, 4, 4]);
        let err = grid.sample_training_points(&CoarseSamplerConfig::default(), 0).unwrap_err();
        assert!(err.to_string().contains("near-surface"));
        let mut grid = small_grid([4, 4, 4]);
        for i in 0..grid.len() {
            let v = grid.voxel_coords(i);
            grid.set_voxel(v, 0.0, 1.0);
        }
        grid.update_esdf().unwrap();
        let err = grid.sample_training_points(&CoarseSamplerConfig::default(), 0).unwrap_err();
        assert!(err.to_string().contains("far"));
    }

    #[test]
    fn observed_iterator_on_empty_grid() {
        assert_eq!(small_grid([3, 3, 3]).observed_voxels().count(), 0);
    }

    #[test]
    fn snapshot_round_trip() {
        let grid = filled_grid();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.bin");
        grid.write_snapshot(&path).unwrap();
        let back = CoarseSdfGrid::read_snapshot(&path).unwrap();
        assert_eq!(back.dims(), grid.dims());
        assert_eq!(back.observed_count(), grid.observed_count());
        for i in 0..grid.len() {
            assert_eq!(back.esdf[i], grid.esdf[i] as f32 as f64);
        }
    }

    #[test]
    fn random_queries_stay_within_corner_range() {
        let grid = filled_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let p = grid.voxel_center([1, 1, 1]) + Vec3::new(rng.random(), rng.random(), rng.random()) * 0.375;
            let v = grid.query(p).unwrap();
            let max_abs = grid.esdf.iter().filter(|e| e.is_finite()).fold(0.0f64, |m, e| m.max(e.abs()));
            assert!(v.abs() <= max_abs + 1e-12);
        }
    }
}
