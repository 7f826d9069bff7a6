//! Fine local supervision from the current point cloud: stratified samples
//! along sensor rays, signed by their depth relative to the hit, with
//! magnitudes from a brute-force nearest-point search over the full cloud.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{min_distance_squared, Frame, Vec3};

#[derive(Error, Debug, PartialEq)]
pub enum LocalSdfError {
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("degenerate ray: surface point coincides with the sensor")]
    DegenerateRay,
    #[error("invalid local sampler config: {0}")]
    InvalidConfig(String),
}

/// Where a training sample came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    Coarse,
    Local,
}

/// Supervision pair: a position and its target signed distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdfSample {
    pub position: Vec3,
    pub sdf: f64,
    pub source: SampleSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalSamplerConfig {
    /// Rays per frame (subset size).
    pub s_rays: usize,
    /// Stratified samples per ray.
    pub q_per_ray: usize,
    /// Distance behind the hit that rays extend to, also the cutoff on
    /// |LSDF|.
    pub truncation: f64,
}

impl Default for LocalSamplerConfig {
    fn default() -> Self {
        Self { s_rays: 1000, q_per_ray: 20, truncation: 0.2 }
    }
}

impl LocalSamplerConfig {
    pub fn validate(&self) -> Result<(), LocalSdfError> {
        if self.s_rays == 0 || self.q_per_ray == 0 {
            return Err(LocalSdfError::InvalidConfig("counts must be positive".into()));
        }
        if !(self.truncation > 0.0) {
            return Err(LocalSdfError::InvalidConfig("truncation must be positive".into()));
        }
        Ok(())
    }
}

/// Indices of `min(s_rays, P)` distinct points drawn uniformly.
pub fn subsample_cloud(frame: &Frame, s_rays: usize, rng: &mut impl Rng) -> Result<Vec<usize>, LocalSdfError> {
    let p = frame.points.len();
    if p == 0 {
        return Err(LocalSdfError::EmptyCloud);
    }
    Ok(index::sample(rng, p, s_rays.min(p)).into_vec())
}

/// One uniform sample per stratum `[jL/Q, (j+1)L/Q)` of the segment from
/// `sensor` through `surface` extended by `truncation`.
pub fn stratified_ray_samples(
    sensor: Vec3,
    surface: Vec3,
    q_per_ray: usize,
    truncation: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Vec3>, LocalSdfError> {
    let dir = (surface - sensor).normalized().ok_or(LocalSdfError::DegenerateRay)?;
    let length = surface.distance(sensor) + truncation;
    let width = length / q_per_ray as f64;
    Ok((0..q_per_ray)
        .map(|j| {
            let lo = j as f64 * width;
            let hi = (j + 1) as f64 * width;
            let mut d = lo + rng.random::<f64>() * width;
            if d >= hi {
                d = lo;
            }
            sensor + dir * d
        })
        .collect())
}

/// `+1` strictly in front of the observed surface, `-1` otherwise.
pub fn assign_sign(q: Vec3, sensor: Vec3, surface: Vec3) -> f64 {
    if q.distance(sensor) < surface.distance(sensor) {
        1.0
    } else {
        -1.0
    }
}

/// Signed distance of each query to the nearest point of `cloud`.
/// Evaluated in parallel; each value is independent of evaluation order.
pub fn compute_lsdf(queries: &[(Vec3, f64)], cloud: &[Vec3]) -> Result<Vec<f64>, LocalSdfError> {
    if cloud.is_empty() {
        return Err(LocalSdfError::EmptyCloud);
    }
    Ok(queries
        .par_iter()
        .with_min_len(256)
        .map(|(q, sign)| sign * min_distance_squared(cloud, *q).0.sqrt())
        .collect())
}

/// Full local pipeline for one frame: subsample, stratify, sign, measure,
/// and keep samples with `|LSDF| <= truncation`.
pub fn generate_local_samples(
    frame: &Frame,
    config: &LocalSamplerConfig,
    seed: u64,
) -> Result<Vec<SdfSample>, LocalSdfError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subset = subsample_cloud(frame, config.s_rays, &mut rng)?;
    let sensor = frame.sensor_origin();
    let mut queries = Vec::with_capacity(subset.len() * config.q_per_ray);
    for &i in &subset {
        let surface = frame.points[i];
        for q in stratified_ray_samples(sensor, surface, config.q_per_ray, config.truncation, &mut rng)? {
            queries.push((q, assign_sign(q, sensor, surface)));
        }
    }
    let lsdf = compute_lsdf(&queries, &frame.points)?;
    Ok(queries
        .iter()
        .zip(lsdf)
        .filter(|(_, d)| d.abs() <= config.truncation)
        .map(|((q, _), d)| SdfSample { position: *q, sdf: d, source: SampleSource::Local })
        .collect())
}
