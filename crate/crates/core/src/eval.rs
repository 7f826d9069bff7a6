//! Accuracy metrics against an analytic ground truth and SDF slice export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coarse_grid::{CoarseSdfGrid, GridError};
use crate::geometry::{Aabb, Gradient, Scene, Vec3};
use crate::siren::real::Real;
use crate::siren::{SirenError, SirenNetwork};

/// Points closer than this to the sensor count towards the local error.
pub const LOCAL_RADIUS: f64 = 3.0;

#[derive(Error, Debug)]
pub enum EvalError {
    #[error("no observed voxels to sample evaluation points from")]
    EmptyRegion,
    #[error("no evaluation points")]
    EmptyPoints,
    #[error("zero-norm gradient")]
    DegenerateGradient,
    #[error("invalid slice request: {0}")]
    InvalidSlice(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed report: {0}")]
    Parse(String),
    #[error(transparent)]
    Network(#[from] SirenError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Anything that can be queried for signed distance and its gradient.
pub trait SdfField: Sync {
    fn values_and_gradients(&self, points: &[Vec3]) -> Result<Vec<(f64, Vec3)>, EvalError>;

    fn values(&self, points: &[Vec3]) -> Result<Vec<f64>, EvalError> {
        Ok(self.values_and_gradients(points)?.into_iter().map(|(v, _)| v).collect())
    }
}

impl<T: Real> SdfField for SirenNetwork<T> {
    fn values_and_gradients(&self, points: &[Vec3]) -> Result<Vec<(f64, Vec3)>, EvalError> {
        if points.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.value_and_gradient_batch(points)?)
    }

    fn values(&self, points: &[Vec3]) -> Result<Vec<f64>, EvalError> {
        if points.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.forward_batch(points)?)
    }
}

/// The scene's own SDF with finite-difference gradients.
pub struct AnalyticField<'a>(pub &'a Scene);

impl SdfField for AnalyticField<'_> {
    fn values_and_gradients(&self, points: &[Vec3]) -> Result<Vec<(f64, Vec3)>, EvalError> {
        Ok(points.par_iter().map(|&p| (self.0.sdf(p), self.0.raw_gradient(p))).collect())
    }
}

/// `f ≡ c`.
pub struct ConstantField(pub f64);

impl SdfField for ConstantField {
    fn values_and_gradients(&self, points: &[Vec3]) -> Result<Vec<(f64, Vec3)>, EvalError> {
        Ok(points.iter().map(|_| (self.0, Vec3::ZERO)).collect())
    }
}

/// Trilinear coarse-grid ESDF over observed voxels; gradients by central
/// differences of a tenth of a voxel.
pub struct GridField<'a>(pub &'a CoarseSdfGrid);

impl SdfField for GridField<'_> {
    fn values_and_gradients(&self, points: &[Vec3]) -> Result<Vec<(f64, Vec3)>, EvalError> {
        let grid = self.0;
        let h = 0.1 * grid.voxel_size();
        points
            .par_iter()
            .map(|&p| {
                let v = grid.query_observed(p)?;
                let d = |e: Vec3| -> Result<f64, GridError> {
                    Ok((grid.query_observed(p + e * h)? - grid.query_observed(p - e * h)?) / (2.0 * h))
                };
                let g = match (d(Vec3::X), d(Vec3::Y), d(Vec3::Z)) {
                    (Ok(x), Ok(y), Ok(z)) => Vec3::new(x, y, z),
                    _ => Vec3::ZERO,
                };
                Ok((v, g))
            })
            .collect()
    }

    fn values(&self, points: &[Vec3]) -> Result<Vec<f64>, EvalError> {
        points.par_iter().map(|&p| Ok(self.0.query_observed(p)?)).collect()
    }
}

/// `n` points uniform over the union of observed voxels.
pub fn sample_eval_points(grid: &CoarseSdfGrid, n: usize, seed: u64) -> Result<Vec<Vec3>, EvalError> {
    let observed = grid.observed_indices();
    if observed.is_empty() {
        return Err(EvalError::EmptyRegion);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let idx = observed[rng.random_range(0..observed.len())];
            grid.random_point_in_voxel(idx, &mut rng)
        })
        .collect())
}

/// `1 − cos` of the angle between two gradients, in `[0, 2]`.
pub fn cosine_loss(g_pred: Vec3, g_true: Vec3) -> Result<f64, EvalError> {
    let denom = g_pred.norm() * g_true.norm();
    if !(denom > 0.0) {
        return Err(EvalError::DegenerateGradient);
    }
    Ok((1.0 - g_pred.dot(g_true) / denom).clamp(0.0, 2.0))
}

/// Per-point contributions; independent of which other points are evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointEval {
    pub abs_error: f64,
    pub local: bool,
    pub eikonal: f64,
    /// `None` where the ground-truth or predicted gradient is unusable.
    pub cosine: Option<f64>,
    pub reliable_truth: bool,
}

pub fn evaluate_points(
    field: &dyn SdfField,
    scene: &Scene,
    points: &[Vec3],
    sensor_origin: Vec3,
) -> Result<Vec<PointEval>, EvalError> {
    let predicted = field.values_and_gradients(points)?;
    Ok(points
        .par_iter()
        .zip(predicted.par_iter())
        .map(|(&x, &(f, g))| {
            let truth = scene.gradient(x);
            let cosine = match truth {
                Gradient::Reliable(t) => cosine_loss(g, t).ok(),
                Gradient::Unreliable(_) => None,
            };
            PointEval {
                abs_error: (f - scene.sdf(x)).abs(),
                local: x.distance(sensor_origin) < LOCAL_RADIUS,
                eikonal: (g.norm() - 1.0).abs(),
                cosine,
                reliable_truth: truth.is_reliable(),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub update_index: u64,
    pub n_points: usize,
    pub global_sdf_mae: f64,
    /// Absent when no point lies within the local radius.
    pub local_sdf_mae: Option<f64>,
    pub n_local: usize,
    pub eikonal_mean: f64,
    /// Absent when no point has a usable gradient pair.
    pub cosine_loss_mean: Option<f64>,
    pub n_cosine: usize,
    /// Points excluded from the cosine metric because the ground-truth
    /// gradient is unreliable there.
    pub n_unreliable_gradients: usize,
    /// Coarse-grid error on the same points, when computed.
    pub grid_sdf_mae: Option<f64>,
}

pub fn evaluate(
    field: &dyn SdfField,
    scene: &Scene,
    points: &[Vec3],
    sensor_origin: Vec3,
    update_index: u64,
) -> Result<EvalReport, EvalError> {
    if points.is_empty() {
        return Err(EvalError::EmptyPoints);
    }
    let per_point = evaluate_points(field, scene, points, sensor_origin)?;
    let n = per_point.len();
    let local: Vec<f64> = per_point.iter().filter(|p| p.local).map(|p| p.abs_error).collect();
    let cosines: Vec<f64> = per_point.iter().filter_map(|p| p.cosine).collect();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(EvalReport {
        update_index,
        n_points: n,
        global_sdf_mae: per_point.iter().map(|p| p.abs_error).sum::<f64>() / n as f64,
        local_sdf_mae: mean(&local),
        n_local: local.len(),
        eikonal_mean: per_point.iter().map(|p| p.eikonal).sum::<f64>() / n as f64,
        cosine_loss_mean: mean(&cosines),
        n_cosine: cosines.len(),
        n_unreliable_gradients: per_point.iter().filter(|p| !p.reliable_truth).count(),
        grid_sdf_mae: None,
    })
}

/// Mean absolute error of a field's values against the scene.
pub fn mean_abs_error(field: &dyn SdfField, scene: &Scene, points: &[Vec3]) -> Result<f64, EvalError> {
    if points.is_empty() {
        return Err(EvalError::EmptyPoints);
    }
    let values = field.values(points)?;
    Ok(points.iter().zip(&values).map(|(&p, v)| (v - scene.sdf(p)).abs()).sum::<f64>() / points.len() as f64)
}

pub const REPORT_CSV_HEADER: &str = "update_index,n_points,global_sdf_mae,local_sdf_mae,n_local,eikonal_mean,\
cosine_loss_mean,n_cosine,n_unreliable_gradients,grid_sdf_mae";

fn opt_field(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl EvalReport {
    /// One CSV row matching [`REPORT_CSV_HEADER`]; absent values are empty.
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.update_index,
            self.n_points,
            self.global_sdf_mae,
            opt_field(self.local_sdf_mae),
            self.n_local,
            self.eikonal_mean,
            opt_field(self.cosine_loss_mean),
            self.n_cosine,
            self.n_unreliable_gradients,
            opt_field(self.grid_sdf_mae),
        )
    }

    pub fn from_csv_row(row: &str) -> Result<Self, EvalError> {
        let cols: Vec<&str> = row.trim_end().split(',').collect();
        if cols.len() != 10 {
            return Err(EvalError::Parse(format!("expected 10 columns, got {}", cols.len())));
        }
        fn num<T: std::str::FromStr>(s: &str, name: &str) -> Result<T, EvalError> {
            s.parse().map_err(|_| EvalError::Parse(format!("bad {name}: {s:?}")))
        }
        let opt = |s: &str, name: &str| -> Result<Option<f64>, EvalError> {
            if s.is_empty() { Ok(None) } else { num(s, name).map(Some) }
        };
        Ok(Self {
            update_index: num(cols[0], "update_index")?,
            n_points: num(cols[1], "n_points")?,
            global_sdf_mae: num(cols[2], "global_sdf_mae")?,
            local_sdf_mae: opt(cols[3], "local_sdf_mae")?,
            n_local: num(cols[4], "n_local")?,
            eikonal_mean: num(cols[5], "eikonal_mean")?,
            cosine_loss_mean: opt(cols[6], "cosine_loss_mean")?,
            n_cosine: num(cols[7], "n_cosine")?,
            n_unreliable_gradients: num(cols[8], "n_unreliable_gradients")?,
            grid_sdf_mae: opt(cols[9], "grid_sdf_mae")?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        serde_json::from_str(text).map_err(|e| EvalError::Parse(e.to_string()))
    }
}

/// Reads every data row of a metrics CSV written with [`REPORT_CSV_HEADER`].
pub fn read_report_csv(path: &Path) -> Result<Vec<EvalReport>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == REPORT_CSV_HEADER => {}
        _ => return Err(EvalError::Parse("missing or unexpected header".into())),
    }
    lines.filter(|l| !l.is_empty()).map(EvalReport::from_csv_row).collect()
}

/// Horizontal slice of a field sampled at cell centers. Row `j` holds
/// `y = y0 + (j + ½)·resolution`, column `i` holds `x = x0 + (i + ½)·resolution`.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub z: f64,
    pub x0: f64,
    pub y0: f64,
    pub resolution: f64,
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

impl Slice {
    pub fn position(&self, i: usize, j: usize) -> Vec3 {
        Vec3::new(
            self.x0 + (i as f64 + 0.5) * self.resolution,
            self.y0 + (j as f64 + 0.5) * self.resolution,
            self.z,
        )
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.nx + i]
    }

    /// Gray levels: 128 at zero, positive values in `[129, 255]`, negative
    /// in `[0, 127]`, scaled by the largest magnitude.
    pub fn to_gray(&self) -> Vec<u8> {
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        self.values
            .iter()
            .map(|&v| {
                if v > 0.0 {
                    (128.0 + (v / scale * 127.0).round().max(1.0)).min(255.0) as u8
                } else if v < 0.0 {
                    (128.0 - (-v / scale * 128.0).round().max(1.0)).max(0.0) as u8
                } else {
                    128
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# z={},x0={},y0={},resolution={},nx={},ny={}\n",
            self.z, self.x0, self.y0, self.resolution, self.nx, self.ny
        );
        for row in self.values.chunks(self.nx) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.nx, self.ny).into_bytes();
        out.extend(self.to_gray());
        out
    }
}

pub fn compute_slice(field: &dyn SdfField, z: f64, bounds: &Aabb, resolution: f64) -> Result<Slice, EvalError> {
    if !bounds.is_valid() {
        return Err(EvalError::InvalidSlice("degenerate bounds".into()));
    }
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(EvalError::InvalidSlice("resolution must be positive".into()));
    }
    let extent = bounds.extent();
    let nx = ((extent.x / resolution).ceil() as usize).max(1);
    let ny = ((extent.y / resolution).ceil() as usize).max(1);
    let mut slice = Slice { z, x0: bounds.min.x, y0: bounds.min.y, resolution, nx, ny, values: Vec::new() };
    let points: Vec<Vec3> = (0..nx * ny).map(|k| slice.position(k % nx, k / nx)).collect();
    slice.values = field.values(&points)?;
    Ok(slice)
}

/// Writes `<stem>.csv` and `<stem>.pgm` for a slice at height `z`; any
/// dots already in `stem` are kept.
pub fn export_slice(
    field: &dyn SdfField,
    z: f64,
    bounds: &Aabb,
    resolution: f64,
    stem: &Path,
) -> Result<Slice, EvalError> {
    let slice = compute_slice(field, z, bounds, resolution)?;
    let write = |ext: &str, bytes: &[u8]| {
        let mut name = stem.as_os_str().to_owned();
        name.push(".");
        name.push(ext);
        let path = PathBuf::from(name);
        fs::write(&path, bytes).map_err(|source| EvalError::Io { path, source })
    };
    write("csv", slice.to_csv().as_bytes())?;
    write("pgm", &slice.to_pgm())?;
    Ok(slice)
}
