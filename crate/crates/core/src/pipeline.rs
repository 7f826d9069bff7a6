//! Per-frame orchestration: fuse the frame into the coarse grid, propagate
//! the ESDF, draw coarse and local samples, run one incremental network
//! update and periodically evaluate.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coarse_grid::{CoarseSamplerConfig, CoarseSdfGrid, GridError, GridSpec, DEFAULT_VOXEL_SIZE};
use crate::eval::{
    evaluate, export_slice, mean_abs_error, sample_eval_points, EvalError, EvalReport, GridField, SdfField,
    REPORT_CSV_HEADER,
};
use crate::geometry::{Aabb, Frame, GeometryError, Scene, Vec3};
use crate::local_sdf::{generate_local_samples, LocalSamplerConfig};
use crate::sensor_sim::{
    decode_points, load_dataset_frames, simulate_frames, write_dataset, SensorSpec, SimError, TrajectorySpec,
};
use crate::siren::{read_checkpoint, write_checkpoint, AdamState, SirenError, SirenNetwork, DEFAULT_LAYER_DIMS};
use crate::trainer::{
    assemble_dataset, incremental_update, write_loss_trace, TrainConfig, TrainError, UpdateDataset,
    LOSS_TRACE_HEADER,
};

pub const LOSS_TRACE_FILE: &str = "loss_trace.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const GRID_SNAPSHOT_FILE: &str = "grid.csdf";
pub const SUMMARY_FILE: &str = "run_summary.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const SLICE_DIR: &str = "slices";
pub const SNAPSHOT_DIR: &str = "snapshots";

#[derive(Error, Debug)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("first frame failed, aborting: {0}")]
    FirstFrame(String),
    #[error("no frames selected")]
    NoFrames,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Network(#[from] SirenError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Half-open range of dataset positions, written `A..B`, `A..` or `..B`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRange {
    pub start: usize,
    pub end: Option<usize>,
}

impl FrameRange {
    pub fn apply<T>(&self, items: Vec<T>) -> Vec<T> {
        let end = self.end.unwrap_or(items.len()).min(items.len());
        items.into_iter().take(end).skip(self.start).collect()
    }
}

impl FromStr for FrameRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s.split_once("..").ok_or_else(|| format!("expected A..B, got {s:?}"))?;
        let parse = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("bad frame bound {t:?}"));
        let start = if a.trim().is_empty() { 0 } else { parse(a)? };
        let end = if b.trim().is_empty() { None } else { Some(parse(b)?) };
        if end.is_some_and(|e| e < start) {
            return Err(format!("empty frame range {s:?}"));
        }
        Ok(Self { start, end })
    }
}

/// Recipe for a simulated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub scene: PathBuf,
    pub trajectory: TrajectorySpec,
    pub sensor: SensorSpec,
    #[serde(default)]
    pub noise_sigma: f64,
    /// Largest allowed distance between consecutive poses, meters.
    #[serde(default = "default_max_step")]
    pub max_step: f64,
}

fn default_max_step() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DataSource {
    Manifest { path: PathBuf },
    Simulate(SimulationSpec),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GridConfig {
    /// Smallest grid covering the scene bounds grown by `margin`.
    CoverScene {
        #[serde(default = "default_voxel_size")]
        voxel_size: f64,
        #[serde(default)]
        margin: f64,
        #[serde(default)]
        truncation: Option<f64>,
    },
    Explicit(GridSpec),
}

fn default_voxel_size() -> f64 {
    DEFAULT_VOXEL_SIZE
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig::CoverScene { voxel_size: DEFAULT_VOXEL_SIZE, margin: 0.0, truncation: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub layer_dims: Vec<usize>,
    pub omega0: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { layer_dims: DEFAULT_LAYER_DIMS.to_vec(), omega0: crate::siren::DEFAULT_OMEGA0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate after every `every_k_frames` frames and after the last one.
    pub every_k_frames: usize,
    pub n_points: usize,
    /// Heights of exported SDF slices; none when empty.
    pub slice_heights: Vec<f64>,
    pub slice_resolution: f64,
    /// Keep a checkpoint and grid snapshot at every evaluation.
    pub save_snapshots: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { every_k_frames: 5, n_points: 25_000, slice_heights: Vec::new(), slice_resolution: 0.05, save_snapshots: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub source: DataSource,
    /// Ground-truth scene; defaults to the simulation scene.
    #[serde(default)]
    pub scene: Option<PathBuf>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub coarse_sampler: CoarseSamplerConfig,
    #[serde(default)]
    pub local_sampler: LocalSamplerConfig,
    /// `train.seed` is replaced by a stream derived from `seed`.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub use_coarse: bool,
    #[serde(default = "yes")]
    pub use_local: bool,
    #[serde(default)]
    pub pipelined: bool,
    #[serde(default)]
    pub frames: Option<FrameRange>,
    #[serde(default = "yes")]
    pub write_grid_snapshot: bool,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("run_output")
}

fn yes() -> bool {
    true
}

impl PipelineConfig {
    pub fn new(source: DataSource) -> Self {
        Self {
            source,
            scene: None,
            grid: GridConfig::default(),
            coarse_sampler: CoarseSamplerConfig::default(),
            local_sampler: LocalSamplerConfig::default(),
            train: TrainConfig::default(),
            network: NetworkConfig::default(),
            eval: EvalConfig::default(),
            output_dir: default_output_dir(),
            seed: 0,
            use_coarse: true,
            use_local: true,
            pipelined: false,
            frames: None,
            write_grid_snapshot: true,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut config =
            Self::from_json(&text).map_err(|e| PipelineError::Parse { path: path.to_path_buf(), reason: e.to_string() })?;
        config.resolve_paths(path.parent().unwrap_or_else(|| Path::new(".")));
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.source {
            DataSource::Manifest { path } => fix(path),
            DataSource::Simulate(spec) => fix(&mut spec.scene),
        }
        if let Some(scene) = &mut self.scene {
            fix(scene);
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !self.use_coarse && !self.use_local {
            return bad("at least one of use_coarse and use_local must be enabled".into());
        }
        if self.eval.every_k_frames == 0 {
            return bad("eval.every_k_frames must be at least 1".into());
        }
        if self.eval.n_points == 0 {
            return bad("eval.n_points must be positive".into());
        }
        if !(self.eval.slice_resolution > 0.0) {
            return bad("eval.slice_resolution must be positive".into());
        }
        self.train.validate()?;
        self.coarse_sampler.validate()?;
        self.local_sampler.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if let GridConfig::CoverScene { voxel_size, margin, .. } = self.grid {
            if !(voxel_size > 0.0) || !(margin >= 0.0) {
                return bad("grid voxel_size must be positive and margin non-negative".into());
            }
            if self.scene_path().is_none() {
                return bad("grid type cover_scene needs a scene; give an explicit grid instead".into());
            }
        }
        SirenNetwork::<f32>::init(&self.network.layer_dims, self.network.omega0, 0)?;
        Ok(())
    }

    pub fn scene_path(&self) -> Option<&Path> {
        match (&self.scene, &self.source) {
            (Some(p), _) => Some(p),
            (None, DataSource::Simulate(spec)) => Some(&spec.scene),
            _ => None,
        }
    }

    pub fn grid_spec(&self, scene: Option<&Scene>) -> Result<GridSpec, PipelineError> {
        match self.grid {
            GridConfig::Explicit(spec) => Ok(spec),
            GridConfig::CoverScene { voxel_size, margin, truncation } => {
                let scene = scene.ok_or_else(|| PipelineError::Config("cover_scene grid needs a scene".into()))?;
                let mut spec = GridSpec::covering(&scene.bounds.expanded(margin), voxel_size);
                spec.truncation = truncation;
                Ok(spec)
            }
        }
    }
}

const STREAM_INIT: u64 = 1;
const STREAM_COARSE: u64 = 2;
const STREAM_LOCAL: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_TRAIN: u64 = 5;

/// Independent seed for `(stream, index)` under a master seed.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        ^ stream.wrapping_mul(0xA076_1D64_78BD_642F)
        ^ index.wrapping_add(1).wrapping_mul(0xE703_7ED1_A0B4_28DB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders a simulated dataset in memory.
pub fn simulate_dataset(spec: &SimulationSpec, seed: u64) -> Result<(Scene, Vec<Frame>), PipelineError> {
    let scene = Scene::load(&spec.scene)?;
    let trajectory = spec.trajectory.build(&spec.sensor, spec.max_step)?;
    let frames = simulate_frames(&scene, &trajectory, &spec.sensor, spec.noise_sigma, seed)?;
    Ok((scene, frames))
}

/// Renders and writes a dataset; returns the manifest path.
pub fn simulate(spec: &SimulationSpec, out_dir: &Path, seed: u64) -> Result<PathBuf, PipelineError> {
    let (_, frames) = simulate_dataset(spec, seed)?;
    Ok(write_dataset(&frames, out_dir)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedFrame {
    pub position: usize,
    pub index: u64,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub frames_total: usize,
    pub frames_processed: usize,
    pub skipped: Vec<SkippedFrame>,
    pub loss_trace_rows: usize,
    pub reports: Vec<EvalReport>,
    pub checkpoint: PathBuf,
}

/// Mean wall-clock seconds per stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub fusion: f64,
    pub esdf: f64,
    pub coarse_sampling: f64,
    pub local_sampling: f64,
    pub training_epoch: f64,
    pub training_update: f64,
    pub evaluation: f64,
    pub wall_clock_total: f64,
}

#[derive(Default)]
struct TimingAccumulator {
    sums: [f64; 6],
    counts: [usize; 6],
}

impl TimingAccumulator {
    fn add(&mut self, stage: usize, seconds: f64) {
        self.sums[stage] += seconds;
        self.counts[stage] += 1;
    }

    fn means(&self, total: f64, epochs: usize) -> StageTimings {
        let m = |i: usize| if self.counts[i] == 0 { 0.0 } else { self.sums[i] / self.counts[i] as f64 };
        StageTimings {
            fusion: m(0),
            esdf: m(1),
            coarse_sampling: m(2),
            local_sampling: m(3),
            training_epoch: m(4) / epochs.max(1) as f64,
            training_update: m(4),
            evaluation: m(5),
            wall_clock_total: total,
        }
    }
}

const T_FUSION: usize = 0;
const T_ESDF: usize = 1;
const T_COARSE: usize = 2;
const T_LOCAL: usize = 3;
const T_TRAIN: usize = 4;
const T_EVAL: usize = 5;

/// Work handed from the backbone to the trainer for one dataset position.
struct Package {
    position: usize,
    index: u64,
    work: Result<UpdateDataset, String>,
    eval: Option<EvalJob>,
    timings: Vec<(usize, f64)>,
}

struct EvalJob {
    points: Vec<Vec3>,
    sensor_origin: Vec3,
    grid_mae: Option<f64>,
    grid_snapshot: Option<CoarseSdfGrid>,
}

struct Backbone<'a> {
    config: &'a PipelineConfig,
    scene: Option<&'a Scene>,
    grid: CoarseSdfGrid,
    n_total: usize,
    last_origin: Option<Vec3>,
}

impl Backbone<'_> {
    fn step(&mut self, position: usize, index: u64, frame: Result<Frame, String>) -> Package {
        let mut timings = Vec::new();
        let work = frame.and_then(|frame| self.build_dataset(&frame, &mut timings));
        let eval_due = (position + 1) % self.config.eval.every_k_frames == 0 || position + 1 == self.n_total;
        let eval = match (eval_due, self.last_origin) {
            (true, Some(origin)) => Some(self.eval_job(index, origin)),
            _ => None,
        };
        Package { position, index, work, eval, timings }
    }

    fn build_dataset(&mut self, frame: &Frame, timings: &mut Vec<(usize, f64)>) -> Result<UpdateDataset, String> {
        let seed = self.config.seed;
        let t = Instant::now();
        let stats = self.grid.integrate_frame(frame).map_err(|e| e.to_string())?;
        timings.push((T_FUSION, t.elapsed().as_secs_f64()));
        log::debug!("frame {}: {} points fused, {} voxel updates", frame.index, stats.integrated_points, stats.voxel_updates);
        self.last_origin = Some(frame.sensor_origin());

        let t = Instant::now();
        self.grid.update_esdf().map_err(|e| e.to_string())?;
        timings.push((T_ESDF, t.elapsed().as_secs_f64()));

        let coarse = if self.config.use_coarse {
            let t = Instant::now();
            let s = self
                .grid
                .sample_training_points(&self.config.coarse_sampler, derive_seed(seed, STREAM_COARSE, frame.index))
                .map_err(|e| e.to_string())?;
            timings.push((T_COARSE, t.elapsed().as_secs_f64()));
            s
        } else {
            Vec::new()
        };
        let local = if self.config.use_local {
            let t = Instant::now();
            let s = generate_local_samples(frame, &self.config.local_sampler, derive_seed(seed, STREAM_LOCAL, frame.index))
                .map_err(|e| e.to_string())?;
            timings.push((T_LOCAL, t.elapsed().as_secs_f64()));
            s
        } else {
            Vec::new()
        };
        assemble_dataset(coarse, local).map_err(|e| e.to_string())
    }

    fn eval_job(&self, index: u64, sensor_origin: Vec3) -> EvalJob {
        let seed = derive_seed(self.config.seed, STREAM_EVAL, index);
        let points = sample_eval_points(&self.grid, self.config.eval.n_points, seed).unwrap_or_default();
        let grid_mae = match self.scene {
            Some(scene) if !points.is_empty() => mean_abs_error(&GridField(&self.grid), scene, &points).ok(),
            _ => None,
        };
        let grid_snapshot = self.config.eval.save_snapshots.then(|| self.grid.clone());
        EvalJob { points, sensor_origin, grid_mae, grid_snapshot }
    }
}

struct Outputs {
    dir: PathBuf,
    loss: BufWriter<File>,
    metrics: Option<BufWriter<File>>,
}

fn create(path: &Path) -> Result<BufWriter<File>, PipelineError> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

/// Loads the scene and frames named by the config and runs the pipeline.
pub fn run(config: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    config.validate()?;
    let (scene, entries): (Option<Scene>, Vec<(u64, Result<Frame, String>)>) = match &config.source {
        DataSource::Simulate(spec) => {
            let (sim_scene, frames) = simulate_dataset(spec, config.seed)?;
            let scene = match &config.scene {
                Some(p) => Scene::load(p)?,
                None => sim_scene,
            };
            (Some(scene), frames.into_iter().map(|f| (f.index, Ok(f))).collect())
        }
        DataSource::Manifest { path } => {
            let scene = config.scene.as_deref().map(Scene::load).transpose()?;
            let frames = load_dataset_frames(path)?;
            (scene, frames.into_iter().map(|(i, f)| (i, f.map_err(|e| e.to_string()))).collect())
        }
    };
    run_frames(config, scene.as_ref(), entries)
}

/// Runs the pipeline over already-loaded frames; failed entries are
/// skipped (or abort the run when first).
pub fn run_frames(
    config: &PipelineConfig,
    scene: Option<&Scene>,
    entries: Vec<(u64, Result<Frame, String>)>,
) -> Result<RunSummary, PipelineError> {
    config.validate()?;
    let started = Instant::now();
    let entries = config.frames.unwrap_or_default().apply(entries);
    if entries.is_empty() {
        return Err(PipelineError::NoFrames);
    }
    let grid = CoarseSdfGrid::new(&config.grid_spec(scene)?)?;
    fs::create_dir_all(&config.output_dir).map_err(io_err(&config.output_dir))?;
    for sub in [SLICE_DIR, SNAPSHOT_DIR] {
        let dir = config.output_dir.join(sub);
        if (sub == SLICE_DIR && !config.eval.slice_heights.is_empty()) || (sub == SNAPSHOT_DIR && config.eval.save_snapshots) {
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
    }
    let mut outputs = Outputs {
        dir: config.output_dir.clone(),
        loss: create(&config.output_dir.join(LOSS_TRACE_FILE))?,
        metrics: scene.map(|_| create(&config.output_dir.join(METRICS_FILE))).transpose()?,
    };
    writeln!(outputs.loss, "{LOSS_TRACE_HEADER}").map_err(io_err(&outputs.dir))?;
    if let Some(m) = outputs.metrics.as_mut() {
        writeln!(m, "{REPORT_CSV_HEADER}").map_err(io_err(&outputs.dir))?;
    }

    let mut trainer = TrainerStage::new(config, scene, entries.len())?;
    let mut backbone = Backbone { config, scene, grid, n_total: entries.len(), last_origin: None };

    if config.pipelined {
        std::thread::scope(|s| -> Result<(), PipelineError> {
            let (tx, rx) = mpsc::sync_channel::<Package>(1);
            let producer = s.spawn(move || {
                for (position, (index, frame)) in entries.into_iter().enumerate() {
                    if tx.send(backbone.step(position, index, frame)).is_err() {
                        break;
                    }
                }
                backbone.grid
            });
            let mut result = Ok(());
            for package in rx.iter() {
                if let Err(e) = trainer.consume(package, &mut outputs) {
                    result = Err(e);
                    break;
                }
            }
            drop(rx);
            let grid = producer.join().expect("backbone thread panicked");
            result?;
            trainer.finish_grid(&grid, &outputs)
        })?;
    } else {
        for (position, (index, frame)) in entries.into_iter().enumerate() {
            let package = backbone.step(position, index, frame);
            trainer.consume(package, &mut outputs)?;
        }
        trainer.finish_grid(&backbone.grid, &outputs)?;
    }
    trainer.finish(&mut outputs, started.elapsed().as_secs_f64())
}

struct TrainerStage<'a> {
    config: &'a PipelineConfig,
    scene: Option<&'a Scene>,
    train: TrainConfig,
    net: SirenNetwork<f32>,
    adam: AdamState,
    summary: RunSummary,
    timings: TimingAccumulator,
}

impl<'a> TrainerStage<'a> {
    fn new(config: &'a PipelineConfig, scene: Option<&'a Scene>, frames_total: usize) -> Result<Self, PipelineError> {
        let net = SirenNetwork::<f32>::init(
            &config.network.layer_dims,
            config.network.omega0,
            derive_seed(config.seed, STREAM_INIT, 0),
        )?;
        let adam = AdamState::new(net.n_params());
        Ok(Self {
            config,
            scene,
            train: TrainConfig { seed: derive_seed(config.seed, STREAM_TRAIN, 0), ..config.train },
            net,
            adam,
            summary: RunSummary { frames_total, ..RunSummary::default() },
            timings: TimingAccumulator::default(),
        })
    }

    fn consume(&mut self, package: Package, out: &mut Outputs) -> Result<(), PipelineError> {
        for (stage, secs) in &package.timings {
            self.timings.add(*stage, *secs);
        }
        match package.work {
            Ok(dataset) => {
                let t = Instant::now();
                let trace = incremental_update(&mut self.net, &mut self.adam, &dataset, &self.train, package.index)?;
                let secs = t.elapsed().as_secs_f64();
                self.timings.add(T_TRAIN, secs);
                write_loss_trace(&trace, &mut out.loss).map_err(io_err(&out.dir))?;
                out.loss.flush().map_err(io_err(&out.dir))?;
                self.summary.loss_trace_rows += trace.len();
                self.summary.frames_processed += 1;
                info!(
                    "frame {} ({}/{}): {} samples, loss {:.4}, {:.2}s",
                    package.index,
                    package.position + 1,
                    self.summary.frames_total,
                    dataset.len(),
                    trace.last().map_or(f64::NAN, |r| r.total),
                    secs
                );
            }
            Err(reason) if package.position == 0 => return Err(PipelineError::FirstFrame(reason)),
            Err(reason) => {
                warn!("skipping frame {} at position {}: {reason}", package.index, package.position);
                self.summary.skipped.push(SkippedFrame { position: package.position, index: package.index, reason });
            }
        }
        if let Some(job) = package.eval {
            let t = Instant::now();
            self.evaluate(package.index, job, out)?;
            self.timings.add(T_EVAL, t.elapsed().as_secs_f64());
        }
        Ok(())
    }

    fn evaluate(&mut self, index: u64, job: EvalJob, out: &mut Outputs) -> Result<(), PipelineError> {
        if let (Some(scene), Some(metrics)) = (self.scene, out.metrics.as_mut()) {
            if !job.points.is_empty() {
                let mut report = evaluate(&self.net, scene, &job.points, job.sensor_origin, index)?;
                report.grid_sdf_mae = job.grid_mae;
                writeln!(metrics, "{}", report.to_csv_row()).map_err(io_err(&out.dir))?;
                metrics.flush().map_err(io_err(&out.dir))?;
                info!(
                    "eval after frame {index}: global {:.4} m, local {:?}, grid {:?}, eikonal {:.4}",
                    report.global_sdf_mae, report.local_sdf_mae, report.grid_sdf_mae, report.eikonal_mean
                );
                self.summary.reports.push(report);
            }
        }
        if !self.config.eval.slice_heights.is_empty() {
            let bounds = self.slice_bounds(job.grid_snapshot.as_ref());
            for &z in &self.config.eval.slice_heights {
                let stem = out.dir.join(SLICE_DIR).join(format!("slice_{index:06}_z{z:.2}"));
                export_slice(&self.net as &dyn SdfField, z, &bounds, self.config.eval.slice_resolution, &stem)?;
            }
        }
        if let Some(grid) = job.grid_snapshot {
            let dir = out.dir.join(SNAPSHOT_DIR);
            write_checkpoint(&self.net, &dir.join(format!("checkpoint_{index:06}.bin")))?;
            grid.write_snapshot(&dir.join(format!("grid_{index:06}.csdf")))?;
        }
        Ok(())
    }

    fn slice_bounds(&self, grid: Option<&CoarseSdfGrid>) -> Aabb {
        match (self.scene, grid) {
            (Some(scene), _) => scene.bounds,
            (None, Some(grid)) => grid.bounds(),
            (None, None) => match self.config.grid {
                GridConfig::Explicit(spec) => CoarseSdfGrid::new(&spec).map(|g| g.bounds()).unwrap_or(Aabb::new(Vec3::splat(-1.0), Vec3::splat(1.0))),
                GridConfig::CoverScene { .. } => Aabb::new(Vec3::splat(-1.0), Vec3::splat(1.0)),
            },
        }
    }

    fn finish_grid(&self, grid: &CoarseSdfGrid, out: &Outputs) -> Result<(), PipelineError> {
        if self.config.write_grid_snapshot {
            grid.write_snapshot(&out.dir.join(GRID_SNAPSHOT_FILE))?;
        }
        Ok(())
    }

    fn finish(mut self, out: &mut Outputs, wall_clock: f64) -> Result<RunSummary, PipelineError> {
        out.loss.flush().map_err(io_err(&out.dir))?;
        let checkpoint = out.dir.join(CHECKPOINT_FILE);
        write_checkpoint(&self.net, &checkpoint)?;
        self.summary.checkpoint = checkpoint;
        let timings = self.timings.means(wall_clock, self.train.epochs_per_update);
        info!(
            "mean stage times: fusion {:.3}s, esdf {:.3}s, coarse sampling {:.3}s, local sampling {:.3}s, \
             training epoch {:.3}s, evaluation {:.3}s; total {:.1}s",
            timings.fusion,
            timings.esdf,
            timings.coarse_sampling,
            timings.local_sampling,
            timings.training_epoch,
            timings.evaluation,
            timings.wall_clock_total
        );
        let write_json = |name: &str, text: String| {
            let path = out.dir.join(name);
            fs::write(&path, text).map_err(io_err(&path))
        };
        write_json(TIMINGS_FILE, serde_json::to_string_pretty(&timings).expect("timings serialize"))?;
        write_json(SUMMARY_FILE, serde_json::to_string_pretty(&self.summary).expect("summary serializes"))?;
        Ok(self.summary)
    }
}

/// Reads query points from `.bin` (little-endian f32 xyz triples, the
/// dataset point format) or text with one `x,y,z` per line. Blank lines,
/// `#` comments and a non-numeric header line are ignored.
pub fn read_points_file(path: &Path) -> Result<Vec<Vec3>, PipelineError> {
    if path.extension().is_some_and(|e| e == "bin") {
        let bytes = fs::read(path).map_err(io_err(path))?;
        return Ok(decode_points(&bytes, path)?);
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        let bad = |reason: String| PipelineError::Parse { path: path.to_path_buf(), reason: format!("line {}: {reason}", n + 1) };
        match parsed {
            Ok(v) if v.len() == 3 => {
                let p = Vec3::new(v[0], v[1], v[2]);
                if !p.is_finite() {
                    return Err(bad("non-finite coordinate".into()));
                }
                points.push(p);
            }
            Ok(v) => return Err(bad(format!("expected 3 values, found {}", v.len()))),
            Err(_) if points.is_empty() && fields.iter().all(|f| f.parse::<f64>().is_err()) => continue,
            Err(e) => return Err(bad(e.to_string())),
        }
    }
    Ok(points)
}

/// Evaluates a checkpoint at every point of `points_path` and writes the
/// results in input order. A `.bin` output holds f32 values (with three
/// gradient components after each value when requested); anything else
/// is CSV. Returns the number of points.
pub fn query(checkpoint: &Path, points_path: &Path, output: &Path, with_gradient: bool) -> Result<usize, PipelineError> {
    let net: SirenNetwork<f32> = read_checkpoint(checkpoint)?;
    let points = read_points_file(points_path)?;
    let rows: Vec<(f64, Option<Vec3>)> = if with_gradient {
        net.values_and_gradients(&points)?.into_iter().map(|(v, g)| (v, Some(g))).collect()
    } else {
        SdfField::values(&net, &points)?.into_iter().map(|v| (v, None)).collect()
    };
    let binary = output.extension().is_some_and(|e| e == "bin");
    let mut w = create(output)?;
    let result: std::io::Result<()> = (|| {
        if binary {
            for (v, g) in &rows {
                w.write_all(&(*v as f32).to_le_bytes())?;
                if let Some(g) = g {
                    for c in g.to_array() {
                        w.write_all(&(c as f32).to_le_bytes())?;
                    }
                }
            }
        } else {
            writeln!(w, "{}", if with_gradient { "sdf,gx,gy,gz" } else { "sdf" })?;
            for (v, g) in &rows {
                match g {
                    Some(g) => writeln!(w, "{v},{},{},{}", g.x, g.y, g.z)?,
                    None => writeln!(w, "{v}")?,
                }
            }
        }
        w.flush()
    })();
    result.map_err(io_err(output))?;
    Ok(points.len())
}
