use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use sdfmap::coarse_grid::CoarseSdfGrid;
use sdfmap::eval::{evaluate, export_slice, mean_abs_error, sample_eval_points, GridField};
use sdfmap::geometry::{Aabb, Scene, Vec3};
use sdfmap::pipeline::{
    self, FrameRange, PipelineConfig, PipelineError, SimulationSpec, CHECKPOINT_FILE, GRID_SNAPSHOT_FILE,
};
use sdfmap::siren::{read_checkpoint, SirenNetwork};

/// Incremental neural signed distance field mapping.
#[derive(Parser)]
#[command(name = "sdfmap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run or report directory; file stem for `slice`, output file for `query`.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a simulated dataset described by `--config`.
    Simulate,
    /// Run the incremental mapping pipeline.
    Run(RunArgs),
    /// Re-evaluate a checkpoint against the ground-truth scene.
    Eval(EvalArgs),
    /// Export a horizontal SDF slice of a checkpoint as CSV and PGM.
    Slice(SliceArgs),
    /// Evaluate a checkpoint at the points of a file.
    Query(QueryArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Dataset positions to process, `A..B`.
    #[arg(long)]
    frames: Option<FrameRange>,
    /// Train on coarse-grid samples only.
    #[arg(long)]
    no_local: bool,
    /// Train on local samples only.
    #[arg(long)]
    no_coarse: bool,
    /// Overlap grid fusion with network training.
    #[arg(long)]
    pipelined: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Network checkpoint; the run's final checkpoint if omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Grid snapshot whose observed voxels define the evaluation region.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Ground-truth scene; the config's scene if omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 25_000)]
    n_points: usize,
    /// Sensor position for the local metric, `x,y,z`; grid center if omitted.
    #[arg(long, value_parser = parse_vec3)]
    sensor_origin: Option<Vec3>,
}

#[derive(Args)]
struct SliceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Slice height, meters.
    #[arg(long)]
    z: f64,
    /// Cell size, meters.
    #[arg(long, default_value_t = 0.05)]
    resolution: f64,
    /// Slice extent from a scene file's bounds.
    #[arg(long, conflicts_with = "bounds")]
    scene: Option<PathBuf>,
    /// Slice extent `xmin,ymin,xmax,ymax`.
    #[arg(long)]
    bounds: Option<String>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// `.bin` (f32 xyz) or CSV points file.
    #[arg(long)]
    points: PathBuf,
    /// Also output the spatial gradient.
    #[arg(long)]
    gradient: bool,
}

fn parse_vec3(s: &str) -> Result<Vec3, String> {
    let v: Vec<f64> = s.split(',').map(|t| t.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    match v.as_slice() {
        [x, y, z] => Ok(Vec3::new(*x, *y, *z)),
        _ => Err(format!("expected x,y,z, got {s:?}")),
    }
}

fn required<'a>(value: Option<&'a PathBuf>, what: &str) -> Result<&'a PathBuf, PipelineError> {
    value.ok_or_else(|| PipelineError::Config(format!("{what} is required")))
}

fn cmd_simulate(cli: &Cli) -> Result<ExitCode, PipelineError> {
    let config = required(cli.config.as_ref(), "--config")?;
    let text = std::fs::read_to_string(config).map_err(|source| PipelineError::Io { path: config.clone(), source })?;
    let mut spec: SimulationSpec = serde_json::from_str(&text)
        .map_err(|e| PipelineError::Parse { path: config.clone(), reason: e.to_string() })?;
    if spec.scene.is_relative() {
        spec.scene = config.parent().unwrap_or(Path::new(".")).join(&spec.scene);
    }
    let out = required(cli.output.as_ref(), "--output")?;
    let manifest = pipeline::simulate(&spec, out, cli.seed.unwrap_or(0))?;
    println!("{}", manifest.display());
    Ok(ExitCode::SUCCESS)
}

fn load_run_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut config = PipelineConfig::load(required(cli.config.as_ref(), "--config")?)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.output {
        config.output_dir = out.clone();
    }
    Ok(config)
}

fn cmd_run(cli: &Cli, args: &RunArgs) -> Result<ExitCode, PipelineError> {
    let mut config = load_run_config(cli)?;
    if args.frames.is_some() {
        config.frames = args.frames;
    }
    if args.no_local {
        config.use_local = false;
    }
    if args.no_coarse {
        config.use_coarse = false;
    }
    if args.pipelined {
        config.pipelined = true;
    }
    let summary = pipeline::run(&config)?;
    println!(
        "processed {}/{} frames, {} skipped; checkpoint {}",
        summary.frames_processed,
        summary.frames_total,
        summary.skipped.len(),
        summary.checkpoint.display()
    );
    if let Some(r) = summary.reports.last() {
        println!("{}", r.to_json());
    }
    Ok(if summary.skipped.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<ExitCode, PipelineError> {
    // `--output` names the report directory here, not the run directory.
    let config = cli.config.as_deref().map(PipelineConfig::load).transpose()?;
    let from_run = |name: &str| config.as_ref().map(|c| c.output_dir.join(name));
    let checkpoint = args.checkpoint.clone().or_else(|| from_run(CHECKPOINT_FILE));
    let grid_path = args.grid.clone().or_else(|| from_run(GRID_SNAPSHOT_FILE));
    let scene_path = args.scene.clone().or_else(|| config.as_ref().and_then(|c| c.scene_path().map(Path::to_path_buf)));

    let net: SirenNetwork<f32> = read_checkpoint(required(checkpoint.as_ref(), "--checkpoint")?)?;
    let grid = CoarseSdfGrid::read_snapshot(required(grid_path.as_ref(), "--grid")?)?;
    let scene = Scene::load(required(scene_path.as_ref(), "--scene")?)?;
    let seed = cli.seed.or(config.as_ref().map(|c| c.seed)).unwrap_or(0);
    let points = sample_eval_points(&grid, args.n_points, seed)?;
    let bounds = grid.bounds();
    let origin = args.sensor_origin.unwrap_or((bounds.min + bounds.max) * 0.5);
    let mut report = evaluate(&net, &scene, &points, origin, 0)?;
    report.grid_sdf_mae = Some(mean_abs_error(&GridField(&grid), &scene, &points)?);
    let json = report.to_json();
    if let Some(out) = &cli.output {
        std::fs::create_dir_all(out).map_err(|source| PipelineError::Io { path: out.clone(), source })?;
        let path = out.join("eval_report.json");
        std::fs::write(&path, &json).map_err(|source| PipelineError::Io { path, source })?;
    }
    println!("{json}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_slice(cli: &Cli, args: &SliceArgs) -> Result<ExitCode, PipelineError> {
    let net: SirenNetwork<f32> = read_checkpoint(&args.checkpoint)?;
    let bounds = match (&args.scene, &args.bounds) {
        (Some(scene), _) => Scene::load(scene)?.bounds,
        (None, Some(b)) => {
            let v: Vec<f64> = b
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| PipelineError::Config(format!("--bounds: {e}")))?;
            let [x0, y0, x1, y1] = v[..] else {
                return Err(PipelineError::Config("--bounds expects xmin,ymin,xmax,ymax".into()));
            };
            Aabb::new(Vec3::new(x0, y0, args.z), Vec3::new(x1, y1, args.z + 1.0))
        }
        (None, None) => return Err(PipelineError::Config("--scene or --bounds is required".into())),
    };
    let stem = required(cli.output.as_ref(), "--output")?;
    let slice = export_slice(&net, args.z, &bounds, args.resolution, stem)?;
    println!("{}x{} slice written to {}.{{csv,pgm}}", slice.nx, slice.ny, stem.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_query(cli: &Cli, args: &QueryArgs) -> Result<ExitCode, PipelineError> {
    let out = required(cli.output.as_ref(), "--output")?;
    let n = pipeline::query(&args.checkpoint, &args.points, out, args.gradient)?;
    println!("{n} points evaluated");
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate => cmd_simulate(&cli),
        Command::Run(args) => cmd_run(&cli, args),
        Command::Eval(args) => cmd_eval(&cli, args),
        Command::Slice(args) => cmd_slice(&cli, args),
        Command::Query(args) => cmd_query(&cli, args),
    };
    result.unwrap_or_else(|e| {
        error!("{e}");
        eprintln!("error: {e}");
        ExitCode::from(1)
    })
}
