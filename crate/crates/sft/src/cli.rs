//! Command-line pipeline: generate synthetic bundles, fit the template
//! net, reconstruct sequences with either method, evaluate tracking error,
//! and sweep the loss weights.
//!
//! Exit codes: 0 ok, 2 parse error, 3 shape mismatch, 4 solver failure,
//! 5 divergence, 6 file not found, 1 anything else. Failures also emit a
//! one-line JSON error record on standard error.
//!
//! `results.jsonl` is byte-stable across reruns with the same seed, so all
//! wall-clock timing goes to a `*.timing.json` sidecar instead.

use crate::classical::{self, ClassicalError};
use crate::eval::{self, EvalError};
use crate::geom::{self, CameraIntrinsics, MatchSet, TriMesh};
use crate::solver::{self, Config, FrameSolution, SolverError, TemplateFit};
use crate::synth::{self, DeformKind, GenParams, MatchMode, SynthError};
use clap::{Args, Parser, Subcommand};
use nalgebra::Point3;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Shape(#[from] EvalError),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("divergence: {0}")]
    Diverged(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } => 2,
            CliError::Shape(_) => 3,
            CliError::Solver(_) => 4,
            CliError::Diverged(_) => 5,
            CliError::FileNotFound(_) => 6,
            CliError::Other(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Parse { .. } => "parse",
            CliError::Shape(_) => "shape_mismatch",
            CliError::Solver(_) => "solver_failure",
            CliError::Diverged(_) => "divergence",
            CliError::FileNotFound(_) => "file_not_found",
            CliError::Other(_) => "other",
        }
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        CliError::Solver(e.to_string())
    }
}

impl From<ClassicalError> for CliError {
    fn from(e: ClassicalError) -> Self {
        match e {
            ClassicalError::Diverged { .. } => CliError::Diverged(e.to_string()),
            other => CliError::Solver(other.to_string()),
        }
    }
}

impl From<geom::GeomError> for CliError {
    fn from(e: geom::GeomError) -> Self {
        CliError::Solver(e.to_string())
    }
}

fn synth_error(e: SynthError, path: &Path) -> CliError {
    match e {
        SynthError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            CliError::FileNotFound(path.to_path_buf())
        }
        SynthError::Io(io) => CliError::Other(io.to_string()),
        SynthError::Json(j) => CliError::Parse { path: path.to_path_buf(), message: j.to_string() },
        other => CliError::Other(other.to_string()),
    }
}

#[derive(Debug, Parser)]
#[command(name = "sft", about = "Template-based deformable surface reconstruction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "cylinder_roll")]
    pub model: String,
    #[arg(long, default_value_t = 30)]
    pub frames: usize,
    #[arg(long = "noise-px", default_value_t = 0.0)]
    pub noise_px: f64,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8.0)]
    pub width: f64,
    #[arg(long, default_value_t = 6.0)]
    pub height: f64,
    #[arg(long, default_value_t = 13)]
    pub nx: usize,
    #[arg(long, default_value_t = 10)]
    pub ny: usize,
    /// "facet" (random barycentric samples) or "vertex"
    #[arg(long = "match-mode", default_value = "facet")]
    pub match_mode: String,
    #[arg(long = "per-facet", default_value_t = 1)]
    pub per_facet: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic ground-truth bundle.
    Synth(SynthArgs),
    /// Overfit the surface net to the flat template, write a checkpoint.
    FitTemplate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path (default: BUNDLE/checkpoint.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct every frame of a bundle.
    Reconstruct {
        #[arg(long)]
        bundle: PathBuf,
        /// "neural" or "classical"
        #[arg(long, default_value = "neural")]
        method: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Reuse a template-fit checkpoint instead of refitting (neural only).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score results against the bundle's ground truth (mean tracking error).
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid-search the loss weights; one neural reconstruction per cell.
    Sweep {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated lambda_metric values (default: the built-in grid).
        #[arg(long = "grid-metric")]
        grid_metric: Option<String>,
        /// Comma-separated lambda_time values (default: the built-in grid).
        #[arg(long = "grid-time")]
        grid_time: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// One line of results.jsonl.
#[derive(Debug, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub method: String,
    pub vertices: Vec<[f64; 3]>,
    pub projection: f64,
    pub metric: f64,
    pub time: f64,
    pub total: f64,
    pub iterations: usize,
    pub failed: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TimingRecord {
    pub method: String,
    pub total_seconds: f64,
    pub seconds_per_frame: f64,
}

/// Tracking-error report plus per-method timing read from the sidecar.
#[derive(Debug, Serialize, Deserialize)]
pub struct Report {
    pub method: String,
    #[serde(flatten)]
    pub eval: eval::EvalReport,
    pub seconds_per_frame: Option<f64>,
}

fn read_to_string(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::FileNotFound(path.to_path_buf())
        } else {
            CliError::Other(e.to_string())
        }
    })
}

fn parse_json<T: for<'a> Deserialize<'a>>(text: &str, path: &Path) -> Result<T, CliError> {
    serde_json::from_str(text)
        .map_err(|e| CliError::Parse { path: path.to_path_buf(), message: e.to_string() })
}

fn load_config(path: &Option<PathBuf>) -> Result<Config, CliError> {
    match path {
        None => Ok(Config::default()),
        Some(p) => parse_json(&read_to_string(p)?, p),
    }
}

fn load_bundle(dir: &Path) -> Result<synth::SyntheticSequence, CliError> {
    synth::read_bundle(dir).map_err(|e| synth_error(e, dir))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Other(e.to_string()))
}

pub fn write_results(path: &Path, records: &[FrameRecord]) -> Result<(), CliError> {
    let mut out = String::new();
    for rec in records {
        out.push_str(
            &serde_json::to_string(rec).map_err(|e| CliError::Other(e.to_string()))?,
        );
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn read_results(path: &Path) -> Result<Vec<FrameRecord>, CliError> {
    let text = read_to_string(path)?;
    text.lines().map(|line| parse_json(line, path)).collect()
}

fn timing_path(results: &Path) -> PathBuf {
    let mut name = results.file_name().unwrap_or_default().to_os_string();
    name.push(".timing.json");
    results.with_file_name(name)
}

fn estimates_of(records: &[FrameRecord]) -> Vec<Vec<Point3<f64>>> {
    records
        .iter()
        .map(|r| r.vertices.iter().map(|v| Point3::new(v[0], v[1], v[2])).collect())
        .collect()
}

fn neural_records(solutions: &[FrameSolution]) -> Vec<FrameRecord> {
    solutions
        .iter()
        .enumerate()
        .map(|(t, s)| FrameRecord {
            frame: t,
            method: "neural".into(),
            vertices: s.vertex_estimates.iter().map(|v| [v.x, v.y, v.z]).collect(),
            projection: s.losses.projection,
            metric: s.losses.metric,
            time: s.losses.time,
            total: s.losses.total,
            iterations: s.iterations,
            failed: s.failed,
        })
        .collect()
}

/// Mean pixel distance between projected match points and observed pixels.
fn mean_reprojection_px(
    k: &CameraIntrinsics,
    template: &TriMesh,
    vertices: &[Point3<f64>],
    matches: &MatchSet,
) -> Result<f64, CliError> {
    let mut sum = 0.0;
    for m in matches {
        let p = geom::barycentric_embed_in(vertices, template.faces[m.facet], m.bary);
        let px = geom::project(k, &p)?;
        sum += (px.coords - nalgebra::Vector2::new(m.pixel[0], m.pixel[1])).norm();
    }
    Ok(sum / matches.len().max(1) as f64)
}

pub fn reconstruct_classical(
    seq: &synth::SyntheticSequence,
    config: &Config,
) -> Result<Vec<FrameRecord>, CliError> {
    let mut x = classical::stack_vertices(&seq.template.vertices);
    let mut records = Vec::with_capacity(seq.matches.len());
    for (t, matches) in seq.matches.iter().enumerate() {
        let system = classical::build_projection_matrix(&seq.camera, &seq.template, matches)
            .map_err(CliError::from)?;
        let (x_next, diags) =
            classical::solve_frame_classical(&x, &system, &seq.template, config)?;
        x = x_next;
        let vertices = classical::unstack_vertices(&x);
        let projection = mean_reprojection_px(&seq.camera, &seq.template, &vertices, matches)?;
        records.push(FrameRecord {
            frame: t,
            method: "classical".into(),
            vertices: vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
            projection,
            metric: diags.c_inf,
            time: 0.0,
            total: projection,
            iterations: diags.outer_iterations,
            failed: false,
        });
    }
    Ok(records)
}

fn fit_or_load_template(
    seq: &synth::SyntheticSequence,
    config: &Config,
    checkpoint: &Option<PathBuf>,
) -> Result<TemplateFit, CliError> {
    match checkpoint {
        Some(p) => {
            let ck: solver::Checkpoint = parse_json(&read_to_string(p)?, p)?;
            Ok(ck.into_fit())
        }
        None => Ok(solver::fit_template(&seq.template, config)?),
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(args) => run_synth(&args),
        Command::FitTemplate { bundle, config, out } => {
            let seq = load_bundle(&bundle)?;
            let config = load_config(&config)?;
            let fit = solver::fit_template(&seq.template, &config)?;
            let ck = solver::Checkpoint::from_fit(&fit, config.seed);
            let path = out.unwrap_or_else(|| bundle.join("checkpoint.json"));
            let text = serde_json::to_string(&ck).map_err(|e| CliError::Other(e.to_string()))?;
            write_file(&path, &text)?;
            println!("template fit error {:.6e}, checkpoint {}", fit.fit_error, path.display());
            Ok(())
        }
        Command::Reconstruct { bundle, method, config, checkpoint, out } => {
            let seq = load_bundle(&bundle)?;
            let config = load_config(&config)?;
            let start = std::time::Instant::now();
            let records = match method.as_str() {
                "neural" => {
                    let fit = fit_or_load_template(&seq, &config, &checkpoint)?;
                    let solutions = solver::reconstruct_sequence(
                        &fit,
                        &seq.camera,
                        &seq.matches,
                        &config.weights(),
                        &config,
                    )?;
                    neural_records(&solutions)
                }
                "classical" => reconstruct_classical(&seq, &config)?,
                other => {
                    return Err(CliError::Parse {
                        path: PathBuf::from("--method"),
                        message: format!("unknown method {other:?}"),
                    })
                }
            };
            let total = start.elapsed().as_secs_f64();
            write_results(&out, &records)?;
            let timing = TimingRecord {
                method,
                total_seconds: total,
                seconds_per_frame: total / records.len().max(1) as f64,
            };
            let text =
                serde_json::to_string_pretty(&timing).map_err(|e| CliError::Other(e.to_string()))?;
            write_file(&timing_path(&out), &text)?;
            println!(
                "reconstructed {} frames ({:.2} s/frame) -> {}",
                records.len(),
                timing.seconds_per_frame,
                out.display()
            );
            Ok(())
        }
        Command::Eval { bundle, results, out } => {
            let seq = load_bundle(&bundle)?;
            let records = read_results(&results)?;
            let report = evaluate_records(&seq, &records)?;
            let text =
                serde_json::to_string_pretty(&report).map_err(|e| CliError::Other(e.to_string()))?;
            write_file(&out, &text)?;
            println!("mean tracking error {:.6}", report.eval.sequence_mean);
            Ok(())
        }
        Command::Sweep { bundle, config, grid_metric, grid_time, out } => {
            let seq = load_bundle(&bundle)?;
            let config = load_config(&config)?;
            let gm = parse_grid(&grid_metric)?;
            let gt = parse_grid(&grid_time)?;
            let rows = sweep_lambdas(&seq, &config, &gm, &gt)?;
            let mut csv = String::from("lambda_metric,lambda_time,error\n");
            for (lm, lt, e) in &rows {
                csv.push_str(&format!("{lm},{lt},{e}\n"));
            }
            write_file(&out, &csv)?;
            println!("{} sweep rows -> {}", rows.len(), out.display());
            Ok(())
        }
    }
}

fn run_synth(args: &SynthArgs) -> Result<(), CliError> {
    let kind: DeformKind = args.model.parse().map_err(|e: String| CliError::Parse {
        path: PathBuf::from("--model"),
        message: e,
    })?;
    let match_mode = match args.match_mode.as_str() {
        "facet" => MatchMode::Facet,
        "vertex" => MatchMode::Vertex,
        other => {
            return Err(CliError::Parse {
                path: PathBuf::from("--match-mode"),
                message: format!("unknown match mode {other:?}"),
            })
        }
    };
    let params = GenParams {
        kind,
        n_frames: args.frames,
        width: args.width,
        height: args.height,
        nx: args.nx,
        ny: args.ny,
        match_mode,
        per_facet: args.per_facet,
        noise_px: args.noise_px,
        dropout: args.dropout,
        seed: args.seed,
    };
    let seq = synth::generate(&params).map_err(|e| CliError::Other(e.to_string()))?;
    synth::write_bundle(&seq, &args.out).map_err(|e| synth_error(e, &args.out))?;
    println!(
        "wrote {} frames, {} matches/frame -> {}",
        seq.frames.len(),
        seq.matches.first().map_or(0, |m| m.len()),
        args.out.display()
    );
    Ok(())
}

pub fn evaluate_records(
    seq: &synth::SyntheticSequence,
    records: &[FrameRecord],
) -> Result<Report, CliError> {
    let estimates = estimates_of(records);
    let report = eval::evaluate(&estimates, &seq.frames)?;
    let method = records.first().map_or("unknown".into(), |r| r.method.clone());
    Ok(Report { method, eval: report, seconds_per_frame: None })
}

fn parse_grid(arg: &Option<String>) -> Result<Vec<f64>, CliError> {
    let values = match arg {
        None => solver::lambda_grid_default(),
        Some(text) => text
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim().parse::<f64>().map_err(|e| CliError::Parse {
                    path: PathBuf::from("--grid"),
                    message: format!("bad grid value {s:?}: {e}"),
                })
            })
            .collect::<Result<Vec<f64>, _>>()?,
    };
    if values.is_empty() {
        return Err(CliError::Parse {
            path: PathBuf::from("--grid"),
            message: "empty grid".into(),
        });
    }
    Ok(values)
}

/// One neural reconstruction per (lambda_metric, lambda_time) cell, scored
/// with the mean tracking error; rows sorted by the lambdas. The template fit is shared: it
/// does not depend on the loss weights.
pub fn sweep_lambdas(
    seq: &synth::SyntheticSequence,
    config: &Config,
    grid_metric: &[f64],
    grid_time: &[f64],
) -> Result<Vec<(f64, f64, f64)>, CliError> {
    if grid_metric.is_empty() || grid_time.is_empty() {
        return Err(CliError::Parse {
            path: PathBuf::from("--grid"),
            message: "empty grid".into(),
        });
    }
    let fit = solver::fit_template(&seq.template, config)?;
    let mut rows = Vec::with_capacity(grid_metric.len() * grid_time.len());
    for &lm in grid_metric {
        for &lt in grid_time {
            let weights = solver::LossWeights { lambda_metric: lm, lambda_time: lt };
            let solutions =
                solver::reconstruct_sequence(&fit, &seq.camera, &seq.matches, &weights, config)?;
            let estimates: Vec<Vec<Point3<f64>>> =
                solutions.iter().map(|s| s.vertex_estimates.clone()).collect();
            let report = eval::evaluate(&estimates, &seq.frames)?;
            rows.push((lm, lt, report.sequence_mean));
        }
    }
    rows.sort_by(|a, b| (a.0, a.1).partial_cmp(&(b.0, b.1)).unwrap());
    Ok(rows)
}

/// Entry point used by the binary: parse, run, and on failure emit a JSON
/// error record on stderr and the mapped exit code.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let record = serde_json::json!({
                "error": e.kind(),
                "message": e.to_string(),
            });
            let mut stderr = std::io::stderr().lock();
            let _ = writeln!(stderr, "{record}");
            e.exit_code()
        }
    }
}
