//! `layerbench`: capture-to-report driver for multi-layer flow benchmarks.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "layerbench", version, about = "Multi-layer optical flow ground truth and evaluation")]
struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; output does not depend on this.
    #[arg(long, global = true, env = "LAYERBENCH_THREADS")]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Calibrate one or two cameras from chessboard observations.
    Calibrate(CalibrateArgs),
    /// Compute rectifying rotations for a calibrated rig.
    Rectify(RectifyArgs),
    /// Turn tag detections into labeled multi-layer annotations.
    Annotate(AnnotateArgs),
    /// Sample a randomized variant of a base scene.
    Randomize(RandomizeArgs),
    /// Render multi-layer ground truth (and optionally images) of a scene.
    Render(RenderArgs),
    /// Noisy ground-truth predictor, for pipeline self-tests.
    PredictOracle(PredictOracleArgs),
    /// Classical coarse-to-fine block-matching flow between two images.
    PredictBlockmatch(BlockmatchArgs),
    /// Remove duplicate layers from a multi-layer prediction.
    Prune(PruneArgs),
    /// Score predictions against annotations.
    Evaluate(EvaluateArgs),
    /// Re-render a saved evaluation report.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Chessboard observations, JSON Lines.
    #[arg(long)]
    obs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also solve for the left→right transform.
    #[arg(long, requires = "image_size")]
    stereo: bool,
    /// Sensor size `WxH`, stored in the rig.
    #[arg(long, value_parser = parse_size)]
    image_size: Option<(u32, u32)>,
}

#[derive(Debug, Args)]
struct RectifyArgs {
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AnnotateArgs {
    /// Tag detections, JSON Lines.
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    /// Per-tag material and layer labels, JSON.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the output file stem.
    #[arg(long)]
    scene_id: Option<String>,
    /// Rectified y-disparity threshold, pixels.
    #[arg(long, default_value_t = 0.75)]
    gate: f64,
    /// Resample the annotations by this factor (e.g. 0.5 for 540×960).
    #[arg(long)]
    scale: Option<f64>,
}

#[derive(Debug, Args)]
struct RandomizeArgs {
    #[arg(long)]
    base: PathBuf,
    /// Randomization ranges, JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Output resolution `WxH`; defaults to the scene's own.
    #[arg(long, value_parser = parse_size)]
    size: Option<(u32, u32)>,
    #[arg(long)]
    out: PathBuf,
    /// Shaded T0 image.
    #[arg(long)]
    rgb: Option<PathBuf>,
    /// Shaded T1 image.
    #[arg(long)]
    rgb_t1: Option<PathBuf>,
    /// Per-pixel annotations in the evaluation format.
    #[arg(long)]
    ann: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictOracleArgs {
    #[arg(long)]
    gt: PathBuf,
    /// Gaussian noise per flow component, pixels.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = layerbench_core::prediction::DEFAULT_LAYERS)]
    layers: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BlockmatchArgs {
    #[arg(long)]
    img0: PathBuf,
    #[arg(long)]
    img1: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    window_radius: u32,
    #[arg(long, default_value_t = 3)]
    levels: u32,
}

#[derive(Debug, Args)]
struct PruneArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = layerbench_core::prediction::DEFAULT_PRUNE_DELTA)]
    delta: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Workaround {
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SamplingArg {
    Bilinear,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SubsetArg {
    First,
    Last,
    All,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Directory of `*.ann` annotation files.
    #[arg(long)]
    ann: PathBuf,
    /// Directory of `<scene>.mlfl` predictions matching the annotation stems.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, default_value = "1,3,5,inf")]
    taus: String,
    #[arg(long, value_enum, default_value = "all")]
    subset: SubsetArg,
    /// Replicate the first predicted layer onto every annotated layer.
    #[arg(long, value_enum)]
    workaround: Option<Workaround>,
    #[arg(long, value_enum, default_value = "bilinear")]
    sampling: SamplingArg,
    /// Where report.csv, report.txt and report.json go.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Text,
    Csv,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// A report.json written by `evaluate`.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: ReportFormat,
    /// Defaults to standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let dim = |v: &str| v.trim().parse::<u32>().ok().filter(|&v| v > 0).ok_or_else(|| format!("bad dimension {v:?}"));
    Ok((dim(w)?, dim(h)?))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).format_timestamp(None).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().expect("thread pool is configured once");
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(1)
        }
    }
}
