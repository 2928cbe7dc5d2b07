//! `heatdet` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error.
//! Errors are reported on stderr as a single JSON object.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "heatdet", version, about = "Heatmap-based NMS-free object detection toolkit")]
struct Cli {
    /// Seed for all random draws [default: 0]
    #[arg(long, global = true, env = "HEATDET_SEED")]
    seed: Option<u64>,

    /// Cap on worker threads; 1 runs everything on the calling thread
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Run manifest path [default: next to the main output, else stderr]
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Cut large images into overlapping tiles and remap annotations
    Tile(TileArgs),
    /// Per-class instance counts, fractions and alpha weights
    Stats(StatsArgs),
    /// Rename classes through a mapping table, dropping unmapped ones
    MapClasses(MapClassesArgs),
    /// Generate a synthetic dataset of shapes on noisy backgrounds
    Synth(SynthArgs),
    /// Render heat/size/offset targets and dump heat channels as PGM
    RenderTargets(RenderTargetsArgs),
    /// Per-image difficulty scores of a checkpoint, as CSV
    Difficulty(DifficultyArgs),
    /// Train the toy detector with the difficulty-weighted loss
    TrainToy(TrainToyArgs),
    /// Decode detections from heatmap peaks, as JSONL
    Detect(DetectArgs),
    /// Precision, recall, F1, AP and mAP of detections against ground truth
    Evaluate(EvaluateArgs),
    /// Compare autodiff gradients with central differences
    GradCheck(GradCheckArgs),
    /// Time peak decoding against greedy IoU-NMS on synthetic inputs
    BenchDecode(BenchDecodeArgs),
}

#[derive(Args, Debug, Serialize)]
struct TileArgs {
    /// Tile side in pixels
    #[arg(long, default_value_t = 1024)]
    tile: u32,
    /// Overlap between neighbouring tiles in pixels
    #[arg(long, default_value_t = 200)]
    overlap: u32,
    /// Minimum fraction of a cut box's area that must fall inside a tile
    #[arg(long, default_value_t = 0.5)]
    keep: f64,
    /// Write the annotations that landed in no tile to this JSON file
    #[arg(long)]
    dropped: Option<PathBuf>,
    /// Input ODJSON
    input: PathBuf,
    /// Output ODJSON
    output: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Fixture {
    /// The eleven DOTA classes shared with DIOR and their instance counts
    Dota2dior,
}

#[derive(Args, Debug, Serialize)]
struct StatsSource {
    /// Input ODJSON
    input: Option<PathBuf>,
    /// Use a built-in count table instead of a dataset
    #[arg(long, conflicts_with = "input")]
    fixture: Option<Fixture>,
    /// Upper end of the alpha range
    #[arg(long, default_value_t = 0.6)]
    beta: f64,
}

#[derive(Args, Debug, Serialize)]
#[command(args_conflicts_with_subcommands = true)]
struct StatsArgs {
    #[command(flatten)]
    source: StatsSource,
    #[command(subcommand)]
    view: Option<StatsView>,
}

#[derive(Subcommand, Debug, Serialize)]
enum StatsView {
    /// CSV table: class, count, alpha_prime, alpha
    Alpha {
        #[command(flatten)]
        source: StatsSource,
        /// Logarithm base for alpha_prime: e, 2 or 10
        #[arg(long, default_value = "e")]
        log_base: String,
    },
}

#[derive(Args, Debug, Serialize)]
struct MapClassesArgs {
    /// `dota2dior` or a JSON object mapping source to destination names
    #[arg(long, default_value = "dota2dior")]
    table: String,
    input: PathBuf,
    output: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    /// Generator spec JSON [default: the 2-class discs-vs-squares set]
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Image count for the default set
    #[arg(long, default_value_t = 200)]
    num_images: usize,
    /// Output directory (images plus dataset.json)
    outdir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct RenderTargetsArgs {
    /// Input ODJSON
    #[arg(long)]
    data: PathBuf,
    /// Only this image [default: all]
    #[arg(long)]
    image: Option<String>,
    /// Minimum IoU a box shifted within the Gaussian radius keeps
    #[arg(long, default_value_t = 0.5)]
    min_overlap: f64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct DifficultyArgs {
    /// Checkpoint path (with or without extension)
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input ODJSON
    #[arg(long)]
    data: PathBuf,
    /// Output CSV [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct TrainToyArgs {
    /// Output directory for checkpoint, curves and telemetry
    #[arg(long)]
    out: PathBuf,
    /// Train on this ODJSON instead of the synthetic set
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic training images
    #[arg(long, default_value_t = 200)]
    num_images: usize,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.3)]
    lr: f64,
    /// SGD momentum; 0 is plain SGD
    #[arg(long, default_value_t = 0.5)]
    momentum: f64,
    /// Lower bound on the difficulty weight
    #[arg(long, default_value_t = 1e-3)]
    ds_floor: f64,
    /// Focusing exponent
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    /// Upper end of the alpha range
    #[arg(long, default_value_t = 0.6)]
    beta: f64,
    /// Lower bound on each class's alpha weight
    #[arg(long, default_value_t = 0.3)]
    alpha_floor: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda_size: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_off: f64,
    /// Penalty-reduction exponent for negative heat cells
    #[arg(long, default_value_t = 4.0)]
    neg_beta: f64,
    #[arg(long, default_value_t = 0.5)]
    min_overlap: f64,
    #[arg(long, default_value_t = 16)]
    base_channels: usize,
    #[arg(long, default_value_t = 32)]
    head_channels: usize,
    /// Weight init bound multiplier: uniform in ±gain/sqrt(fan_in)
    #[arg(long, default_value_t = heatdet::trainer::TOY_INIT_GAIN)]
    init_gain: f64,
}

#[derive(Args, Debug, Serialize)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input ODJSON
    #[arg(long)]
    data: PathBuf,
    /// Output JSONL [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Proposals kept per image
    #[arg(long, default_value_t = 256)]
    k: usize,
    /// Peaks below this score are ignored
    #[arg(long, default_value_t = 0.01)]
    score_floor: f64,
}

#[derive(Args, Debug, Serialize)]
struct EvaluateArgs {
    /// Ground-truth ODJSON
    #[arg(long)]
    gt: PathBuf,
    /// Detections JSONL
    #[arg(long)]
    dets: PathBuf,
    /// Per-class CSV: class, AP@[0.5:0.95], AP@0.5, P, R, F1
    #[arg(long)]
    out_csv: Option<PathBuf>,
    /// Summary JSON {mAP, mP, mR, mF1} [default: stdout only]
    #[arg(long)]
    out_json: Option<PathBuf>,
    /// PR curves at IoU 0.5 as SVG
    #[arg(long)]
    pr_svg: Option<PathBuf>,
    /// Count classes without ground truth as AP 0 instead of skipping them
    #[arg(long)]
    zero_gt_as_zero: bool,
    /// Score threshold for P, R and F1
    #[arg(long, default_value_t = 0.5)]
    score_threshold: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum TargetArg {
    Conv,
    Maxpool,
    Focal,
    Dwfl,
    Heatmap,
    Csp,
    Spp,
    Pipeline,
}

#[derive(Args, Debug, Serialize)]
struct GradCheckArgs {
    #[arg(long, value_enum)]
    target: TargetArg,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    /// Largest acceptable relative error
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args, Debug, Serialize)]
struct BenchDecodeArgs {
    /// Timed repetitions per point (median reported)
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Largest NMS proposal count
    #[arg(long, default_value_t = 10_000)]
    max_proposals: usize,
    /// Output CSV [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Report `err` on stderr and map it to an exit code.
fn report(err: &anyhow::Error) -> ExitCode {
    let closed_pipe = err.chain().any(|e| {
        e.downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
    });
    if closed_pipe {
        return ExitCode::SUCCESS;
    }
    let usage = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<heatdet::Error>(), Some(heatdet::Error::Config(_))));
    let kind = if usage { "usage" } else { "data" };
    let chain: Vec<String> = err.chain().map(ToString::to_string).collect();
    eprintln!(
        "{}",
        serde_json::json!({ "error": { "kind": kind, "message": err.to_string(), "chain": chain } })
    );
    ExitCode::from(if usage { 1 } else { 2 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            return report(&anyhow::anyhow!("thread pool: {e}"));
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}
