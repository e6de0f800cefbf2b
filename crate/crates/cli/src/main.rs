//! `svcn`: scene synthesis, virtual LiDAR sampling, SVCN training, completion
//! and adaptation from the command line.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or format
//! error, 4 numeric abort (non-finite loss or gradient).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use svcn_core::segmenter::AlignMode;

#[derive(Parser)]
#[command(name = "svcn", version, about = "Sparse voxel completion and canonical-domain label transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled synthetic scenes as PCXL files.
    GenScenes {
        /// Scene spec JSON; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write a sampling pattern: a named toy sensor or the directions of a frame.
    Pattern {
        #[arg(long, conflicts_with = "from_frame", required_unless_present = "from_frame")]
        preset: Option<String>,
        #[arg(long)]
        from_frame: Option<PathBuf>,
        /// Sensor position of `--from-frame`.
        #[arg(long, value_parser = parse_point, default_value = "0,0,0")]
        sensor: [f64; 3],
        #[arg(long)]
        out: PathBuf,
    },
    /// Virtual scan of a scene with a sampling pattern.
    Sample {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        pattern: PathBuf,
        #[arg(long, value_parser = parse_point)]
        sensor: [f64; 3],
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        augment: AugmentArgs,
        /// Treat the scene as already visible from the sensor (skip the occlusion filter).
        #[arg(long)]
        visible: bool,
        /// Write the frame relative to the sensor instead of in scene coordinates.
        #[arg(long)]
        relative: bool,
    },
    /// Sample (incomplete, complete) training pairs from a directory of scenes.
    MakePairs {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        pattern: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        frames_per_scene: usize,
        #[command(flatten)]
        augment: AugmentArgs,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train (or fine-tune) the generation network.
    TrainGen {
        #[command(flatten)]
        train: TrainArgs,
        /// Checkpoint to fine-tune from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        adversarial: bool,
    },
    /// Train (or fine-tune) the refinement network on a frozen generator.
    TrainRefine {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        adversarial: bool,
    },
    /// Train the segmenter on labeled frames, optionally completed first.
    TrainSeg {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, requires = "refine")]
        gen: Option<PathBuf>,
        #[arg(long)]
        refine: Option<PathBuf>,
    },
    /// Complete one frame into a level-0 occupancy grid.
    Complete {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        refine: Option<PathBuf>,
        /// Sensor position; the lattice is anchored there.
        #[arg(long, value_parser = parse_point, default_value = "0,0,0")]
        sensor: [f64; 3],
        #[arg(long)]
        out: PathBuf,
    },
    /// IoU and chamfer distance of a completed grid against a complete scene.
    EvalCompletion {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train a segmenter on source frames and score it on labeled target frames.
    Adapt {
        #[arg(long)]
        source_dir: PathBuf,
        #[arg(long)]
        target_dir: PathBuf,
        /// Directory with `{source,target}_{generation,refinement}.svck` (svcn mode).
        #[arg(long)]
        ckpts: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "svcn")]
        mode: AlignMode,
        /// Adaptation config JSON (segmenter and training settings).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "ring64")]
        source_pattern: String,
        #[arg(long, default_value = "ring32")]
        target_pattern: String,
        /// Where to write the trained segmenter.
        #[arg(long)]
        seg_out: Option<PathBuf>,
    },
    /// Run the whole adaptation experiment and write every artifact.
    Demo {
        #[arg(long, default_value = "demo/config.json")]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct AugmentArgs {
    /// Drop θ bins of the pattern before sampling.
    #[arg(long)]
    augment: bool,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Kept fraction of bins: `p` or a uniform range `lo:hi`.
    #[arg(long, default_value = "0.3:0.7")]
    keep: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Stage config JSON; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_point(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s.split(',').map(|t| t.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| format!("{s:?}: {e}"))?;
    match v[..] {
        [x, y, z] if v.iter().all(|c| c.is_finite()) => Ok([x, y, z]),
        _ => Err(format!("expected three finite numbers x,y,z, got {s:?}")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
