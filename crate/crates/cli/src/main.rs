//! `myops`: synthesize phantom cases, estimate motion, train, segment,
//! evaluate, quantify transmurality and sweep frame proportions.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use myops_core::Error;

#[derive(Parser)]
#[command(name = "myops", version, about = "Joint cine motion and myocardial pathology segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by the commands that run the joint pipeline.
#[derive(Args, Clone, Default)]
pub struct PipelineArgs {
    /// JSON pipeline configuration; unset fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Feature groups, e.g. "I,Phi,L".
    #[arg(long)]
    pub features: Option<String>,
    /// Frame proportion, e.g. "4/6".
    #[arg(long)]
    pub frames: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda1: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda2: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda3: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda4: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom case set.
    Synth {
        /// JSON synthesis configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the field of every frame of a case.
    Motion {
        /// Case manifest.
        #[arg(long)]
        case: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the training split of a case set.
    Train {
        /// Case-set index (caseset.json).
        #[arg(long)]
        cases: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one case with trained parameters.
    Segment {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a segmentation directory against a case's gold labels.
    Evaluate {
        /// Output directory of `segment`.
        #[arg(long)]
        pred: PathBuf,
        /// Case manifest, or the directory holding it.
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Chord transmurality of a scar mask within a myocardium mask.
    Quantify {
        /// 1-channel F32G mask, nonzero = myocardium.
        #[arg(long)]
        myo: PathBuf,
        /// 1-channel F32G mask, nonzero = scar.
        #[arg(long)]
        scar: PathBuf,
        /// Slice level for the segment table: basal, mid or apical.
        #[arg(long, default_value = "mid")]
        level: String,
        /// Angle where segment numbering starts, degrees.
        #[arg(long, default_value_t = 0.0)]
        start_deg: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score one model per frame proportion.
    SweepFrames {
        #[arg(long)]
        cases: PathBuf,
        /// Comma-separated proportions; defaults to 1/6 through 6/6.
        #[arg(long)]
        proportions: Option<String>,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) => 2,
        Error::Diverged { .. } => 4,
        Error::MissingFile(_) => 5,
        Error::Schema { .. } => 6,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { config, seed, out } => commands::synth(config.as_deref(), seed, &out),
        Command::Motion { case, pipeline, out } => commands::motion(&case, &pipeline, &out),
        Command::Train { cases, pipeline, out } => commands::train(&cases, &pipeline, &out),
        Command::Segment {
            case,
            params,
            pipeline,
            out,
        } => commands::segment(&case, &params, &pipeline, &out),
        Command::Evaluate { pred, gold, out } => commands::evaluate(&pred, &gold, &out),
        Command::Quantify {
            myo,
            scar,
            level,
            start_deg,
            out,
        } => commands::quantify(&myo, &scar, &level, start_deg, &out),
        Command::SweepFrames {
            cases,
            proportions,
            pipeline,
            out,
        } => commands::sweep_frames(&cases, proportions.as_deref(), &pipeline, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
