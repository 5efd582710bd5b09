//! Single-binary command-line interface. Every command reads an optional
//! TOML config plus `key=value` overrides, writes its artifacts under an
//! output directory together with a resolved-config snapshot and the seed it
//! ran with, and logs line-delimited JSON to standard error. Config mistakes
//! exit with code 2, runtime failures with code 1.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use weft::error::WeftError;

mod commands;
mod context;
mod data;
mod requests;

#[derive(Debug, Parser)]
#[command(name = "weft", version, about = "Garment-centric diffusion workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train stage 1 (garment encoder) or stage 2 (try-on control branch).
    Train(TrainArgs),
    /// Garment-conditioned text-to-image generation.
    Generate(GenerateArgs),
    /// Inpainting virtual try-on.
    Tryon(TryonArgs),
    /// Synthesize a paired dataset with the data engine.
    Synthesize(SynthesizeArgs),
    /// Compute metrics over a results manifest and render a report.
    Evaluate(EvaluateArgs),
    /// Re-render a stored evaluation report, optionally attaching a study.
    Report(ReportArgs),
}

/// Flags shared by every command.
#[derive(Debug, Args)]
struct CommonArgs {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Configuration overrides, applied in order (e.g. stage=1 max_steps=10).
    #[arg(long = "overrides", value_name = "KEY=VALUE", num_args = 1..)]
    overrides: Vec<String>,

    /// Seed for this run; each command documents what it drives.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Output directory for the checkpoint, training log, and snapshot.
    #[arg(long, default_value = "out/train")]
    out: PathBuf,

    /// Dataset directory holding a manifest.jsonl (overrides [data]).
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,

    /// Checkpoint to initialize from; required for stage 2.
    #[arg(long, value_name = "CKPT")]
    init: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Output directory for images, responses.jsonl, and snapshot.
    #[arg(long, default_value = "out/generate")]
    out: PathBuf,

    /// Dataset directory holding a manifest.jsonl (overrides [data]).
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,

    /// Trained checkpoint (file, or a train output directory).
    #[arg(long, value_name = "CKPT")]
    checkpoint: Option<PathBuf>,

    /// Batch request file, one JSON request per line.
    #[arg(long, value_name = "JSONL")]
    requests: Option<PathBuf>,

    /// Dataset record to generate from when no request file is given.
    #[arg(long, default_value_t = 0)]
    index: usize,
}

#[derive(Debug, Args)]
struct TryonArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Output directory for images, responses.jsonl, and snapshot.
    #[arg(long, default_value = "out/tryon")]
    out: PathBuf,

    /// Dataset directory holding a manifest.jsonl (overrides [data]).
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,

    /// Trained checkpoint (file, or a train output directory).
    #[arg(long, value_name = "CKPT")]
    checkpoint: Option<PathBuf>,

    /// Batch request file, one JSON request per line.
    #[arg(long, value_name = "JSONL")]
    requests: Option<PathBuf>,

    /// Dataset record to try on when no request file is given.
    #[arg(long, default_value_t = 0)]
    index: usize,

    /// Swap the pose conditioning: none, keypoint_render, or dense_coords.
    #[arg(long, value_name = "KIND")]
    pose_kind: Option<String>,
}

#[derive(Debug, Args)]
struct SynthesizeArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Output directory for PNGs, manifest.jsonl, and snapshot.
    #[arg(long, default_value = "out/synthesize")]
    out: PathBuf,

    /// Number of source images to run the engine over (default: data.size).
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Results manifest: one JSON line per generated image, keys
    /// {method, image, reference, mask?, garment?}, paths relative to the
    /// manifest.
    #[arg(long, value_name = "JSONL")]
    manifest: PathBuf,

    /// Report destination: a directory (all formats) or a .md/.csv/.json
    /// file (that format only).
    #[arg(long, default_value = "out/evaluate")]
    out: PathBuf,

    /// Output format: markdown, csv, or json (default: from --out).
    #[arg(long)]
    format: Option<String>,

    /// Human study responses, one JSON line per ranking.
    #[arg(long, value_name = "JSONL")]
    study: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Stored evaluation report (the report.json an evaluate run wrote).
    #[arg(long, value_name = "JSON")]
    report: PathBuf,

    /// Report destination: a directory (all formats) or a .md/.csv/.json
    /// file (that format only).
    #[arg(long, default_value = "out/report")]
    out: PathBuf,

    /// Output format: markdown, csv, or json (default: from --out).
    #[arg(long)]
    format: Option<String>,

    /// Human study responses to attach, one JSON line per ranking.
    #[arg(long, value_name = "JSONL")]
    study: Option<PathBuf>,
}

fn exit_code_for(err: &WeftError) -> u8 {
    match err {
        WeftError::Config(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => commands::train(args),
        Command::Generate(args) => commands::generate(args),
        Command::Tryon(args) => commands::tryon(args),
        Command::Synthesize(args) => commands::synthesize(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::Report(args) => commands::report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code_for(&err);
            context::log_event(serde_json::json!({
                "event": "error",
                "error": err.to_string(),
                "exit": code,
            }));
            ExitCode::from(code)
        }
    }
}
