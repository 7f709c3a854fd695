// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use facetsteer_cli::{run, Command, Overrides, EXIT_OK};

/// Facet control vectors: corpus, SAE, training, steering, routing and evaluation.
///
/// Every command reads the same JSON config (see configs/demo.json) and works
/// inside its `output_dir`. External scorer and judge clients take their
/// bearer token from FACETSTEER_API_KEY.
///
/// Exit codes: 0 success, 1 stage failure, 2 usage or config error. Errors
/// are reported as a JSON object on stderr.
#[derive(Parser)]
#[command(name = "facetsteer", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Pipeline config (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Replace the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace output_dir.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write corpus.jsonl (synthetic, or normalized from corpus.input)
    CorpusGen(Common),
    /// Structural checks and the 30-way leakage classifier
    CorpusValidate(Common),
    /// Write activations.fsta (planted synthesis, or copied from activations.input)
    ActsSynth(Common),
    /// Train the sparse autoencoder
    SaeTrain(Common),
    /// Select steering latents per facet
    MaskBuild(Common),
    /// Train control vectors and run the contrastive ablation
    CvTrain(Common),
    /// Verify vectors against the SAE and bundle the decoded directions
    CvExport(Common),
    /// Mean-difference baseline vectors
    Caa(Common),
    /// Inject vectors into the toy residual model
    Steer(Common),
    /// Strength sweep on the aligned toy model
    Sweep(Common),
    /// Score queries and compose injection plans
    Route(Common),
    /// Judge responses and compute FA, MSE, MAE and MTR
    Eval(Common),
    /// Run every stage in order
    Pipeline(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Cmd::CorpusGen(c) => (Command::CorpusGen, c),
        Cmd::CorpusValidate(c) => (Command::CorpusValidate, c),
        Cmd::ActsSynth(c) => (Command::ActsSynth, c),
        Cmd::SaeTrain(c) => (Command::SaeTrain, c),
        Cmd::MaskBuild(c) => (Command::MaskBuild, c),
        Cmd::CvTrain(c) => (Command::CvTrain, c),
        Cmd::CvExport(c) => (Command::CvExport, c),
        Cmd::Caa(c) => (Command::Caa, c),
        Cmd::Steer(c) => (Command::Steer, c),
        Cmd::Sweep(c) => (Command::Sweep, c),
        Cmd::Route(c) => (Command::Route, c),
        Cmd::Eval(c) => (Command::Eval, c),
        Cmd::Pipeline(c) => (Command::Pipeline, c),
    };
    let overrides = Overrides {
        seed: common.seed,
        output_dir: common.output_dir,
    };
    match run(command, &common.config, &overrides) {
        Ok(m) => {
            println!(
                "{}",
                serde_json::json!({"status": "ok", "command": m.command, "artifacts": m.artifacts.len()})
            );
            ExitCode::from(EXIT_OK as u8)
        }
        Err(e) => {
            eprintln!("{}", e.report());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
