use std::path::PathBuf;
use std::process::ExitCode;

use ccmplan_core::pipeline::{exit_code, run_stage, PipelineConfig, Stage};
use ccmplan_core::Error;
use clap::{Parser, ValueEnum};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    GenData,
    TrainDyn,
    TrainCcm,
    Certify,
    BuildDomain,
    Plan,
    Execute,
    Report,
    /// Every stage in order.
    All,
}

/// Learned-model contraction tubes and tube-aware RRT planning.
///
/// Artifacts go to `out_dir` from the config, placed under `$CCMPLAN_OUT`
/// when that is set. Exit status 2 means an earlier stage's artifact is
/// missing; 3 means certification was refused by the goodness-of-fit test.
#[derive(Debug, Parser)]
#[command(name = "ccmplan", version)]
struct Cli {
    command: Command,
    /// Pipeline configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// `key=value` overrides on dotted config paths.
    overrides: Vec<String>,
}

fn stages(c: Command) -> Vec<Stage> {
    match c {
        Command::GenData => vec![Stage::GenData],
        Command::TrainDyn => vec![Stage::TrainDyn],
        Command::TrainCcm => vec![Stage::TrainCcm],
        Command::Certify => vec![Stage::Certify],
        Command::BuildDomain => vec![Stage::BuildDomain],
        Command::Plan => vec![Stage::Plan],
        Command::Execute => vec![Stage::Execute],
        Command::Report => vec![Stage::Report],
        Command::All => Stage::ALL.to_vec(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match PipelineConfig::load(&cli.config, &cli.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let root = match std::env::var_os("CCMPLAN_OUT") {
        Some(base) => PathBuf::from(base).join(&cfg.out_dir),
        None => cfg.out_dir.clone(),
    };
    for stage in stages(cli.command) {
        match run_stage(stage, &cfg, &root) {
            Ok(rec) => {
                let prob = rec.overall_probability.map_or("n/a".to_string(), |p| format!("{p:.4}"));
                println!(
                    "{stage}: ok (seed {}, config {}, certified probability {prob})",
                    rec.seed,
                    &rec.config_hash[..12]
                );
                println!("  {}", rec.summary);
            }
            Err(e) => {
                match &e {
                    Error::MissingArtifact { stage: s, path } => {
                        eprintln!("{s}: missing prerequisite {}", path.display())
                    }
                    Error::CertificationRefused { .. } => eprintln!("{stage}: {e}"),
                    Error::VerificationFailed(_) => eprintln!("{stage}: verification-failed: {e}"),
                    _ => eprintln!("{stage}: {e}"),
                }
                return ExitCode::from(exit_code(&e) as u8);
            }
        }
    }
    ExitCode::SUCCESS
}
