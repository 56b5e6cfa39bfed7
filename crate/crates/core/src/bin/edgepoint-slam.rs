use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use edgepoint_slam::run::{evaluate_files, init_only_sequence, run_sequence, RunOptions, EXIT_ERROR};

#[derive(Parser)]
#[command(version, about = "Monocular SLAM on tracked edge points")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track a sequence and write trajectory.txt, map.ply, report.json and plotdata.csv.
    Run(SequenceArgs),
    /// ATE of a TUM trajectory against ground truth, printed as JSON.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Stop after the two-view initialization and write init.json.
    InitOnly(SequenceArgs),
}

#[derive(Args)]
struct SequenceArgs {
    #[arg(long)]
    sequence: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl From<SequenceArgs> for RunOptions {
    fn from(a: SequenceArgs) -> Self {
        RunOptions {
            sequence: a.sequence,
            calib: a.calib,
            out: a.out,
            groundtruth: a.gt,
            seed: a.seed,
            config: a.config,
        }
    }
}

fn execute(command: Command) -> edgepoint_slam::Result<i32> {
    match command {
        Command::Run(args) => {
            let outcome = run_sequence(&args.into())?;
            println!("{}", serde_json::to_string_pretty(&outcome.report).expect("serializable report"));
            Ok(outcome.exit_code())
        }
        Command::Eval { est, gt } => {
            let report = evaluate_files(&est, &gt)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("serializable report"));
            Ok(0)
        }
        Command::InitOnly(args) => {
            let report = init_only_sequence(&args.into())?;
            println!("{}", serde_json::to_string_pretty(&report).expect("serializable report"));
            Ok(report.exit_code())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let code = execute(cli.command).unwrap_or_else(|e| {
        log::error!("{e}");
        EXIT_ERROR
    });
    ExitCode::from(code as u8)
}
