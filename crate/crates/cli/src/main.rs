use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use quadlab_cli::config::{resolve, Overrides, Preset, TerrainArg};
use quadlab_cli::{run_stage, Stage};

#[derive(Parser)]
#[command(name = "quadlab", version, about = "Quadruped locomotion lab: expert, imitation, finetuning, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the MPC expert for one episode and log solver diagnostics.
    ExpertRollout(Common),
    /// Clone the expert with DAgger and write a policy checkpoint.
    Imitate(Common),
    /// Finetune a policy with PPO.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Start from a randomly initialized actor instead of a checkpoint.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Evaluate a checkpoint (or the expert with `--preset expert`).
    Evaluate(Common),
    /// Compare MPC solve time against policy inference.
    Bench(Common),
    /// Gather plot-ready CSVs from earlier runs.
    ExportPlots(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file, or a manifest of an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory to create; must not exist or be empty.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long, value_enum)]
    terrain: Option<TerrainArg>,
    #[arg(long)]
    terrain_factor: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Input policy checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Input run directory for `export-plots` (repeatable).
    #[arg(long = "run")]
    runs: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, common, from_scratch) = match cli.command {
        Command::ExpertRollout(c) => (Stage::ExpertRollout, c, false),
        Command::Imitate(c) => (Stage::Imitate, c, false),
        Command::Finetune { common, from_scratch } => (Stage::Finetune, common, from_scratch),
        Command::Evaluate(c) => (Stage::Evaluate, c, false),
        Command::Bench(c) => (Stage::Bench, c, false),
        Command::ExportPlots(c) => (Stage::ExportPlots, c, false),
    };
    let overrides = Overrides {
        seed: common.seed,
        preset: common.preset,
        terrain: common.terrain.map(Into::into),
        terrain_factor: common.terrain_factor,
        iters: common.iters,
        from_scratch,
        checkpoint: common.checkpoint,
        runs: common.runs,
    };
    let result = resolve(common.config.as_deref(), &overrides).and_then(|cfg| {
        let out = common.out.unwrap_or_else(|| {
            PathBuf::from("runs").join(format!("{}-{}-s{}", stage.as_str(), cfg.preset.as_str(), cfg.seed))
        });
        run_stage(stage, &cfg, &out).map(|m| (m, out))
    });
    match result {
        Ok((m, out)) => {
            eprintln!("{} finished in {:.1} s: {}", m.stage, m.timings.wall_seconds, out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
