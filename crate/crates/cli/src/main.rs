use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use deskalign::pipeline::{
    run_experiment, run_stage, ExperimentKind, PipelineConfig, PipelineError, RunManifest, StageName,
};
use serde_json::json;

/// Desk-scale alignment pipeline: SFT, reward modeling, rejection sampling
/// and DPO on a synthetic verifiable task.
///
/// Settings resolve as command-line flag, then environment variable, then
/// config file, then built-in default.
#[derive(Debug, Parser)]
#[command(name = "deskalign", version)]
struct Cli {
    /// TOML config; keys it omits keep their defaults.
    #[arg(long, global = true, env = "DESKALIGN_CONFIG", value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed, overriding the config's `seed` key.
    #[arg(long, global = true, env = "DESKALIGN_SEED", value_name = "U64")]
    seed: Option<u64>,
    /// Run directory holding every stage's outputs.
    #[arg(long, global = true, env = "DESKALIGN_OUT", value_name = "DIR", default_value = "run")]
    out: PathBuf,
    /// Worker threads. Changes speed only, never outputs.
    #[arg(long, global = true, env = "DESKALIGN_THREADS", value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate conversations and the prompt shards.
    GenData,
    /// Supervised fine-tuning and the benchmark reference policy.
    Sft,
    /// Sample and annotate preference pairs.
    BuildPairs,
    /// Train the Bradley-Terry reward model.
    TrainRm,
    /// Sample and rank candidate pools.
    BuildSet,
    /// Rejection-sampling fine-tuning on the top-ranked responses.
    Rs,
    /// Select the dispreferred rank and run DPO.
    Dpo,
    /// Win rates, best-of-n curves and reward-model accuracy.
    Eval,
    /// Run one experiment sweep.
    Experiment {
        #[arg(value_parser = parse_experiment)]
        name: ExperimentKind,
    },
    /// Run every stage not yet complete, in order.
    All {
        /// Also run all experiment sweeps.
        #[arg(long)]
        experiments: bool,
    },
    /// Print the resolved config as TOML.
    ShowConfig,
}

fn parse_experiment(s: &str) -> Result<ExperimentKind, String> {
    ExperimentKind::parse(s).ok_or_else(|| {
        let names: Vec<_> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown experiment {s:?}; expected one of {}", names.join(", "))
    })
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.clone(), source })?;
            PipelineConfig::from_toml(&text)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(m: &RunManifest, dir: &Path) {
    let line = json!({
        "stage": m.stage,
        "run_id": m.run_id,
        "dir": dir.display().to_string(),
        "outputs": m.outputs.len(),
        "steps": m.steps,
        "wall_clock_secs": m.wall_clock_secs,
    });
    println!("{line}");
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = load_config(cli)?;
    let root = cli.out.as_path();
    let stage = |s: StageName| -> Result<(), PipelineError> {
        let m = run_stage(root, &cfg, s)?;
        report(&m, &root.join(s.name()));
        Ok(())
    };
    let experiment = |k: ExperimentKind| -> Result<(), PipelineError> {
        let m = run_experiment(root, &cfg, k)?;
        report(&m, &root.join("experiments").join(k.name()));
        Ok(())
    };
    match &cli.command {
        Command::GenData => stage(StageName::GenData),
        Command::Sft => stage(StageName::Sft),
        Command::BuildPairs => stage(StageName::BuildPairs),
        Command::TrainRm => stage(StageName::TrainRm),
        Command::BuildSet => stage(StageName::BuildSet),
        Command::Rs => stage(StageName::Rs),
        Command::Dpo => stage(StageName::Dpo),
        Command::Eval => stage(StageName::Eval),
        Command::Experiment { name } => experiment(*name),
        Command::All { experiments } => {
            for s in StageName::ALL {
                match stage(s) {
                    Err(PipelineError::AlreadyComplete(_)) => {}
                    r => r?,
                }
            }
            if *experiments {
                for k in ExperimentKind::ALL {
                    match experiment(k) {
                        Err(PipelineError::AlreadyComplete(_)) => {}
                        r => r?,
                    }
                }
            }
            Ok(())
        }
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", json!({ "error": "threads", "message": e.to_string() }));
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
