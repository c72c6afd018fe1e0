use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spinecade::patch::Strategy;
use spinecade::pipeline::{self, compare_table, PipelineConfig, PipelineError, RunLock};

#[derive(Parser)]
#[command(name = "spinecade", version, about = "Fracture candidate detection along bone edges")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set train.epochs=4`. Repeatable.
    #[arg(long = "set", value_name = "K=V")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run sample/train/predict/eval for every strategy and print a comparison table.
    #[arg(long)]
    compare_strategies: bool,
    /// Worker threads; falls back to SPINECADE_THREADS.
    #[arg(long, env = "SPINECADE_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    Phantom(Common),
    Edges(Common),
    Sample(Common),
    Train(Common),
    Predict(Common),
    Eval(Common),
    RunAll(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Self::Phantom(c)
            | Self::Edges(c)
            | Self::Sample(c)
            | Self::Train(c)
            | Self::Predict(c)
            | Self::Eval(c)
            | Self::RunAll(c) => c,
        }
    }
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, PipelineError> {
    raw.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.to_string()))
                .ok_or_else(|| PipelineError::ConfigInvalid(format!("--set {kv}: expected KEY=VALUE")))
        })
        .collect()
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let args = cli.command.common();
    let mut overrides = parse_overrides(&args.overrides)?;
    if let Some(seed) = args.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PipelineError::ConfigInvalid(format!("threads: {e}")))?;
    }
    let cfg = PipelineConfig::load(&args.config, &overrides)?;
    let strategies: Vec<Strategy> =
        if args.compare_strategies { Strategy::ALL.to_vec() } else { vec![cfg.sampling.strategy] };

    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let rows = match cli.command {
        Command::Phantom(_) => pipeline::cmd_phantom(&cfg).map(|_| None)?,
        Command::Edges(_) => pipeline::cmd_edges(&cfg).map(|_| None)?,
        Command::Sample(_) => pipeline::cmd_sample(&cfg, &strategies).map(|_| None)?,
        Command::Train(_) => pipeline::cmd_train(&cfg, &strategies).map(|_| None)?,
        Command::Predict(_) => pipeline::cmd_predict(&cfg, &strategies).map(|_| None)?,
        Command::Eval(_) => Some(pipeline::cmd_eval(&cfg, &strategies)?.1),
        Command::RunAll(_) => Some(pipeline::cmd_run_all(&cfg, &strategies)?),
    };
    if let Some(rows) = rows {
        print!("{}", compare_table(&rows));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("spinecade: {msg}");
            ExitCode::FAILURE
        }
    }
}
