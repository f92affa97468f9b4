use std::path::PathBuf;
use std::process::ExitCode;

use adlab::error::Error;
use adlab::experiment::{load_config, Experiment, OutputFormat, RunOptions, Subcommand, CONFIG_HELP};
use clap::{Parser, ValueEnum};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Train,
    Evaluate,
    Tas,
    Avar,
    Sweep,
    GenData,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Structured,
}

/// Desk-scale adversarial distillation lab.
#[derive(Parser, Debug)]
#[command(name = "adlab", version, after_long_help = CONFIG_HELP)]
struct Cli {
    /// What to run.
    #[arg(value_enum)]
    command: Cmd,
    /// Experiment config (TOML). See --help for every key.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config's top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics file format.
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Ok(v) = std::env::var("ADLAB_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Usage(format!("ADLAB_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Run(e.to_string()))?;
    }
    let config = load_config(&cli.config)?;
    let opts = RunOptions {
        out: cli.out,
        seed: cli.seed,
        format: match cli.format {
            Format::Csv => OutputFormat::Csv,
            Format::Structured => OutputFormat::Structured,
        },
    };
    let cmd = match cli.command {
        Cmd::Train => Subcommand::Train,
        Cmd::Evaluate => Subcommand::Evaluate,
        Cmd::Tas => Subcommand::Tas,
        Cmd::Avar => Subcommand::Avar,
        Cmd::Sweep => Subcommand::Sweep,
        Cmd::GenData => Subcommand::GenData,
    };
    let mut exp = Experiment::new(config, &opts)?;
    let result = exp.run(cmd);
    for n in exp.notes() {
        eprintln!("adlab: {n}");
    }
    result?;
    eprintln!("adlab: {} done, artifacts in {}", cmd.name(), exp.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("adlab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
