use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use monovtr::cli::{self, CliError, CommandOutput, EXIT_INPUT};

#[derive(Parser)]
#[command(name = "vtr", about = "Monocular visual teach and repeat in a simulated world")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Drive the configured script and write the taught map.
    Teach {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        map: PathBuf,
    },
    /// Repeat a taught map in closed loop and write the traverse log.
    Repeat {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Summarise one or more traverse logs.
    Eval {
        #[arg(long = "log", required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write lateral-error and match-count series for plotting.
    ExportPlots {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sliding-mean window in frames.
        #[arg(long, default_value_t = 20)]
        window: usize,
    },
}

fn run(args: Args) -> Result<CommandOutput, CliError> {
    match args.command {
        Command::Teach { config, seed, map } => {
            let cfg = cli::load_config(config.as_deref(), seed)?;
            cli::cmd_teach(&cfg, &map)
        }
        Command::Repeat { config, seed, map, log } => {
            let cfg = cli::load_config(config.as_deref(), seed)?;
            cli::cmd_repeat(&cfg, &map, &log)
        }
        Command::Eval { logs, out } => cli::cmd_eval(&logs, out.as_deref()).map(|(_, o)| o),
        Command::ExportPlots { log, out, window } => cli::cmd_export_plots(&log, &out, window),
    }
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INPUT as u8 } else { 0 });
        }
    };
    match run(args) {
        Ok(out) => {
            print!("{}", out.text);
            ExitCode::from(out.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
