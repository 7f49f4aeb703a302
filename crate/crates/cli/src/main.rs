mod commands;
mod output;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use scotoma::error::ErrorKind;
use scotoma::ScotomaError;

#[derive(Parser, Debug)]
#[command(name = "scotoma", version, about = "Semisupervised one-to-one matching and simulation lab")]
struct Cli {
    /// Worker threads for simulation replicates.
    #[arg(long, global = true, env = "SCOTOMA_THREADS", default_value_t = 1)]
    threads: usize,

    /// Overrides the seed of the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn the weight vector from a dataset CSV.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match the object set of a dataset under a saved weight vector.
    Match {
        #[arg(long)]
        beta: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// A positive number, `auto`, or `none`.
        #[arg(long, default_value = "none")]
        epsilon: String,
        /// JSON column mapping for the dataset CSV.
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a simulation protocol described by a JSON config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a matching CSV against an expert pairing CSV.
    Evaluate {
        #[arg(long)]
        matching: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &ScotomaError) -> u8 {
    match e.kind() {
        ErrorKind::Config => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numerical => 3,
    }
}

fn run(cli: Cli) -> scotoma::Result<()> {
    if cli.threads == 0 {
        return Err(ScotomaError::Config("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| ScotomaError::Config(format!("thread pool: {e}")))?;
    match cli.command {
        Command::Fit { config, data, out } => commands::fit(&config, &data, &out, cli.seed),
        Command::Match {
            beta,
            data,
            epsilon,
            schema,
            out,
        } => commands::match_cmd(&beta, &data, &epsilon, schema.as_deref(), &out),
        Command::Simulate { config, out } => simulate::simulate(&config, &out, cli.seed),
        Command::Evaluate { matching, truth, out } => commands::evaluate(&matching, &truth, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
