use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use emd_cli::{cmd_distill, cmd_eval, cmd_sample, cmd_verify, CliError};

#[derive(Parser)]
#[command(name = "emd", version, about = "EM distillation of a diffusion teacher into a one-step generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator from a config file.
    Distill {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the identity and property suites.
    Verify {
        /// Inject a defect, e.g. `flip-cancellation-sign`.
        #[arg(long)]
        fault: Option<String>,
    },
    /// Write generator samples as CSV.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a checkpoint against a teacher file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Distill { config } => {
            let s = cmd_distill(&config)?;
            println!("wrote {} iterations to {}", s.iterations, s.output_dir.display());
            if let Some(r) = s.report {
                println!("{}", r.to_json());
            }
        }
        Command::Verify { fault } => {
            cmd_verify(fault.as_deref())?;
        }
        Command::Sample { ckpt, n, out, seed } => cmd_sample(&ckpt, n, &out, seed)?,
        Command::Eval { ckpt, teacher, n, seed } => {
            println!("{}", cmd_eval(&ckpt, &teacher, n, seed)?.to_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
