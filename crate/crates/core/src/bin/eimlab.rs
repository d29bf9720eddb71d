//! `eimlab <command> --config <path> [--out <dir>] [--seed <n>] [--jobs <n>] [--deterministic]`

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use eimlab::experiment::{load_config, resolve_out_dir, run, Command, RunFailure};

#[derive(Parser)]
#[command(name = "eimlab", version, about = "Run a latent-editing experiment from a JSON config")]
struct Cli {
    command: Command,
    #[arg(long)]
    config: PathBuf,
    /// Run directory (default: $EIMLAB_OUT/<command>-<hash>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Single worker thread.
    #[arg(long)]
    deterministic: bool,
}

fn fail(f: &RunFailure) -> ExitCode {
    eprintln!("{}", serde_json::to_string(f).unwrap_or_else(|_| f.error.clone()));
    ExitCode::from(f.exit_code as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match load_config(&cli.config) {
        Ok(c) => c,
        Err(f) => return fail(&f),
    };
    if cfg.command != cli.command {
        return fail(&RunFailure::schema(format!(
            "`command`: config says {}, command line says {}",
            cfg.command, cli.command
        )));
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = Some(j);
    }
    cfg.deterministic |= cli.deterministic;
    let out = match resolve_out_dir(&cfg, cli.out.as_deref()) {
        Ok(o) => o,
        Err(e) => return fail(&RunFailure::schema(e)),
    };
    match run(&cfg, &out) {
        Ok(o) => {
            println!("{}", o.out_dir.display());
            for (k, v) in &o.summary {
                println!("{k} = {v}");
            }
            ExitCode::SUCCESS
        }
        Err(f) => fail(&f),
    }
}
