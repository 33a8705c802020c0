use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use goursat_cli::{run, Command, Overrides, RunConfig};

/// Goursat-Darboux optimal control toolkit.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Cli {
    /// Command to run; must agree with `command` in the config if both are given.
    #[arg(value_enum)]
    command: Option<Command>,
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default `out/<command>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for the parallel solvers.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override the grid spacing (`grid.h_max` or `tsunami.h_max`).
    #[arg(long)]
    hmax: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(k) = cli.workers {
        // a second call in the same process fails; the first pool stays
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    }
    let result = RunConfig::load(&cli.config).and_then(|mut cfg| {
        cfg.apply(&Overrides { command: cli.command, seed: cli.seed, h_max: cli.hmax, out: cli.out.clone() })?;
        run(&cfg)
    });
    match result {
        Ok(o) => {
            println!("{}: {} ({})", o.command.name(), if o.pass { "pass" } else { "FAIL" }, o.out_dir.display());
            ExitCode::from(o.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
