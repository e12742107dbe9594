use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hypowatch_cli::commands::output_dir;
use hypowatch_cli::{cmd_report, cmd_run, cmd_simulate, dry_run, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "hypowatch", version, about = "Hypoglycemia detection from wearable GSR and heart rate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; every field has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "HYPOWATCH_OUT_DIR")]
    out: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the resolved config and planned stages without writing anything.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort as csv bundles.
    Simulate,
    /// Train and evaluate the configured models and modalities.
    Run,
    /// Run every modality plus late fusion and summarize the best models.
    Ablate,
    /// Verify and re-render the tables of a finished run.
    Report,
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = output_dir(&cfg, cli.out.as_deref());
    let name = match cli.command {
        Command::Simulate => "simulate",
        Command::Run => "run",
        Command::Ablate => "ablate",
        Command::Report => "report",
    };
    if cli.dry_run {
        print!("{}", dry_run(&cfg, name, &out)?);
        return Ok(());
    }
    match cli.command {
        Command::Simulate => {
            let s = cmd_simulate(cfg, &out)?;
            println!(
                "wrote {} subjects to {} (prevalence {:.4}, config hash {})",
                s.subjects.len(),
                out.display(),
                s.prevalence,
                s.config_hash
            );
        }
        Command::Run | Command::Ablate => {
            let r = cmd_run(cfg, name, &out)?;
            println!("config hash {}; artifacts in {}", r.config_hash, out.display());
        }
        Command::Report => {
            cmd_report(Path::new(&out))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
