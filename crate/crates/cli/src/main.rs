mod config;
mod error;
mod evaluate;
mod export;
mod presets;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use illusion_core::evaluation::{build_prompt_groups, PromptProtocol};
use illusion_core::fabrication::PrintLayout;

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "illusion", version, about = "Optimize printable multi-view illusions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize the primes described by a config file.
    Run {
        config: PathBuf,
        /// Override a config value, e.g. `--set schedule.learning_rate=0.01`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Continue from `<out_dir>/checkpoint.json` when present.
        #[arg(long)]
        resume: bool,
    },
    /// Check a config file and list every problem.
    Validate {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a directory of generated groups.
    Evaluate {
        images_dir: PathBuf,
        /// TOML listing `[[embedders]]`; defaults to one mock embedder.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Write printable primes and a contact sheet for a finished run.
    Export {
        run_dir: PathBuf,
        #[arg(long, default_value_t = 300.0)]
        dpi: f64,
        /// Printed width in millimetres.
        #[arg(long)]
        size_mm: Option<f64>,
        #[arg(long)]
        crop_marks: bool,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print evaluation prompt groups as JSON.
    Prompts {
        /// Use the single-style rotation protocol.
        #[arg(long)]
        rotation: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        groups_per_style: Option<usize>,
    },
    /// List the built-in presets.
    Presets,
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run {
            config,
            overrides,
            out_dir,
            resume,
        } => {
            let out = run::run(&config, &overrides, &run::RunOptions { out_dir, resume })?;
            println!("{}", out.display());
        }
        Command::Validate { config, overrides } => {
            let cfg = config::load(&config, &overrides)?;
            cfg.validate(config::config_dir(&config))?;
            println!("ok");
        }
        Command::Evaluate {
            images_dir,
            config,
            out_dir,
        } => {
            let report = evaluate::evaluate(&images_dir, config.as_deref(), out_dir.as_deref())?;
            for a in &report.aggregates {
                println!(
                    "{}\t{}\tgroups={}\tcontrollability={:.4}\tindependence={:.4}",
                    a.method, a.style, a.groups, a.controllability, a.independence
                );
            }
        }
        Command::Export {
            run_dir,
            dpi,
            size_mm,
            crop_marks,
            out_dir,
        } => {
            let layout = PrintLayout {
                dpi,
                size_mm,
                crop_marks,
            };
            let sheet = export::export(&run_dir, &layout, out_dir.as_deref())?;
            for p in &sheet.pages {
                println!("{}", p.file.display());
            }
            println!("{}", sheet.contact_sheet.display());
        }
        Command::Prompts {
            rotation,
            seed,
            groups_per_style,
        } => {
            let mut protocol = if rotation {
                PromptProtocol::rotation()
            } else {
                PromptProtocol::default()
            };
            protocol.seed = seed;
            if let Some(g) = groups_per_style {
                protocol.groups_per_style = g;
            }
            let groups = build_prompt_groups(&protocol)?;
            let json = serde_json::to_string_pretty(&groups).map_err(illusion_core::Error::from)?;
            println!("{json}");
        }
        Command::Presets => {
            for name in presets::names() {
                println!("{name}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Invalid(diags) = &e {
                for d in diags {
                    eprintln!("  {d}");
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
