use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gemreg::association::mknn_match;
use gemreg::bench::{load_cloud, load_manifest, run_manifest, write_synth, SynthFile};
use gemreg::pipeline::{extract_models, register};
use gemreg::{Config, Error, Result};

#[derive(Parser)]
#[command(name = "gemreg", version, about = "Global registration of LiDAR point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a source cloud onto a target cloud and write a JSON report.
    Register {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the putative correspondences as `type x_id y_id distance`.
    Match {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic scene pairs and a manifest.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Register every pair of a manifest and report metrics.
    Bench {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    path.map_or_else(|| Ok(Config::default()), Config::load)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Register {
            source,
            target,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let report = register(&load_cloud(&source)?, &load_cloud(&target)?, &cfg)?;
            emit(out.as_deref(), &(report.to_json() + "\n"))
        }
        Command::Match {
            source,
            target,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let xs = extract_models(&load_cloud(&source)?, &cfg, cfg.seed)?;
            let ys = extract_models(&load_cloud(&target)?, &cfg, cfg.seed)?;
            let mut text = String::new();
            for c in mknn_match(&xs.gems, &ys.gems, cfg.association.k) {
                text.push_str(&format!(
                    "{} {} {} {:.6}\n",
                    c.primitive.as_str(),
                    xs.gems[c.x].segment_id,
                    ys.gems[c.y].segment_id,
                    c.distance
                ));
            }
            emit(out.as_deref(), &text)
        }
        Command::Synth { spec, out_dir } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| Error::Io {
                path: spec.clone(),
                source: e,
            })?;
            let file: SynthFile = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            let manifest = write_synth(&file, &out_dir)?;
            eprintln!("wrote {}", manifest.display());
            Ok(())
        }
        Command::Bench { pairs, config, report } => {
            let cfg = load_config(config.as_deref())?;
            let entries = load_manifest(&pairs)?;
            let bench = run_manifest(&entries, &cfg)?;
            emit(report.as_deref(), &bench.to_text())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
