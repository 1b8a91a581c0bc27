//! Library behind the `ridnet` executable.

pub mod commands;
pub mod error;
pub mod manifest;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ridnet_core::model::Ablation;

use crate::commands::{AblateArgs, RunRecord, TrainArgs};
use crate::error::{CliError, CliResult, EXIT_NUMERIC};
use crate::manifest::{digest_all, Manifest};

pub const THREADS_ENV: &str = "RIDNET_THREADS";

#[derive(Debug, Parser)]
#[command(name = "ridnet", version, about = "Blind image denoising with RIDNet")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural clean corpus.
    Scenes {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
    /// Add white Gaussian noise to every image of a directory.
    Synth {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Standard deviation on the 0-255 scale.
        #[arg(long)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
    /// Train a network on a directory of clean images.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint path; the loss log and manifest are written beside it.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Denoise one image. There is no noise-level input.
    Denoise {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR / SSIM of denoised (or, without --ckpt, raw noisy) images.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        noisy: PathBuf,
        /// CSV destination; printed to stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Score 8-bit rounded outputs.
        #[arg(long)]
        quantize: bool,
    },
    /// Finite-difference check of every op and of a small network.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train each skip / attention combination under one budget.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        held_out: PathBuf,
        /// Comma-separated, e.g. `none,lsc+ssc,all`; defaults to all nine.
        #[arg(long, value_delimiter = ',')]
        configs: Vec<Ablation>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
        /// Iterations per run; overrides max_iters.
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-execute a manifest into a fresh directory and compare outputs.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Scenes { .. } => "scenes",
            Command::Synth { .. } => "synth",
            Command::Train { .. } => "train",
            Command::Denoise { .. } => "denoise",
            Command::Eval { .. } => "eval",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Ablate { .. } => "ablate",
            Command::Rerun { .. } => "rerun",
        }
    }
}

/// Worker threads from `RIDNET_THREADS`, if set.
pub fn threads_from_env() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| {
                CliError::usage(format!(
                    "{THREADS_ENV} must be a positive integer, got `{v}`"
                ))
            }),
        Err(_) => Ok(None),
    }
}

fn execute(command: &Command) -> CliResult<RunRecord> {
    match command {
        Command::Scenes {
            out,
            count,
            size,
            channels,
            seed,
            force,
        } => commands::scenes_cmd(out, *count, *size, *channels, *seed, *force),
        Command::Synth {
            input,
            out,
            sigma,
            seed,
            force,
        } => commands::synth(input, out, *sigma, *seed, *force),
        Command::Train {
            config,
            corpus,
            out,
            resume,
            log_every,
        } => commands::train_cmd(TrainArgs {
            config,
            corpus,
            out,
            resume: resume.as_deref(),
            log_every: *log_every,
        }),
        Command::Denoise { ckpt, input, out } => commands::denoise_cmd(ckpt, input, out),
        Command::Eval {
            ckpt,
            clean,
            noisy,
            report,
            quantize,
        } => commands::eval_cmd(ckpt.as_deref(), clean, noisy, report.as_deref(), *quantize),
        Command::Gradcheck {
            seed,
            seeds,
            report,
        } => commands::gradcheck_cmd(*seed, *seeds, report.as_deref()),
        Command::Ablate {
            config,
            corpus,
            held_out,
            configs,
            seeds,
            budget,
            out,
        } => commands::ablate_cmd(AblateArgs {
            config: config.as_deref(),
            corpus,
            held_out,
            configs,
            seeds,
            budget: *budget,
            out,
        }),
        Command::Rerun { .. } => unreachable!("handled by run"),
    }
}

/// Parses `args` (without the program name) and runs the command.
pub fn run(args: &[String]) -> CliResult<()> {
    let mut argv = vec!["ridnet".to_string()];
    argv.extend(args.iter().cloned());
    let cli = Cli::try_parse_from(&argv).map_err(|e| {
        if e.use_stderr() {
            CliError::usage(e.to_string())
        } else {
            // --help / --version
            print!("{e}");
            CliError::new(0, String::new())
        }
    })?;
    if let Command::Rerun { manifest, out_dir } = &cli.command {
        return rerun(manifest, out_dir);
    }
    let record = execute(&cli.command)?;
    if let Some(path) = &record.manifest {
        let manifest = Manifest {
            tool: "ridnet".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: cli.command.name().into(),
            args: args.to_vec(),
            output_flags: record.output_flags.iter().map(|s| s.to_string()).collect(),
            cwd: std::env::current_dir().map_err(|e| manifest::io_error(Path::new("."), e))?,
            config: record.config.clone(),
            threads: rayon::current_num_threads(),
            inputs: digest_all(&record.inputs)?,
            outputs: digest_all(&record.outputs)?,
        };
        manifest.save(path)?;
    }
    Ok(())
}

fn absolute(p: &Path) -> CliResult<PathBuf> {
    if p.is_absolute() {
        Ok(p.to_path_buf())
    } else {
        let cwd = std::env::current_dir().map_err(|e| manifest::io_error(Path::new("."), e))?;
        Ok(cwd.join(p))
    }
}

/// Checks recorded inputs, re-runs the command with outputs moved into
/// `out_dir`, and compares every output digest.
pub fn rerun(manifest_path: &Path, out_dir: &Path) -> CliResult<()> {
    let m = Manifest::load(manifest_path)?;
    let out_dir = absolute(out_dir)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| manifest::io_error(&out_dir, e))?;
    std::env::set_current_dir(&m.cwd).map_err(|e| manifest::io_error(&m.cwd, e))?;

    for input in &m.inputs {
        let now = manifest::sha256_file(&input.path)?;
        if now != input.sha256 {
            return Err(CliError::data(format!(
                "input {} changed since the recorded run",
                input.path.display()
            )));
        }
    }
    let args = m.remapped_args(&out_dir);
    eprintln!("rerun: ridnet {}", args.join(" "));
    run(&args)?;

    let mut mismatched = Vec::new();
    for out in &m.outputs {
        let target = m.remapped_output(&out.path, &out_dir).ok_or_else(|| {
            CliError::data(format!("cannot relocate output {}", out.path.display()))
        })?;
        let digest = manifest::sha256_file(&target)?;
        let same = digest == out.sha256;
        println!(
            "{} {}",
            if same { "identical" } else { "DIFFERENT" },
            target.display()
        );
        if !same {
            mismatched.push(target.display().to_string());
        }
    }
    if !mismatched.is_empty() {
        return Err(CliError::new(
            EXIT_NUMERIC,
            format!("outputs differ: {}", mismatched.join(", ")),
        ));
    }
    println!("all {} outputs reproduced bit-exactly", m.outputs.len());
    Ok(())
}
