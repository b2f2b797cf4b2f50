//! Files, configuration and command line for `rotreg-core`.
//!
//! ```text
//! rotreg [--config run.toml] [--seed N] [--out DIR] <generate|train|eval|report|predict>
//! ```
//!
//! `--seed` and `--out` override the seed and output location of the selected
//! command's section (`[data]` for generate, `[train]`, `[eval]`, `[report]`).

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod images;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "rotreg", version, about = "Rotation regression from point-cloud segments")]
pub struct Cli {
    /// TOML run configuration; every section is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed of the selected command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory of the selected command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset: manifest, object model and point files.
    Generate,
    /// Train on the train split; writes checkpoints and the training log.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Dataset directory.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes the report and the accuracy curve.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        label: Option<String>,
    },
    /// Tabulate evaluation reports by occlusion bin.
    Report {
        /// Report files or evaluation directories; replace `[report] inputs`.
        inputs: Vec<PathBuf>,
        /// Comma-separated row labels.
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<String>>,
    },
    /// Predict the rotation of one masked RGB-D frame.
    Predict {
        /// 16-bit millimeter PGM or float meter PFM.
        #[arg(long)]
        depth: PathBuf,
        /// 8-bit PGM, nonzero on the object.
        #[arg(long)]
        mask: PathBuf,
        /// 8-bit PPM.
        #[arg(long)]
        color: Option<PathBuf>,
        /// Object translation `x,y,z` in meters; defaults to the segment centroid.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        translation: Option<Vec<f64>>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Keeps freed heap memory in the process instead of returning it to the OS.
/// Training allocates and frees the same large buffers every step; with the
/// default glibc thresholds most of the time went to page faults.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tunables.
    unsafe {
        libc::mallopt(libc::M_MMAP_MAX, 0);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    if p.is_absolute() {
        return Ok(p.to_path_buf());
    }
    let cwd = std::env::current_dir().map_err(|e| CliError::io(Path::new("."), e))?;
    Ok(cwd.join(p))
}

/// Loads the configuration and applies the command's flags.
pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(&absolute(p)?)?,
        None => RunConfig::parse("", &absolute(Path::new("."))?)?,
    };
    let out = cli.out.as_deref().map(absolute).transpose()?;
    let seed = cli.seed;
    let no_seed = |name: &str| match seed {
        Some(_) => Err(CliError::Config(format!("--seed has no effect on {name}"))),
        None => Ok(()),
    };
    match &cli.command {
        Command::Generate => {
            cfg.data.seed = seed.unwrap_or(cfg.data.seed);
            cfg.data.dir = out.unwrap_or(cfg.data.dir);
        }
        Command::Train { resume, dataset } => {
            cfg.train.seed = seed.unwrap_or(cfg.train.seed);
            cfg.train.out = out.unwrap_or(cfg.train.out);
            if let Some(r) = resume {
                cfg.train.resume = Some(absolute(r)?);
            }
            if let Some(d) = dataset {
                cfg.train.dataset = Some(absolute(d)?);
            }
        }
        Command::Eval { checkpoint, dataset, label } => {
            cfg.eval.seed = seed.unwrap_or(cfg.eval.seed);
            cfg.eval.out = out.unwrap_or(cfg.eval.out);
            if let Some(c) = checkpoint {
                cfg.eval.checkpoint = Some(absolute(c)?);
            }
            if let Some(d) = dataset {
                cfg.eval.dataset = Some(absolute(d)?);
            }
            if label.is_some() {
                cfg.eval.label = label.clone();
            }
        }
        Command::Report { inputs, labels } => {
            no_seed("report")?;
            cfg.report.out = out.unwrap_or(cfg.report.out);
            if !inputs.is_empty() {
                cfg.report.inputs = inputs.iter().map(|p| absolute(p)).collect::<Result<_>>()?;
            }
            if labels.is_some() {
                cfg.report.labels = labels.clone();
            }
        }
        Command::Predict { .. } => {
            if out.is_some() {
                return Err(CliError::Config("--out has no effect on predict; the prediction goes to stdout".into()));
            }
            cfg.eval.seed = seed.unwrap_or(cfg.eval.seed);
        }
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    match &cli.command {
        Command::Generate => {
            let n = commands::generate(&cfg)?;
            eprintln!("wrote {n} samples to {}", cfg.resolve(&cfg.data.dir).display());
        }
        Command::Train { .. } => {
            retain_freed_memory();
            let o = commands::train(&cfg)?;
            let deg = |v: Option<f64>| v.map(|x| format!("{:.2} deg", x.to_degrees())).unwrap_or_else(|| "n/a".into());
            eprintln!(
                "trained to iteration {}{}; last check {}, best {}",
                o.iterations,
                if o.stopped_early { " (stopped early)" } else { "" },
                deg(o.last_check),
                deg(o.best_check)
            );
        }
        Command::Eval { .. } => {
            retain_freed_memory();
            let r = commands::evaluate(&cfg)?;
            let s = &r.summary;
            let f = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "n/a".into());
            println!(
                "{}: {} samples, mean {} deg, median {} deg, {:.1}% above 90 deg",
                r.label,
                s.count,
                f(s.mean_degrees),
                f(s.median_degrees),
                100.0 * s.fraction_above_90_degrees
            );
        }
        Command::Report { .. } => print!("{}", commands::report(&cfg)?),
        Command::Predict { depth, mask, color, translation, checkpoint } => {
            if translation.as_ref().is_some_and(|t| t.len() != 3) {
                return Err(CliError::Config("--translation takes three comma-separated values".into()));
            }
            let inputs = commands::PredictInputs {
                depth: depth.clone(),
                mask: mask.clone(),
                color: color.clone(),
                translation: translation.as_ref().map(|t| [t[0], t[1], t[2]]),
                checkpoint: checkpoint.as_deref().map(absolute).transpose()?,
            };
            let out = commands::predict(&cfg, &inputs)?;
            println!("{}", serde_json::to_string(&out).expect("prediction serializes"));
        }
    }
    Ok(())
}

/// Runs the command line and returns the process exit code. Failures print
/// `error[<class>]: <message>` to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return 0;
            }
            eprintln!("error[config]: {}", e.to_string().trim_end());
            return 2;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            e.exit_code()
        }
    }
}
