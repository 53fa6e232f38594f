//! Command-line driver: simulate fields, fit models, predict, and score.

pub mod archive;
pub mod commands;
pub mod config;
pub mod error;
pub mod table;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::Targets;
use ndarray::Array2;

use crate::config::{grid_from_axes, load_config, AxisSpec, TargetKindName};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "nafgp", version, about = "Flow-warped spatial Gaussian processes")]
pub struct Cli {
    /// TOML run configuration (all keys optional).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for the parallel loops.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory (default: the configured one, else the current directory).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KindArg {
    Process,
    Data,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a warped field on a grid and split it into training and test files.
    Simulate,
    /// Fit a model to an observation file.
    Fit {
        /// Observation CSV (coordinates then value).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Krige at target locations.
    Predict {
        #[arg(long)]
        model: Option<PathBuf>,
        /// CSV whose leading columns are the model's coordinate names.
        #[arg(long, conflicts_with = "grid")]
        targets: Option<PathBuf>,
        /// Comma-separated per-axis spec: lo:hi:count sweeps an axis, a number fixes it.
        #[arg(long, allow_hyphen_values = true)]
        grid: Option<String>,
        #[arg(long, value_enum)]
        target_kind: Option<KindArg>,
    },
    /// Score predictions against held-out truth.
    Diagnose {
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value = "model")]
        label: String,
        #[arg(long, value_enum)]
        target_kind: Option<KindArg>,
    },
}

/// Target points from a per-axis spec: `lo:hi:count` sweeps an axis, a
/// single number fixes it. "0.1,-0.2,0:1:50" is a depth profile at one site.
pub fn parse_targets(spec: &str) -> CliResult<Array2<f64>> {
    let mut fixed = Vec::new();
    let mut swept = Vec::new();
    for (k, axis) in spec.split(',').enumerate() {
        let axis = axis.trim();
        let bad = || CliError::Usage(format!("grid axis '{axis}' is neither a number nor lo:hi:count"));
        let parts: Vec<&str> = axis.split(':').collect();
        match parts.len() {
            1 => fixed.push((k, parts[0].parse::<f64>().map_err(|_| bad())?)),
            3 => swept.push((
                k,
                AxisSpec {
                    lo: parts[0].parse().map_err(|_| bad())?,
                    hi: parts[1].parse().map_err(|_| bad())?,
                    count: parts[2].parse().map_err(|_| bad())?,
                },
            )),
            _ => return Err(bad()),
        }
    }
    let d = fixed.len() + swept.len();
    let sweep = if swept.is_empty() {
        Array2::zeros((1, 0))
    } else {
        grid_from_axes(&swept.iter().map(|(_, a)| *a).collect::<Vec<_>>())?.points()
    };
    let mut points = Array2::zeros((sweep.nrows(), d));
    for (j, (k, _)) in swept.iter().enumerate() {
        points.column_mut(*k).assign(&sweep.column(j));
    }
    for (k, v) in fixed {
        points.column_mut(k).fill(v);
    }
    Ok(points)
}

fn configure_threads(threads: Option<usize>) -> CliResult<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    #[cfg(feature = "parallel")]
    {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    if n == 1 {
        nafgp::exec::set_policy(nafgp::exec::Policy::Sequential);
    }
    Ok(())
}

/// Run one command; returns the text to print on success.
pub fn run(cli: Cli) -> CliResult<String> {
    let cfg = load_config(cli.config.as_deref())?;
    configure_threads(cli.threads.or(cfg.threads))?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    let out = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    let kind_of = |arg: Option<KindArg>| match arg {
        Some(KindArg::Process) => TargetKindName::Process.kind(),
        Some(KindArg::Data) => TargetKindName::Data.kind(),
        None => cfg.predict.target_kind.kind(),
    };
    let missing = |what: &str| CliError::Usage(format!("no {what} given (flag or [data] section)"));
    let text = match cli.command {
        Command::Simulate => commands::cmd_simulate(&cfg, seed, &out)?.to_string(),
        Command::Fit { data } => {
            let train = data.or_else(|| cfg.data.train.clone()).ok_or_else(|| missing("training file"))?;
            commands::cmd_fit(&cfg, seed, &train, &out)?.to_string()
        }
        Command::Predict { model, targets, grid, target_kind } => {
            let model = model.or_else(|| cfg.data.model.clone()).ok_or_else(|| missing("model archive"))?;
            let targets_path = targets.or_else(|| if grid.is_none() { cfg.data.targets.clone() } else { None });
            let targets = match (&targets_path, grid) {
                (Some(p), _) => Targets::File(p),
                (None, Some(g)) => Targets::Points(parse_targets(&g)?),
                (None, None) => Targets::Grid(cfg.predict.grid.clone().ok_or_else(|| missing("targets file or grid"))?),
            };
            commands::cmd_predict(&model, targets, kind_of(target_kind), &out)?.to_string()
        }
        Command::Diagnose { truth, predictions, label, target_kind } => {
            let truth = truth.or_else(|| cfg.data.truth.clone()).ok_or_else(|| missing("truth file"))?;
            let preds = predictions.or_else(|| cfg.data.predictions.clone()).ok_or_else(|| missing("predictions file"))?;
            commands::cmd_diagnose(&truth, &preds, &label, kind_of(target_kind), &out)?.to_string()
        }
    };
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_spec_parses() {
        let g = parse_targets("0:1:3, -0.5:0.5:2").unwrap();
        assert_eq!(g, ndarray::array![[0.0, -0.5], [0.0, 0.5], [0.5, -0.5], [0.5, 0.5], [1.0, -0.5], [1.0, 0.5]]);
        let profile = parse_targets("0.1,-0.2,0:1:3").unwrap();
        assert_eq!(profile, ndarray::array![[0.1, -0.2, 0.0], [0.1, -0.2, 0.5], [0.1, -0.2, 1.0]]);
        assert_eq!(parse_targets("0.3").unwrap(), ndarray::array![[0.3]]);
        assert_eq!(parse_targets("0:1").unwrap_err().exit_code(), 2);
        assert_eq!(parse_targets("0:1:1").unwrap_err().exit_code(), 2);
    }

    #[test]
    fn global_flags_after_subcommand() {
        let cli = Cli::try_parse_from(["nafgp", "fit", "--data", "a.csv", "--seed", "3", "--out", "o"]).unwrap();
        assert_eq!(cli.seed, Some(3));
        assert!(matches!(cli.command, Command::Fit { data: Some(_) }));
        let cli = Cli::try_parse_from(["nafgp", "predict", "--grid", "-0.5:0.5:3,0:1:2"]).unwrap();
        assert!(matches!(cli.command, Command::Predict { grid: Some(g), .. } if g.starts_with("-0.5")));
    }
}
