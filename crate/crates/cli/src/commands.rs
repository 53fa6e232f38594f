//! The four subcommands. Each reads its inputs, writes its artifacts under the
//! output directory, and returns a short report for the terminal.

use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use nafgp::diagnostics::{score_arrays, write_score_table, ScoreReport};
use nafgp::fit::{default_initial, fit, FittedModel, ModelSpec};
use nafgp::likelihood::{CovarianceParams, NonstatParams};
use nafgp::covariance::{MaternParams, NonstatMaternConfig};
use nafgp::predict::{krig, TargetKind};
use nafgp::simulate::{simulate_field, SimulationSpec};
use nafgp::types::{standardize_named, SpatialDataset};

use crate::archive::{Architecture, ModelArchive};
use crate::config::{default_axis_names, grid_from_axes, AxisSpec, ModelName, RunConfig};
use crate::error::{CliError, CliResult};
use crate::table::{read_table, write_table_file, Table};

pub const GRID_TRUTH_FILE: &str = "grid_truth.csv";
pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";
pub const MODEL_FILE: &str = "model.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const SCORES_FILE: &str = "scores.csv";

const PREDICTION_COLUMNS: [&str; 4] = ["mean", "std_error", "lower", "upper"];

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn with_value_column(axis_names: &[String]) -> Vec<String> {
    axis_names.iter().cloned().chain(["value".to_string()]).collect()
}

/// Observation file: d coordinate columns followed by one value column.
pub fn read_observations(path: &Path) -> CliResult<SpatialDataset> {
    let table = read_table(path)?;
    if table.header.len() < 2 {
        return Err(CliError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "need at least one coordinate column and a value column".into(),
        });
    }
    if table.rows.is_empty() {
        return Err(CliError::Parse { path: path.to_path_buf(), line: 2, message: "no observations".into() });
    }
    let d = table.header.len() - 1;
    let locations = table.leading_columns(d);
    let values = table.column(d);
    let names = table.header[..d].to_vec();
    SpatialDataset::new(locations, values)
        .map_err(|e| match e {
            nafgp::Error::DuplicateLocation { first, second } => CliError::Parse {
                path: path.to_path_buf(),
                line: table.lines[second],
                message: format!("duplicate location (first seen on line {})", table.lines[first]),
            },
            other => other.into(),
        })?
        .with_axis_names(names)
        .map_err(Into::into)
}

fn rows_of(points: &Array2<f64>, values: impl Iterator<Item = f64>) -> Vec<Vec<f64>> {
    points
        .rows()
        .into_iter()
        .zip(values)
        .map(|(r, v)| r.iter().copied().chain([v]).collect())
        .collect()
}

pub struct SimulateReport {
    pub files: Vec<PathBuf>,
    pub grid_size: usize,
    pub train: usize,
    pub test: usize,
    pub truth_mean: f64,
    pub truth_var: f64,
}

impl fmt::Display for SimulateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "simulated {} grid nodes: {} training, {} held out", self.grid_size, self.train, self.test)?;
        writeln!(f, "process mean {:.6}, variance {:.6}", self.truth_mean, self.truth_var)?;
        for p in &self.files {
            writeln!(f, "wrote {}", p.display())?;
        }
        Ok(())
    }
}

pub fn cmd_simulate(cfg: &RunConfig, seed: u64, out: &Path) -> CliResult<SimulateReport> {
    let sim = &cfg.simulate;
    let grid = grid_from_axes(&sim.axes)?;
    let d = grid.dim();
    let names = sim.axis_names.clone().unwrap_or_else(|| default_axis_names(d));
    if names.len() != d {
        return Err(CliError::Config {
            path: "<config>".into(),
            message: format!("simulate.axis_names has {} names for {d} axes", names.len()),
        });
    }
    if sim.sample_size > grid.len() {
        return Err(CliError::Config {
            path: "<config>".into(),
            message: format!("simulate.sample_size {} exceeds the {} grid nodes", sim.sample_size, grid.len()),
        });
    }
    let matern = MaternParams::new(sim.scale, sim.range, sim.smoothness).map_err(|e| CliError::Config {
        path: "<config>".into(),
        message: format!("simulate: {e}"),
    })?;
    let spec = SimulationSpec {
        grid,
        warping: sim.warping.to_warping(),
        matern,
        noise_var: sim.noise_var,
        sample_size: sim.sample_size,
        seed,
    };
    let field = simulate_field(&spec)?;
    ensure_dir(out)?;
    let header = with_value_column(&names);
    let truth_path = out.join(GRID_TRUTH_FILE);
    write_table_file(&truth_path, &header, rows_of(&field.grid_points, field.truth.iter().copied()))?;
    let train_path = out.join(TRAIN_FILE);
    write_table_file(&train_path, &header, rows_of(&field.data.locations().to_owned(), field.data.values().iter().copied()))?;
    let test_points = field.grid_points.select(ndarray::Axis(0), &field.held_out);
    let test_path = out.join(TEST_FILE);
    write_table_file(&test_path, &header, rows_of(&test_points, field.held_out.iter().map(|&i| field.truth[i])))?;

    let n = field.truth.len() as f64;
    let mean = field.truth.sum() / n;
    let var = field.truth.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(SimulateReport {
        files: vec![truth_path, train_path, test_path],
        grid_size: field.truth.len(),
        train: field.training.len(),
        test: field.held_out.len(),
        truth_mean: mean,
        truth_var: var,
    })
}

pub struct FitReport {
    pub files: Vec<PathBuf>,
    pub model: String,
    pub n: usize,
    pub log_likelihood: f64,
    pub converged: bool,
    pub outer_iterations: usize,
    pub estimates: String,
}

impl fmt::Display for FitReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} fitted to {} observations", self.model, self.n)?;
        writeln!(
            f,
            "log-likelihood {} after {} outer iteration(s), {}",
            self.log_likelihood,
            self.outer_iterations,
            if self.converged { "converged" } else { "not converged" }
        )?;
        writeln!(f, "{}", self.estimates)?;
        for p in &self.files {
            writeln!(f, "wrote {}", p.display())?;
        }
        Ok(())
    }
}

fn nonstat_initial(data: &SpatialDataset, nodes: &[Vec<f64>], cov: CovarianceParams, bandwidth: Option<f64>) -> CliResult<NonstatParams> {
    let k = nodes.len();
    let node_array = Array2::from_shape_fn((k, data.dim()), |(i, j)| nodes[i][j]);
    let m = cov.matern;
    let lambda = 4.0 * m.smoothness * m.range * m.range;
    let bw = bandwidth.unwrap_or_else(|| (0.3 * data.bounding_diameter().max(1e-12)).powi(2));
    let config = NonstatMaternConfig::new(
        node_array,
        Array1::from_elem(k, m.scale),
        Array1::from_elem(k, lambda),
        Array1::from_elem(k, m.smoothness),
        bw,
    )
    .map_err(|e| CliError::Config { path: "<config>".into(), message: format!("nonstat: {e}") })?;
    Ok(NonstatParams { config, noise_sd: cov.noise_sd })
}

fn describe(model: &FittedModel) -> String {
    match model.matern() {
        Some(m) => format!(
            "scale {}, range {}, smoothness {}, noise sd {}",
            m.scale,
            m.range,
            m.smoothness,
            model.noise_sd()
        ),
        None => format!("noise sd {}", model.noise_sd()),
    }
}

pub fn cmd_fit(cfg: &RunConfig, seed: u64, train: &Path, out: &Path) -> CliResult<FitReport> {
    let raw = read_observations(train)?;
    let names = raw.axis_names().map(<[String]>::to_vec).unwrap_or_else(|| default_axis_names(raw.dim()));
    let (data, transform) = if cfg.model.standardize {
        let (locs, t) = standardize_named(raw.locations(), Some(&names))?;
        (SpatialDataset::new(locs, raw.values().to_owned())?, Some(t))
    } else {
        (raw.clone(), None)
    };
    let explicit = if cfg.initial.is_empty() { None } else { Some(cfg.initial.resolve(default_initial(&data)?)?) };
    let fit_cfg = cfg.fit.to_fit_config(seed, explicit)?;
    let (spec, architecture) = match cfg.model.kind {
        ModelName::Naf => {
            let flow = cfg.flow.to_flow_config(data.dim())?;
            (ModelSpec::Naf(flow.clone()), Architecture::Naf { flow })
        }
        ModelName::Stat => (ModelSpec::Stationary, Architecture::Stat),
        ModelName::Nonstat => {
            let nodes = cfg.nonstat.nodes_for(data.dim())?;
            let start = cfg.initial.resolve(default_initial(&data)?)?;
            let initial = nonstat_initial(&data, &nodes, start, cfg.nonstat.bandwidth)?;
            let node_array = initial.config.nodes.clone();
            (ModelSpec::Nonstationary { nodes: node_array, initial: Some(initial) }, Architecture::Nonstat { nodes })
        }
    };
    let model = fit(&data, &spec, &fit_cfg)?;

    ensure_dir(out)?;
    let archive = ModelArchive::from_model(&model, architecture, &raw, transform, names);
    let model_path = out.join(MODEL_FILE);
    archive.save(&model_path)?;
    let trace_path = out.join(TRACE_FILE);
    let mut buf = Vec::new();
    model.trace().write_csv(&mut buf).expect("writing to memory");
    std::fs::write(&trace_path, buf).map_err(|e| CliError::io(&trace_path, e))?;
    Ok(FitReport {
        files: vec![model_path, trace_path],
        model: model.kind().label().into(),
        n: data.len(),
        log_likelihood: model.log_likelihood(),
        converged: model.trace().converged,
        outer_iterations: model.trace().outer_iterations,
        estimates: describe(&model),
    })
}

pub struct PredictReport {
    pub file: PathBuf,
    pub targets: usize,
    pub kind: TargetKind,
    pub clamped: usize,
}

impl fmt::Display for PredictReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "predicted {} targets ({} level)", self.targets, self.kind.name())?;
        if self.clamped > 0 {
            writeln!(f, "warning: {} slightly negative kriging variances set to zero", self.clamped)?;
        }
        writeln!(f, "wrote {}", self.file.display())
    }
}

/// Where prediction targets come from.
pub enum Targets<'a> {
    File(&'a Path),
    Grid(Vec<AxisSpec>),
    Points(Array2<f64>),
}

fn read_targets(path: &Path, axis_names: &[String]) -> CliResult<Array2<f64>> {
    let table = read_table(path)?;
    let d = axis_names.len();
    if table.header.len() < d || table.header[..d] != *axis_names {
        return Err(CliError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected leading columns {}, found {}", axis_names.join(","), table.header.join(",")),
        });
    }
    Ok(table.leading_columns(d))
}

pub fn cmd_predict(model_path: &Path, targets: Targets<'_>, kind: TargetKind, out: &Path) -> CliResult<PredictReport> {
    let archive = ModelArchive::load(model_path)?;
    let model = archive.to_model()?;
    let raw_targets = match targets {
        Targets::File(p) => read_targets(p, &archive.axis_names)?,
        Targets::Grid(axes) => {
            if axes.len() != archive.dim() {
                return Err(CliError::Usage(format!("grid has {} axes, model has {}", axes.len(), archive.dim())));
            }
            grid_from_axes(&axes)?.points()
        }
        Targets::Points(points) => {
            if points.ncols() != archive.dim() {
                return Err(CliError::Usage(format!("targets have {} coordinates, model has {}", points.ncols(), archive.dim())));
            }
            points
        }
    };
    let model_targets = match &archive.standardization {
        Some(t) => t.apply(raw_targets.view())?,
        None => raw_targets.clone(),
    };
    let pred = krig(&model, model_targets.view(), kind)?;
    ensure_dir(out)?;
    let header: Vec<String> = archive.axis_names.iter().cloned().chain(PREDICTION_COLUMNS.map(String::from)).collect();
    let rows = (0..pred.len()).map(|i| {
        raw_targets
            .row(i)
            .iter()
            .copied()
            .chain([pred.mean[i], pred.std_error[i], pred.lower[i], pred.upper[i]])
            .collect::<Vec<f64>>()
    });
    let file = out.join(PREDICTIONS_FILE);
    write_table_file(&file, &header, rows)?;
    Ok(PredictReport { file, targets: pred.len(), kind, clamped: pred.clamped })
}

pub struct DiagnoseReport {
    pub file: PathBuf,
    pub report: ScoreReport,
}

impl fmt::Display for DiagnoseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut buf = Vec::new();
        write_score_table(&mut buf, std::slice::from_ref(&self.report)).expect("writing to memory");
        write!(f, "{}", String::from_utf8_lossy(&buf))?;
        writeln!(f, "wrote {}", self.file.display())
    }
}

fn column(table: &Table, name: &str, path: &Path) -> CliResult<Array1<f64>> {
    let j = table.column_index(name).ok_or_else(|| CliError::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: format!("missing column '{name}'"),
    })?;
    Ok(table.column(j))
}

pub fn cmd_diagnose(truth_path: &Path, predictions_path: &Path, label: &str, kind: TargetKind, out: &Path) -> CliResult<DiagnoseReport> {
    let truth = read_table(truth_path)?;
    let preds = read_table(predictions_path)?;
    if truth.header.len() < 2 {
        return Err(CliError::Parse { path: truth_path.to_path_buf(), line: 1, message: "need coordinates and a value column".into() });
    }
    let d = truth.header.len() - 1;
    if preds.header.len() != d + 4 || preds.header[..d] != truth.header[..d] {
        return Err(CliError::Parse {
            path: predictions_path.to_path_buf(),
            line: 1,
            message: format!(
                "expected columns {},{}",
                truth.header[..d].join(","),
                PREDICTION_COLUMNS.join(",")
            ),
        });
    }
    if truth.rows.len() != preds.rows.len() {
        return Err(CliError::Usage(format!(
            "{} truth rows but {} prediction rows",
            truth.rows.len(),
            preds.rows.len()
        )));
    }
    for (i, (t, p)) in truth.rows.iter().zip(&preds.rows).enumerate() {
        if t[..d] != p[..d] {
            return Err(CliError::Parse {
                path: predictions_path.to_path_buf(),
                line: preds.lines[i],
                message: format!("location does not match line {} of {}", truth.lines[i], truth_path.display()),
            });
        }
    }
    let report = score_arrays(
        truth.column(d).view(),
        column(&preds, "mean", predictions_path)?.view(),
        column(&preds, "lower", predictions_path)?.view(),
        column(&preds, "upper", predictions_path)?.view(),
        kind,
        label,
    )?;
    ensure_dir(out)?;
    let file = out.join(SCORES_FILE);
    let mut buf = Vec::new();
    write_score_table(&mut buf, std::slice::from_ref(&report)).expect("writing to memory");
    std::fs::write(&file, buf).map_err(|e| CliError::io(&file, e))?;
    Ok(DiagnoseReport { file, report })
}
