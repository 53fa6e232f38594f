//! TOML run configuration. Every key has a default; unknown keys are errors.

use std::path::{Path, PathBuf};

use nafgp::covariance::MaternParams;
use nafgp::fit::FitConfig;
use nafgp::flow::{DdsfShape, FlowConfig};
use nafgp::likelihood::CovarianceParams;
use nafgp::predict::TargetKind;
use nafgp::simulate::FixedWarping;
use nafgp::types::{make_grid, GridAxis, RegularGrid};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub model: ModelSection,
    pub flow: FlowSection,
    pub initial: InitialSection,
    pub nonstat: NonstatSection,
    pub fit: FitSection,
    pub simulate: SimulateSection,
    pub predict: PredictSection,
    pub data: DataSection,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelName {
    #[default]
    Naf,
    Stat,
    Nonstat,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelName,
    /// Min-max rescale each coordinate onto [0, 1] before fitting.
    pub standardize: bool,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub stages: usize,
    pub sublayers: usize,
    pub width: usize,
    pub hidden: Vec<usize>,
    pub init_scale: f64,
}

impl Default for FlowSection {
    fn default() -> Self {
        Self { stages: 2, sublayers: 5, width: 16, hidden: vec![100; 5], init_scale: 0.01 }
    }
}

impl FlowSection {
    pub fn to_flow_config(&self, dim: usize) -> CliResult<FlowConfig> {
        let shape = DdsfShape::uniform(self.sublayers, self.width).map_err(|e| config_error(format!("flow: {e}")))?;
        if self.stages == 0 {
            return Err(config_error("flow.stages must be at least 1"));
        }
        Ok(FlowConfig { dim, stages: self.stages, shape, hidden: self.hidden.clone(), init_scale: self.init_scale })
    }
}

/// Starting covariance parameters; any left out take the data-driven defaults.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialSection {
    pub scale: Option<f64>,
    pub range: Option<f64>,
    pub smoothness: Option<f64>,
    pub noise_sd: Option<f64>,
}

impl InitialSection {
    pub fn is_empty(&self) -> bool {
        self.scale.is_none() && self.range.is_none() && self.smoothness.is_none() && self.noise_sd.is_none()
    }

    pub fn resolve(&self, defaults: CovarianceParams) -> CliResult<CovarianceParams> {
        let m = defaults.matern;
        let matern = MaternParams::new(
            self.scale.unwrap_or(m.scale),
            self.range.unwrap_or(m.range),
            self.smoothness.unwrap_or(m.smoothness),
        )
        .map_err(|e| config_error(format!("initial: {e}")))?;
        CovarianceParams::new(matern, self.noise_sd.unwrap_or(defaults.noise_sd)).map_err(|e| config_error(format!("initial: {e}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonstatSection {
    /// Node locations in model coordinates; defaults depend on the dimension.
    pub nodes: Option<Vec<Vec<f64>>>,
    pub bandwidth: Option<f64>,
    /// Accepted for completeness. With Σ(s) = λ(s) I it has no effect.
    pub alpha: Option<f64>,
}

impl NonstatSection {
    pub fn nodes_for(&self, dim: usize) -> CliResult<Vec<Vec<f64>>> {
        let nodes = match (&self.nodes, dim) {
            (Some(n), _) => n.clone(),
            (None, 2) => vec![vec![-0.25, -0.25], vec![0.25, 0.25]],
            (None, 3) => vec![vec![0.25, 0.25, 0.25], vec![0.25, 0.75, 0.25], vec![0.75, 0.75, 0.75]],
            (None, d) => return Err(config_error(format!("nonstat.nodes has no default for d = {d}"))),
        };
        if nodes.is_empty() || nodes.iter().any(|n| n.len() != dim) {
            return Err(config_error(format!("nonstat.nodes must be a non-empty list of {dim}-vectors")));
        }
        Ok(nodes)
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub tolerance: f64,
    pub max_outer: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub max_halvings: usize,
    pub warm_start: bool,
}

impl Default for FitSection {
    fn default() -> Self {
        let d = FitConfig::default();
        Self {
            tolerance: d.tolerance,
            max_outer: d.max_outer,
            stage1_steps: d.stage1_steps,
            stage2_steps: d.stage2_steps,
            stage1_lr: d.stage1_lr,
            stage2_lr: d.stage2_lr,
            max_halvings: d.max_halvings,
            warm_start: d.warm_start,
        }
    }
}

impl FitSection {
    pub fn to_fit_config(&self, seed: u64, initial: Option<CovarianceParams>) -> CliResult<FitConfig> {
        let cfg = FitConfig {
            tolerance: self.tolerance,
            max_outer: self.max_outer,
            stage1_steps: self.stage1_steps,
            stage2_steps: self.stage2_steps,
            stage1_lr: self.stage1_lr,
            stage2_lr: self.stage2_lr,
            max_halvings: self.max_halvings,
            seed,
            initial,
            warm_start: self.warm_start,
        };
        cfg.validate().map_err(|e| config_error(format!("fit: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSpec {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

pub fn grid_from_axes(axes: &[AxisSpec]) -> CliResult<RegularGrid> {
    if axes.iter().any(|a| a.count == 0 || !(a.lo.is_finite() && a.hi.is_finite()) || (a.count > 1 && a.hi <= a.lo)) {
        return Err(config_error("grid axes need finite lo < hi and count ≥ 1"));
    }
    let axes: Vec<GridAxis> = axes.iter().map(|a| GridAxis::new(a.lo, a.hi, a.count)).collect();
    make_grid(&axes).map_err(|e| config_error(format!("grid: {e}")))
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WarpingSpec {
    Identity,
    Spiral {
        #[serde(default = "default_spiral_a")]
        a: f64,
        #[serde(default = "default_spiral_b")]
        b: f64,
    },
    AxisSinh {
        axis: usize,
        rate: f64,
        #[serde(default = "one")]
        scale: f64,
    },
    Compose { parts: Vec<WarpingSpec> },
}

fn default_spiral_a() -> f64 {
    2.0
}

fn default_spiral_b() -> f64 {
    4.0
}

fn one() -> f64 {
    1.0
}

impl Default for WarpingSpec {
    fn default() -> Self {
        WarpingSpec::Spiral { a: default_spiral_a(), b: default_spiral_b() }
    }
}

impl WarpingSpec {
    pub fn to_warping(&self) -> FixedWarping {
        match self {
            WarpingSpec::Identity => FixedWarping::Identity,
            WarpingSpec::Spiral { a, b } => FixedWarping::Spiral { a: *a, b: *b },
            WarpingSpec::AxisSinh { axis, rate, scale } => FixedWarping::AxisSinh { axis: *axis, rate: *rate, scale: *scale },
            WarpingSpec::Compose { parts } => FixedWarping::Compose(parts.iter().map(Self::to_warping).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub axes: Vec<AxisSpec>,
    pub axis_names: Option<Vec<String>>,
    pub warping: WarpingSpec,
    pub scale: f64,
    pub range: f64,
    pub smoothness: f64,
    pub noise_var: f64,
    pub sample_size: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        let axis = AxisSpec { lo: -0.5, hi: 0.5, count: 101 };
        Self {
            axes: vec![axis, axis],
            axis_names: None,
            warping: WarpingSpec::default(),
            scale: 1.0,
            range: 0.1,
            smoothness: 1.5,
            noise_var: 0.01,
            sample_size: 2000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    pub target_kind: TargetKindName,
    /// Predict on this grid when no targets file is given.
    pub grid: Option<Vec<AxisSpec>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKindName {
    #[default]
    Process,
    Data,
}

impl TargetKindName {
    pub fn kind(self) -> TargetKind {
        match self {
            TargetKindName::Process => TargetKind::Process,
            TargetKindName::Data => TargetKind::Data,
        }
    }
}

/// Input paths; command-line flags take precedence.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub targets: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
}

pub fn default_axis_names(dim: usize) -> Vec<String> {
    match dim {
        1 => vec!["x".into()],
        2 => vec!["x".into(), "y".into()],
        3 => vec!["x".into(), "y".into(), "z".into()],
        d => (1..=d).map(|k| format!("s{k}")).collect(),
    }
}

fn config_error(message: impl Into<String>) -> CliError {
    CliError::Config { path: PathBuf::from("<config>"), message: message.into() }
}

pub fn parse_config(text: &str, path: &Path) -> CliResult<RunConfig> {
    toml::from_str(text).map_err(|e| CliError::Config { path: path.to_path_buf(), message: e.to_string() })
}

pub fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config { path: p.to_path_buf(), message: e.to_string() })?;
            parse_config(&text, p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> CliResult<RunConfig> {
        parse_config(s, Path::new("test.toml"))
    }

    #[test]
    fn empty_config_gives_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.flow.hidden, vec![100; 5]);
        assert_eq!(c.simulate.sample_size, 2000);
        assert_eq!(c.simulate.warping, WarpingSpec::Spiral { a: 2.0, b: 4.0 });
        assert_eq!(c.fit.tolerance, 1e-3);
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = parse("seed = 1\nbogus = 2\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("bogus"));
        assert!(parse("[fit]\nmax_outer = 3\nlearning = 1\n").is_err());
        assert!(parse("[simulate.warping]\nkind = \"spiral\"\nc = 1.0\n").is_err());
    }

    #[test]
    fn sections_parse() {
        let c = parse(
            r#"
seed = 7
[model]
kind = "nonstat"
standardize = true
[nonstat]
nodes = [[0.1, 0.2], [0.3, 0.4]]
alpha = 2.0
[simulate]
axes = [{ lo = 0.0, hi = 1.0, count = 5 }, { lo = 0.0, hi = 1.0, count = 4 }]
warping = { kind = "compose", parts = [{ kind = "spiral", a = 1.0 }, { kind = "axis_sinh", axis = 1, rate = 2.0 }] }
[predict]
target_kind = "data"
"#,
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.model.kind, ModelName::Nonstat);
        assert_eq!(c.nonstat.nodes_for(2).unwrap().len(), 2);
        assert_eq!(
            c.simulate.warping.to_warping(),
            FixedWarping::Compose(vec![
                FixedWarping::Spiral { a: 1.0, b: 4.0 },
                FixedWarping::AxisSinh { axis: 1, rate: 2.0, scale: 1.0 }
            ])
        );
        assert_eq!(grid_from_axes(&c.simulate.axes).unwrap().len(), 20);
        assert_eq!(c.predict.target_kind.kind(), TargetKind::Data);
    }

    #[test]
    fn default_nodes_by_dimension() {
        let n = NonstatSection::default();
        assert_eq!(n.nodes_for(2).unwrap(), vec![vec![-0.25, -0.25], vec![0.25, 0.25]]);
        assert_eq!(n.nodes_for(3).unwrap().len(), 3);
        assert!(n.nodes_for(4).is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let c = parse("[fit]\ntolerance = -1.0\n").unwrap();
        assert_eq!(c.fit.to_fit_config(0, None).unwrap_err().exit_code(), 2);
        let c = parse("[flow]\nwidth = 0\n").unwrap();
        assert!(c.flow.to_flow_config(2).is_err());
    }
}
