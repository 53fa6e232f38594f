//! Maximum-likelihood fitting.
//!
//! The warped model alternates two ascent phases per outer iteration: flow
//! parameters with the covariance held fixed, then the log covariance and
//! noise parameters with the flow held fixed. The loop stops once an outer
//! iteration moves the log covariance parameters by less than the tolerance
//! (Euclidean norm), or after `max_outer` iterations. The stationary model
//! runs only the covariance phase; the nonstationary baseline runs the same
//! phase over its node parameters.
//!
//! Each phase takes Adam steps and accepts a step only if ℓ does not
//! decrease. A rejected step is retried with half the step size and, since
//! stale momentum need not point uphill, with freshly reset moments. The step
//! size doubles back toward its base value after each first-try acceptance.
//! A phase ends after its step budget or after too many consecutive
//! rejections, so ℓ is non-decreasing along the whole trace.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::{cross_covariance_warped, nonstat_cross, MaternKernel, MaternParams, NonstatMaternConfig};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, TriangularMap};
use crate::likelihood::{
    evaluate_nonstat, evaluate_warped, CovarianceParams, NonstatEvaluation, NonstatParams, WarpedEvaluation, COVARIANCE_SEGMENTS,
};
use crate::linalg::Cholesky;
use crate::params::{ParameterSchema, ParameterVector};
use crate::types::SpatialDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Convergence threshold ψ on the change of the log covariance parameters.
    pub tolerance: f64,
    pub max_outer: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    /// Consecutive rejected (halved) steps after which a phase ends.
    pub max_halvings: usize,
    /// Seeds the flow initialization.
    pub seed: u64,
    /// Starting covariance parameters; derived from the data when absent.
    pub initial: Option<CovarianceParams>,
    /// Start the warped fit from a stationary fit's estimates (same budgets)
    /// when no explicit initial values are given.
    pub warm_start: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-3,
            max_outer: 50,
            stage1_steps: 200,
            stage2_steps: 200,
            stage1_lr: 1e-3,
            stage2_lr: 1e-2,
            max_halvings: 10,
            seed: 0,
            initial: None,
            warm_start: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) || !self.tolerance.is_finite() {
            return Err(Error::InvalidInput(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if self.max_outer == 0 {
            return Err(Error::InvalidInput("max_outer must be at least 1".into()));
        }
        for (name, lr) in [("stage1_lr", self.stage1_lr), ("stage2_lr", self.stage2_lr)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {lr}")));
            }
        }
        Ok(())
    }
}

/// Which model family to fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ModelSpec {
    /// Flow-warped Matérn.
    Naf(FlowConfig),
    /// Unwarped Matérn.
    Stationary,
    /// Kernel-smoothed nonstationary Matérn with the given K×d nodes.
    Nonstationary { nodes: Array2<f64>, initial: Option<NonstatParams> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Naf,
    Stationary,
    Nonstationary,
}

impl ModelKind {
    pub fn label(&self) -> &'static str {
        match self {
            ModelKind::Naf => "GP_NAF",
            ModelKind::Stationary => "GP_stat",
            ModelKind::Nonstationary => "GP_nonstat",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Initial,
    Flow,
    Covariance,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Initial => "initial",
            Stage::Flow => "flow",
            Stage::Covariance => "covariance",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub stage: Stage,
    pub log_likelihood: f64,
    /// Norm of the change in log covariance parameters over this stage.
    pub delta_norm: f64,
    pub accepted_steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub rows: Vec<TraceRow>,
    pub converged: bool,
    pub outer_iterations: usize,
}

impl FitTrace {
    /// `iteration,stage,log_likelihood,delta_norm` rows with a header.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "iteration,stage,log_likelihood,delta_norm")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.iteration, r.stage.name(), r.log_likelihood, r.delta_norm)?;
        }
        Ok(())
    }

    /// Largest decrease of ℓ between consecutive rows (0 if monotone).
    pub fn max_decrease(&self) -> f64 {
        self.rows
            .windows(2)
            .map(|w| w[0].log_likelihood - w[1].log_likelihood)
            .fold(0.0, f64::max)
    }
}

/// Covariance structure of a fitted model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FittedCovariance {
    Warped { map: Option<TriangularMap>, params: CovarianceParams },
    Nonstationary(NonstatParams),
}

/// Estimates together with the factored training covariance.
#[derive(Clone, Debug)]
pub struct FittedModel {
    covariance: FittedCovariance,
    locations: Array2<f64>,
    values: Array1<f64>,
    /// T(s_i) for the warped models, s_i for the nonstationary one.
    model_locations: Array2<f64>,
    chol: Cholesky,
    alpha: Array1<f64>,
    log_likelihood: f64,
    trace: FitTrace,
}

impl FittedModel {
    /// Rebuild the factored model from parameter estimates and the training data.
    pub fn from_parts(covariance: FittedCovariance, data: &SpatialDataset, trace: FitTrace) -> Result<Self> {
        match &covariance {
            FittedCovariance::Warped { map, params } => {
                let eval = evaluate_warped(map.as_ref(), data.locations(), data.values(), params, false)?;
                Ok(Self::from_warped(covariance.clone(), data, eval, trace))
            }
            FittedCovariance::Nonstationary(p) => {
                let e = evaluate_nonstat(data.locations(), data.values(), p, false)?;
                Ok(Self {
                    covariance,
                    locations: data.locations().to_owned(),
                    values: data.values().to_owned(),
                    model_locations: data.locations().to_owned(),
                    chol: e.bundle.cholesky().clone(),
                    alpha: e.alpha,
                    log_likelihood: e.value,
                    trace,
                })
            }
        }
    }

    fn from_warped(covariance: FittedCovariance, data: &SpatialDataset, eval: WarpedEvaluation, trace: FitTrace) -> Self {
        let value = eval.value();
        let (warped, bundle, alpha) = eval.into_parts();
        Self {
            covariance,
            locations: data.locations().to_owned(),
            values: data.values().to_owned(),
            model_locations: warped,
            chol: bundle.cholesky().clone(),
            alpha,
            log_likelihood: value,
            trace,
        }
    }

    pub fn kind(&self) -> ModelKind {
        match &self.covariance {
            FittedCovariance::Warped { map: Some(_), .. } => ModelKind::Naf,
            FittedCovariance::Warped { map: None, .. } => ModelKind::Stationary,
            FittedCovariance::Nonstationary(_) => ModelKind::Nonstationary,
        }
    }

    pub fn covariance(&self) -> &FittedCovariance {
        &self.covariance
    }

    pub fn map(&self) -> Option<&TriangularMap> {
        match &self.covariance {
            FittedCovariance::Warped { map, .. } => map.as_ref(),
            FittedCovariance::Nonstationary(_) => None,
        }
    }

    pub fn matern(&self) -> Option<MaternParams> {
        match &self.covariance {
            FittedCovariance::Warped { params, .. } => Some(params.matern),
            FittedCovariance::Nonstationary(_) => None,
        }
    }

    pub fn noise_sd(&self) -> f64 {
        match &self.covariance {
            FittedCovariance::Warped { params, .. } => params.noise_sd,
            FittedCovariance::Nonstationary(p) => p.noise_sd,
        }
    }

    pub fn dim(&self) -> usize {
        self.locations.ncols()
    }

    pub fn locations(&self) -> ArrayView2<'_, f64> {
        self.locations.view()
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn cholesky(&self) -> &Cholesky {
        &self.chol
    }

    pub fn alpha(&self) -> &Array1<f64> {
        &self.alpha
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    pub fn trace(&self) -> &FitTrace {
        &self.trace
    }

    /// All estimated parameters as one named vector (internal log scale for
    /// covariance parameters).
    pub fn parameters(&self) -> ParameterVector {
        match &self.covariance {
            FittedCovariance::Warped { map, params } => warped_vector(map.as_ref(), params),
            FittedCovariance::Nonstationary(p) => ParameterVector::new(p.schema(), p.to_log()).expect("schema"),
        }
    }

    /// Cross-covariance between `targets` (rows) and the training sites.
    pub fn cross_covariance(&self, targets: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if targets.ncols() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: targets.ncols() });
        }
        match &self.covariance {
            FittedCovariance::Warped { map, params } => {
                let t = match map {
                    Some(m) => m.forward_batch(targets)?,
                    None => targets.to_owned(),
                };
                Ok(cross_covariance_warped(t.view(), self.model_locations.view(), &MaternKernel::new(params.matern)))
            }
            FittedCovariance::Nonstationary(p) => Ok(nonstat_cross(targets, self.model_locations.view(), &p.config)),
        }
    }

    /// Process variance C(s₀, s₀) at each target.
    pub fn prior_variance(&self, targets: ArrayView2<'_, f64>) -> Array1<f64> {
        match &self.covariance {
            FittedCovariance::Warped { params, .. } => Array1::from_elem(targets.nrows(), params.matern.variance()),
            FittedCovariance::Nonstationary(p) => targets
                .rows()
                .into_iter()
                .map(|s| {
                    let sigma = p.config.local_params(s).sigma;
                    sigma * sigma
                })
                .collect(),
        }
    }
}

fn warped_vector(map: Option<&TriangularMap>, params: &CovarianceParams) -> ParameterVector {
    let mut schema = map.map(|m| m.schema()).unwrap_or_else(ParameterSchema::new);
    let mut values = map.map(|m| m.parameters().into_values()).unwrap_or_default();
    for name in COVARIANCE_SEGMENTS {
        schema.push(name, 1);
    }
    values.extend(params.to_log());
    ParameterVector::new(schema, values).expect("schema")
}

fn sample_std(v: ndarray::ArrayView1<'_, f64>) -> f64 {
    let n = v.len() as f64;
    let mean = v.sum() / n;
    let ss: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum();
    if v.len() > 1 { (ss / (n - 1.0)).sqrt() } else { 0.0 }
}

/// φ⁽⁰⁾ = (std Z, 0.2 · bounding-box diameter, 1.5) and σ_ε⁽⁰⁾ = 0.1 · std Z.
pub fn default_initial(data: &SpatialDataset) -> Result<CovarianceParams> {
    let sd = sample_std(data.values());
    let sd = if sd > 0.0 { sd } else { 1.0 };
    let diam = data.bounding_diameter();
    let diam = if diam > 0.0 { diam } else { 1.0 };
    CovarianceParams::new(MaternParams::new(sd, 0.2 * diam, 1.5)?, 0.1 * sd)
}

/// Starting values for the nonstationary model: every node at the stationary
/// defaults (λ matching the default range), bandwidth (0.3 · diameter)².
pub fn default_nonstat_initial(data: &SpatialDataset, nodes: Array2<f64>) -> Result<NonstatParams> {
    let base = default_initial(data)?;
    let nu = base.matern.smoothness;
    let lambda = 4.0 * nu * base.matern.range * base.matern.range;
    let k = nodes.nrows();
    let diam = data.bounding_diameter().max(1e-12);
    let config = NonstatMaternConfig::new(
        nodes,
        Array1::from_elem(k, base.matern.scale),
        Array1::from_elem(k, lambda),
        Array1::from_elem(k, nu),
        (0.3 * diam).powi(2),
    )?;
    Ok(NonstatParams { config, noise_sd: base.noise_sd })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Update the moments with gradient `g`; returns the bias-corrected direction.
    fn direction(&mut self, g: &[f64]) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        self.m
            .iter_mut()
            .zip(&mut self.v)
            .zip(g)
            .map(|((m, v), &gi)| {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * gi;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * gi * gi;
                (*m / c1) / ((*v / c2).sqrt() + Self::EPS)
            })
            .collect()
    }
}

/// One ascent phase over `x`. `prepare` evaluates ℓ at a point (errors count
/// as rejections); `gradient` is only called for accepted points.
struct Phase<'a, S> {
    prepare: Box<dyn Fn(&[f64]) -> Result<S> + 'a>,
    value: fn(&S) -> f64,
    gradient: Box<dyn Fn(&S) -> Result<Vec<f64>> + 'a>,
}

fn ascend<S>(phase: &Phase<'_, S>, x: &mut Vec<f64>, state: &mut S, steps: usize, lr0: f64, max_halvings: usize) -> Result<usize> {
    if steps == 0 {
        return Ok(0);
    }
    let mut adam = Adam::new(x.len());
    let mut lr = lr0;
    let mut g = (phase.gradient)(state)?;
    let mut accepted = 0;
    for _ in 0..steps {
        let mut dir = adam.direction(&g);
        let current = (phase.value)(state);
        let mut rejections = 0;
        loop {
            let proposal: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + lr * di).collect();
            let ok = match (phase.prepare)(&proposal) {
                Ok(s) if (phase.value)(&s) >= current => Some(s),
                _ => None,
            };
            if let Some(s) = ok {
                *x = proposal;
                *state = s;
                accepted += 1;
                if rejections == 0 {
                    lr = (2.0 * lr).min(lr0);
                }
                break;
            }
            rejections += 1;
            if rejections > max_halvings {
                return Ok(accepted);
            }
            lr *= 0.5;
            if rejections == 1 {
                // stale momentum need not point uphill; restart from the current gradient
                adam = Adam::new(x.len());
                dir = adam.direction(&g);
            }
        }
        g = (phase.gradient)(state)?;
    }
    Ok(accepted)
}

fn fit_failed(iteration: usize, last_good: ParameterVector, source: Error) -> Error {
    Error::FitFailed { iteration, last_good: Box::new(last_good), source: Box::new(source) }
}

/// Fit a warped (or unwarped) Matérn model by block-coordinate ascent.
pub fn fit(data: &SpatialDataset, spec: &ModelSpec, cfg: &FitConfig) -> Result<FittedModel> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::InvalidInput("fitting needs at least two observations".into()));
    }
    let flow_cfg = match spec {
        ModelSpec::Naf(f) => Some(f.clone()),
        ModelSpec::Stationary => None,
        ModelSpec::Nonstationary { nodes, initial } => {
            let init = match initial {
                Some(p) => p.clone(),
                None => default_nonstat_initial(data, nodes.clone())?,
            };
            return fit_nonstat(data, init, cfg);
        }
    };
    let mut map = match flow_cfg {
        Some(mut f) => {
            if f.dim != data.dim() {
                f.dim = data.dim();
            }
            Some(TriangularMap::new(f, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?)
        }
        None => None,
    };
    let mut cov = match cfg.initial {
        Some(c) => c,
        None if cfg.warm_start && map.is_some() => {
            let stat = fit(data, &ModelSpec::Stationary, &FitConfig { warm_start: false, ..cfg.clone() })?;
            CovarianceParams::new(stat.matern().expect("stationary"), stat.noise_sd())?
        }
        None => default_initial(data)?,
    };
    if cov.noise_sd == 0.0 {
        return Err(Error::InvalidParameter("the fit works on ln σ_ε, so the initial noise sd must be positive".into()));
    }
    let (locs, z) = (data.locations(), data.values());

    let mut eval = evaluate_warped(map.as_ref(), locs, z, &cov, map.is_some())
        .map_err(|e| fit_failed(0, warped_vector(map.as_ref(), &cov), e))?;
    let mut trace = FitTrace::default();
    trace.rows.push(TraceRow {
        iteration: 0,
        stage: Stage::Initial,
        log_likelihood: eval.value(),
        delta_norm: 0.0,
        accepted_steps: 0,
    });

    for t in 1..=cfg.max_outer {
        trace.outer_iterations = t;
        if let Some(current_map) = map.as_ref().filter(|_| cfg.stage1_steps > 0) {
            let template = current_map.clone();
            let cov_fixed = cov;
            let phase = Phase {
                prepare: Box::new(|theta: &[f64]| {
                    let mut m = template.clone();
                    m.set_parameters(theta)?;
                    let e = evaluate_warped(Some(&m), locs, z, &cov_fixed, true)?;
                    Ok((m, e))
                }),
                value: |s: &(TriangularMap, WarpedEvaluation)| s.1.value(),
                gradient: Box::new(|s: &(TriangularMap, WarpedEvaluation)| {
                    Ok(s.1.gradients(Some(&s.0), true, false)?.0.expect("flow gradient"))
                }),
            };
            let mut theta = current_map.parameters().into_values();
            let mut state = (current_map.clone(), eval);
            let accepted = ascend(&phase, &mut theta, &mut state, cfg.stage1_steps, cfg.stage1_lr, cfg.max_halvings)
                .map_err(|e| fit_failed(t, warped_vector(Some(&state.0), &cov), e))?;
            let (m, e) = state;
            map = Some(m);
            eval = e;
            trace.rows.push(TraceRow {
                iteration: t,
                stage: Stage::Flow,
                log_likelihood: eval.value(),
                delta_norm: 0.0,
                accepted_steps: accepted,
            });
        }

        let before = cov.to_log();
        let map_fixed = map.as_ref();
        let phase = Phase {
            prepare: Box::new(|lp: &[f64]| {
                let c = CovarianceParams::from_log(lp)?;
                evaluate_warped(map_fixed, locs, z, &c, false)
            }),
            value: WarpedEvaluation::value,
            gradient: Box::new(|s: &WarpedEvaluation| Ok(s.gradients(None, false, true)?.1.expect("covariance gradient").to_vec())),
        };
        let mut lp = before.to_vec();
        let accepted = ascend(&phase, &mut lp, &mut eval, cfg.stage2_steps, cfg.stage2_lr, cfg.max_halvings)
            .map_err(|e| fit_failed(t, warped_vector(map.as_ref(), &cov), e))?;
        if accepted > 0 {
            cov = CovarianceParams::from_log(&lp)?;
        }
        let delta = lp.iter().zip(&before).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        trace.rows.push(TraceRow {
            iteration: t,
            stage: Stage::Covariance,
            log_likelihood: eval.value(),
            delta_norm: delta,
            accepted_steps: accepted,
        });
        if delta < cfg.tolerance {
            trace.converged = true;
            break;
        }
        // the flow phase needs the forward cache at the current point
        if map.is_some() && t < cfg.max_outer {
            eval = evaluate_warped(map.as_ref(), locs, z, &cov, true).map_err(|e| fit_failed(t, warped_vector(map.as_ref(), &cov), e))?;
        }
    }
    let covariance = FittedCovariance::Warped { map, params: cov };
    Ok(FittedModel::from_warped(covariance, data, eval, trace))
}

/// Maximum-likelihood fit of the nonstationary baseline over node σ, λ, ν,
/// the bandwidth, and the noise level.
pub fn fit_nonstat(data: &SpatialDataset, initial: NonstatParams, cfg: &FitConfig) -> Result<FittedModel> {
    cfg.validate()?;
    if initial.config.dim() != data.dim() {
        return Err(Error::DimensionMismatch { expected: data.dim(), got: initial.config.dim() });
    }
    let nodes = initial.config.nodes.clone();
    let (locs, z) = (data.locations(), data.values());
    let as_vector = |p: &[f64]| ParameterVector::new(initial.schema(), p.to_vec()).expect("schema");
    let mut lp = initial.to_log();
    let first = evaluate_nonstat(locs, z, &initial, false).map_err(|e| fit_failed(0, as_vector(&lp), e))?;
    let mut trace = FitTrace::default();
    trace.rows.push(TraceRow {
        iteration: 0,
        stage: Stage::Initial,
        log_likelihood: first.value,
        delta_norm: 0.0,
        accepted_steps: 0,
    });
    let phase = Phase {
        prepare: Box::new(|v: &[f64]| {
            let p = NonstatParams::from_log(&nodes, v)?;
            Ok((p.clone(), evaluate_nonstat(locs, z, &p, false)?))
        }),
        value: |s: &(NonstatParams, NonstatEvaluation)| s.1.value,
        gradient: Box::new(|s: &(NonstatParams, NonstatEvaluation)| {
            Ok(evaluate_nonstat(locs, z, &s.0, true)?.gradient.expect("requested"))
        }),
    };
    let mut current = (initial.clone(), first);
    for t in 1..=cfg.max_outer {
        trace.outer_iterations = t;
        let before = lp.clone();
        let accepted = ascend(&phase, &mut lp, &mut current, cfg.stage2_steps, cfg.stage2_lr, cfg.max_halvings)
            .map_err(|e| fit_failed(t, as_vector(&lp), e))?;
        let delta = lp.iter().zip(&before).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        trace.rows.push(TraceRow {
            iteration: t,
            stage: Stage::Covariance,
            log_likelihood: current.1.value,
            delta_norm: delta,
            accepted_steps: accepted,
        });
        if delta < cfg.tolerance {
            trace.converged = true;
            break;
        }
    }
    let (params, e) = current;
    Ok(FittedModel {
        covariance: FittedCovariance::Nonstationary(params),
        locations: data.locations().to_owned(),
        values: data.values().to_owned(),
        model_locations: data.locations().to_owned(),
        chol: e.bundle.cholesky().clone(),
        alpha: e.alpha,
        log_likelihood: e.value,
        trace,
    })
}
