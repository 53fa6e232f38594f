//! Simple kriging at new locations.

use std::io::Write;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::FittedModel;
use crate::types::RegularGrid;

/// Standard-normal 97.5% quantile used for the 95% intervals.
pub const INTERVAL_MULTIPLIER: f64 = 1.96;

/// Variances in `[-VARIANCE_CLAMP, 0)` are treated as cancellation noise.
pub const VARIANCE_CLAMP: f64 = 1e-10;

const BATCH: usize = 1024;

/// Whether intervals cover the latent process Y or the noisy data Z.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetKind {
    Process,
    Data,
}

impl TargetKind {
    pub fn name(&self) -> &'static str {
        match self {
            TargetKind::Process => "process",
            TargetKind::Data => "data",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub locations: Array2<f64>,
    pub mean: Array1<f64>,
    pub variance: Array1<f64>,
    pub std_error: Array1<f64>,
    pub lower: Array1<f64>,
    pub upper: Array1<f64>,
    pub kind: TargetKind,
    /// Number of slightly negative variances that were set to zero.
    pub clamped: usize,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// One row per target: coordinates, mean, std_error, lower, upper.
    pub fn write_csv<W: Write>(&self, mut out: W, axis_names: &[String]) -> std::io::Result<()> {
        let header: Vec<&str> = axis_names
            .iter()
            .map(String::as_str)
            .chain(["mean", "std_error", "lower", "upper"])
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut fields: Vec<String> = self.locations.row(i).iter().map(|v| v.to_string()).collect();
            fields.extend([self.mean[i], self.std_error[i], self.lower[i], self.upper[i]].iter().map(|v| v.to_string()));
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

/// Kriging mean k′K⁻¹Z and variance C(s₀,s₀) − k′K⁻¹k at each row of `targets`,
/// plus σ̂_ε² for [`TargetKind::Data`].
pub fn krig(model: &FittedModel, targets: ArrayView2<'_, f64>, kind: TargetKind) -> Result<PredictionSet> {
    if targets.ncols() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: targets.ncols() });
    }
    let m = targets.nrows();
    let mut mean = Array1::zeros(m);
    let mut variance = Array1::zeros(m);
    let noise = model.noise_sd() * model.noise_sd();
    let mut clamped = 0;
    for start in (0..m).step_by(BATCH) {
        let end = (start + BATCH).min(m);
        let block = targets.slice(s![start..end, ..]);
        let k = model.cross_covariance(block)?;
        let mu = k.dot(model.alpha());
        let v = model.cholesky().solve_lower_rows(k.view());
        let explained = v.map_axis(Axis(1), |r| r.dot(&r));
        let prior = model.prior_variance(block);
        for (i, idx) in (start..end).enumerate() {
            let mut var = prior[i] - explained[i];
            if var < 0.0 {
                if var < -VARIANCE_CLAMP {
                    return Err(Error::Domain(format!(
                        "kriging variance {var} at target {idx} is negative beyond roundoff"
                    )));
                }
                clamped += 1;
                var = 0.0;
            }
            if kind == TargetKind::Data {
                var += noise;
            }
            mean[idx] = mu[i];
            variance[idx] = var;
        }
    }
    let std_error = variance.mapv(f64::sqrt);
    let lower = &mean - &(INTERVAL_MULTIPLIER * &std_error);
    let upper = &mean + &(INTERVAL_MULTIPLIER * &std_error);
    Ok(PredictionSet { locations: targets.to_owned(), mean, variance, std_error, lower, upper, kind, clamped })
}

/// [`krig`] over every grid node, in the grid's row-major order.
pub fn batch_krig_grid(model: &FittedModel, grid: &RegularGrid, kind: TargetKind) -> Result<PredictionSet> {
    krig(model, grid.points().view(), kind)
}
