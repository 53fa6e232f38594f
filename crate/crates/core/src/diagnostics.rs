//! Predictive scores against held-out truth.

use std::io::Write;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predict::{PredictionSet, TargetKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub label: String,
    pub kind: TargetKind,
    pub n: usize,
    pub mspe: f64,
    /// Fraction of truths inside the closed interval [L, U].
    pub picp: f64,
    pub mpiw: f64,
}

/// MSPE, PICP and MPIW of `preds` against `truth` (same order).
pub fn score(truth: ArrayView1<'_, f64>, preds: &PredictionSet, label: &str) -> Result<ScoreReport> {
    score_arrays(truth, preds.mean.view(), preds.lower.view(), preds.upper.view(), preds.kind, label)
}

pub fn score_arrays(
    truth: ArrayView1<'_, f64>,
    mean: ArrayView1<'_, f64>,
    lower: ArrayView1<'_, f64>,
    upper: ArrayView1<'_, f64>,
    kind: TargetKind,
    label: &str,
) -> Result<ScoreReport> {
    let n = truth.len();
    for len in [mean.len(), lower.len(), upper.len()] {
        if len != n {
            return Err(Error::DimensionMismatch { expected: n, got: len });
        }
    }
    if n == 0 {
        return Err(Error::InvalidInput("nothing to score".into()));
    }
    let mut sq = 0.0;
    let mut covered = 0usize;
    let mut width = 0.0;
    for i in 0..n {
        let e = truth[i] - mean[i];
        sq += e * e;
        if lower[i] <= truth[i] && truth[i] <= upper[i] {
            covered += 1;
        }
        width += upper[i] - lower[i];
    }
    let nf = n as f64;
    Ok(ScoreReport { label: label.to_string(), kind, n, mspe: sq / nf, picp: covered as f64 / nf, mpiw: width / nf })
}

/// `model,MSPE,PICP,MPIW` table.
pub fn write_score_table<W: Write>(mut out: W, reports: &[ScoreReport]) -> std::io::Result<()> {
    writeln!(out, "model,MSPE,PICP,MPIW")?;
    for r in reports {
        writeln!(out, "{},{},{},{}", r.label, r.mspe, r.picp, r.mpiw)?;
    }
    Ok(())
}
