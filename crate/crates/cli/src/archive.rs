//! Self-describing model archive (JSON).
//!
//! The archive holds everything prediction needs: architecture, the named
//! parameter vector, the exact covariance estimates, the coordinate
//! standardization, and the training data with a SHA-256 fingerprint.

use std::path::Path;

use ndarray::{Array1, Array2};
use nafgp::covariance::MaternParams;
use nafgp::fit::{FitTrace, FittedCovariance, FittedModel, TraceRow};
use nafgp::flow::{FlowConfig, TriangularMap};
use nafgp::likelihood::{CovarianceParams, NonstatParams};
use nafgp::params::ParameterSchema;
use nafgp::types::{SpatialDataset, StandardizationTransform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const ARCHIVE_FORMAT: &str = "nafgp-model";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Naf { flow: FlowConfig },
    Stat,
    Nonstat { nodes: Vec<Vec<f64>> },
}

/// Covariance estimates on their natural scale, so reloading does not pass
/// through a log/exp round trip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Estimates {
    Warped { matern: MaternParams, noise_sd: f64 },
    Nonstationary { params: NonstatParams },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingData {
    /// Raw (unstandardized) coordinates, one row per observation.
    pub locations: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub log_likelihood: f64,
    pub converged: bool,
    pub outer_iterations: usize,
    pub trace: Vec<TraceRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArchive {
    pub format: String,
    pub version: u32,
    pub model: String,
    pub architecture: Architecture,
    pub schema: ParameterSchema,
    pub parameters: Vec<f64>,
    pub estimates: Estimates,
    pub standardization: Option<StandardizationTransform>,
    pub axis_names: Vec<String>,
    pub training: TrainingData,
    pub fingerprint: String,
    pub fit: FitSummary,
}

/// SHA-256 over the shape and the little-endian bytes of the coordinates
/// (row-major) and values.
pub fn fingerprint(training: &TrainingData) -> String {
    let mut h = Sha256::new();
    let d = training.locations.first().map_or(0, Vec::len);
    h.update((training.values.len() as u64).to_le_bytes());
    h.update((d as u64).to_le_bytes());
    for row in &training.locations {
        for v in row {
            h.update(v.to_le_bytes());
        }
    }
    for v in &training.values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl ModelArchive {
    /// `raw` holds the original coordinates; the model was fitted on
    /// `standardization.apply(raw)` when a transform is present.
    pub fn from_model(
        model: &FittedModel,
        architecture: Architecture,
        raw: &SpatialDataset,
        standardization: Option<StandardizationTransform>,
        axis_names: Vec<String>,
    ) -> Self {
        let params = model.parameters();
        let estimates = match model.covariance() {
            FittedCovariance::Warped { params, .. } => Estimates::Warped { matern: params.matern, noise_sd: params.noise_sd },
            FittedCovariance::Nonstationary(p) => Estimates::Nonstationary { params: p.clone() },
        };
        let training = TrainingData {
            locations: raw.locations().rows().into_iter().map(|r| r.to_vec()).collect(),
            values: raw.values().to_vec(),
        };
        let trace = model.trace();
        Self {
            format: ARCHIVE_FORMAT.into(),
            version: ARCHIVE_VERSION,
            model: model.kind().label().into(),
            architecture,
            schema: params.schema().clone(),
            parameters: params.values().to_vec(),
            estimates,
            standardization,
            axis_names,
            fingerprint: fingerprint(&training),
            training,
            fit: FitSummary {
                log_likelihood: model.log_likelihood(),
                converged: trace.converged,
                outer_iterations: trace.outer_iterations,
                trace: trace.rows.clone(),
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("archive serializes")
    }

    pub fn from_json(text: &str, path: &Path) -> CliResult<Self> {
        let err = |message: String| CliError::Archive { path: path.to_path_buf(), message };
        // check the envelope first so a version mismatch is reported as such
        let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| err(format!("not valid JSON: {e}")))?;
        match raw.get("format").and_then(|v| v.as_str()) {
            Some(ARCHIVE_FORMAT) => {}
            other => return Err(err(format!("unknown format {other:?}, expected \"{ARCHIVE_FORMAT}\""))),
        }
        match raw.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == ARCHIVE_VERSION as u64 => {}
            Some(v) => return Err(err(format!("archive version {v} is not supported (this build reads version {ARCHIVE_VERSION})"))),
            None => return Err(err("missing archive version".into())),
        }
        let archive: Self = serde_json::from_value(raw).map_err(|e| err(format!("malformed archive: {e}")))?;
        if fingerprint(&archive.training) != archive.fingerprint {
            return Err(err("training data does not match its fingerprint".into()));
        }
        if archive.parameters.len() != archive.schema.len() {
            return Err(err(format!(
                "{} parameters for a schema of length {}",
                archive.parameters.len(),
                archive.schema.len()
            )));
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_json()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn dim(&self) -> usize {
        self.axis_names.len()
    }

    pub fn raw_training(&self) -> CliResult<SpatialDataset> {
        let n = self.training.values.len();
        let d = self.dim();
        if self.training.locations.iter().any(|r| r.len() != d) {
            return Err(self.error("training rows do not match the axis count"));
        }
        let locs = Array2::from_shape_fn((n, d), |(i, j)| self.training.locations[i][j]);
        Ok(SpatialDataset::new(locs, Array1::from(self.training.values.clone()))?.with_axis_names(self.axis_names.clone())?)
    }

    /// Training data in model coordinates.
    pub fn model_training(&self) -> CliResult<SpatialDataset> {
        let raw = self.raw_training()?;
        match &self.standardization {
            None => Ok(raw),
            Some(t) => Ok(SpatialDataset::new(t.apply(raw.locations())?, raw.values().to_owned())?),
        }
    }

    /// Rebuild the fitted model, including its factored covariance.
    pub fn to_model(&self) -> CliResult<FittedModel> {
        let data = self.model_training()?;
        let covariance = match (&self.architecture, &self.estimates) {
            (Architecture::Naf { flow }, Estimates::Warped { matern, noise_sd }) => {
                let mut map = TriangularMap::new(flow.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
                if map.schema() != self.flow_schema() {
                    return Err(self.error("flow parameter layout does not match the architecture"));
                }
                map.set_parameters(&self.parameters[..map.num_params()])?;
                FittedCovariance::Warped { map: Some(map), params: CovarianceParams::new(*matern, *noise_sd)? }
            }
            (Architecture::Stat, Estimates::Warped { matern, noise_sd }) => {
                FittedCovariance::Warped { map: None, params: CovarianceParams::new(*matern, *noise_sd)? }
            }
            (Architecture::Nonstat { nodes }, Estimates::Nonstationary { params }) => {
                let same = params.config.nodes.rows().into_iter().zip(nodes).all(|(a, b)| a.iter().eq(b.iter()));
                if params.config.num_nodes() != nodes.len() || !same {
                    return Err(self.error("node locations disagree with the architecture"));
                }
                params.config.validate()?;
                FittedCovariance::Nonstationary(params.clone())
            }
            _ => return Err(self.error("estimates do not match the architecture")),
        };
        let trace = FitTrace {
            rows: self.fit.trace.clone(),
            converged: self.fit.converged,
            outer_iterations: self.fit.outer_iterations,
        };
        Ok(FittedModel::from_parts(covariance, &data, trace)?)
    }

    fn flow_schema(&self) -> ParameterSchema {
        let mut s = ParameterSchema::new();
        for seg in self.schema.segments().iter().filter(|s| s.name.starts_with("flow.")) {
            s.push(seg.name.clone(), seg.len);
        }
        s
    }

    fn error(&self, message: &str) -> CliError {
        CliError::Archive { path: "<archive>".into(), message: message.into() }
    }
}
