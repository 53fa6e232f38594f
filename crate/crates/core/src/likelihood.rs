//! Gaussian log-likelihood of the warped and nonstationary models, with
//! gradients.
//!
//! ℓ = −N/2 log 2π − Σ log L_ii − ½‖L⁻¹Z‖² for K = L Lᵀ. With α = K⁻¹Z the
//! gradient with respect to any covariance entry is G = ½(ααᵀ − K⁻¹), which is
//! then chained through the kernel partials and, for the warped model,
//! through the warped coordinates into the flow.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::covariance::{
    kernel_weights_unchecked, nonstat_pair, nonstat_pair_partials, CovarianceMatrixBundle, LocalParams,
    MaternKernel, MaternParams, NonstatMaternConfig,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::flow::{MapCache, TriangularMap};
use crate::linalg::Cholesky;
use crate::params::{Objective, ParameterSchema};
use crate::types::SpatialDataset;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Matérn parameters and measurement-error standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceParams {
    pub matern: MaternParams,
    pub noise_sd: f64,
}

pub const COVARIANCE_SEGMENTS: [&str; 4] =
    ["covariance.log_scale", "covariance.log_range", "covariance.log_smoothness", "noise.log_sd"];

impl CovarianceParams {
    pub fn new(matern: MaternParams, noise_sd: f64) -> Result<Self> {
        matern.validate()?;
        // zero is allowed for noiseless kriging; fitting needs it positive
        if !(noise_sd >= 0.0) || !noise_sd.is_finite() {
            return Err(Error::InvalidParameter(format!("noise standard deviation must be ≥ 0, got {noise_sd}")));
        }
        Ok(Self { matern, noise_sd })
    }

    /// [ln φ₁, ln φ₂, ln ν, ln σ_ε].
    pub fn to_log(&self) -> [f64; 4] {
        [self.matern.scale.ln(), self.matern.range.ln(), self.matern.smoothness.ln(), self.noise_sd.ln()]
    }

    pub fn from_log(v: &[f64]) -> Result<Self> {
        if v.len() != 4 {
            return Err(Error::DimensionMismatch { expected: 4, got: v.len() });
        }
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { segment: COVARIANCE_SEGMENTS[i].into() });
        }
        let matern = MaternParams::new(v[0].exp(), v[1].exp(), v[2].exp())?;
        Self::new(matern, v[3].exp())
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_sd * self.noise_sd
    }
}

/// ℓ for observations `z` given the Cholesky factor of their covariance.
pub fn gaussian_log_likelihood(chol: &Cholesky, z: ArrayView1<'_, f64>) -> f64 {
    let n = z.len() as f64;
    let w = chol.solve_lower(z);
    let log_det_half: f64 = chol.l().diag().iter().map(|v| v.ln()).sum();
    -0.5 * n * LN_2PI - log_det_half - 0.5 * w.dot(&w)
}

/// ℓ(ϑ, φ, σ_ε; Z) for the warped model; `map = None` means no warping.
pub fn log_likelihood(data: &SpatialDataset, map: Option<&TriangularMap>, matern: &MaternParams, noise_sd: f64) -> Result<f64> {
    let cov = CovarianceParams::new(*matern, noise_sd)?;
    Ok(evaluate_warped(map, data.locations(), data.values(), &cov, false)?.value())
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Everything needed to report ℓ and, on request, its gradients.
pub struct WarpedEvaluation {
    value: f64,
    cov: CovarianceParams,
    kernel: MaternKernel,
    warped: Array2<f64>,
    /// dC/dh for every pair (zero on the diagonal).
    slopes: Array2<f64>,
    bundle: CovarianceMatrixBundle,
    alpha: Array1<f64>,
    cache: Option<MapCache>,
}

/// Assemble and factor K at the given parameters and evaluate ℓ. Keep the
/// flow cache when flow gradients will be requested.
pub fn evaluate_warped(
    map: Option<&TriangularMap>,
    locations: ArrayView2<'_, f64>,
    z: ArrayView1<'_, f64>,
    cov: &CovarianceParams,
    keep_flow_cache: bool,
) -> Result<WarpedEvaluation> {
    if z.len() != locations.nrows() {
        return Err(Error::DimensionMismatch { expected: locations.nrows(), got: z.len() });
    }
    let (warped, cache) = match map {
        Some(m) if keep_flow_cache => {
            let (w, c) = m.forward_cached(locations)?;
            (w, Some(c))
        }
        Some(m) => (m.forward_batch(locations)?, None),
        None => (locations.to_owned(), None),
    };
    if warped.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { segment: "flow".into() });
    }
    let kernel = MaternKernel::new(cov.matern);
    let n = warped.nrows();
    let rows = exec::map(n, |i| {
        (0..i)
            .map(|j| kernel.value_and_slope(sq_dist(warped.row(i), warped.row(j)).sqrt()))
            .collect::<Vec<_>>()
    });
    let mut k = Array2::zeros((n, n));
    let mut slopes = Array2::zeros((n, n));
    for (i, row) in rows.into_iter().enumerate() {
        k[[i, i]] = kernel.variance() + cov.noise_var();
        for (j, (c, dc)) in row.into_iter().enumerate() {
            k[[i, j]] = c;
            k[[j, i]] = c;
            slopes[[i, j]] = dc;
            slopes[[j, i]] = dc;
        }
    }
    let bundle = CovarianceMatrixBundle::factor(k, cov.noise_var(), kernel.variance())?;
    let chol = bundle.cholesky();
    let value = gaussian_log_likelihood(chol, z);
    if !value.is_finite() {
        return Err(Error::NonFinite { segment: "likelihood".into() });
    }
    let alpha = chol.solve(z);
    Ok(WarpedEvaluation { value, cov: *cov, kernel, warped, slopes, bundle, alpha, cache })
}

/// G = ½(ααᵀ − K⁻¹).
fn g_matrix(chol: &Cholesky, alpha: &Array1<f64>) -> Array2<f64> {
    let mut g = chol.inverse();
    let n = alpha.len();
    for i in 0..n {
        for j in 0..n {
            g[[i, j]] = 0.5 * (alpha[i] * alpha[j] - g[[i, j]]);
        }
    }
    g
}

impl WarpedEvaluation {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn warped(&self) -> ArrayView2<'_, f64> {
        self.warped.view()
    }

    pub fn bundle(&self) -> &CovarianceMatrixBundle {
        &self.bundle
    }

    pub fn alpha(&self) -> &Array1<f64> {
        &self.alpha
    }

    pub fn into_parts(self) -> (Array2<f64>, CovarianceMatrixBundle, Array1<f64>) {
        (self.warped, self.bundle, self.alpha)
    }

    /// dℓ/d(flow parameters) (if `flow`; needs the cache and a map) and
    /// dℓ/d[ln φ₁, ln φ₂, ln ν, ln σ_ε] (if `covariance`).
    pub fn gradients(
        &self,
        map: Option<&TriangularMap>,
        flow: bool,
        covariance: bool,
    ) -> Result<(Option<Vec<f64>>, Option<[f64; 4]>)> {
        let g = g_matrix(self.bundle.cholesky(), &self.alpha);
        let n = self.warped.nrows();

        let flow_grad = match (flow, map, &self.cache) {
            (false, _, _) | (_, None, _) => None,
            (true, Some(_), None) => {
                return Err(Error::InvalidInput("flow gradient requested without a forward cache".into()))
            }
            (true, Some(m), Some(cache)) => {
                // D_ij = 2 G_ij C'(h_ij) / h_ij; dℓ/dY_i = Σ_j D_ij (Y_i − Y_j)
                let rows = exec::map(n, |i| {
                    (0..n)
                        .map(|j| {
                            if i == j {
                                return 0.0;
                            }
                            let h = sq_dist(self.warped.row(i), self.warped.row(j)).sqrt();
                            if h > 0.0 { 2.0 * g[[i, j]] * self.slopes[[i, j]] / h } else { 0.0 }
                        })
                        .collect::<Vec<f64>>()
                });
                let d = Array2::from_shape_vec((n, n), rows.into_iter().flatten().collect()).expect("square");
                let row_sums = d.sum_axis(Axis(1));
                let mut gy = &self.warped * &row_sums.insert_axis(Axis(1));
                general_mat_mul(-1.0, &d, &self.warped, 1.0, &mut gy);
                let (gp, _) = m.backward(cache, gy.view());
                if let Some(p) = gp.iter().position(|v| !v.is_finite()) {
                    let schema = m.schema();
                    let seg = schema.segment_of(p).map(|s| s.name.clone()).unwrap_or_else(|| "flow".into());
                    return Err(Error::NonFinite { segment: seg });
                }
                Some(gp)
            }
        };

        let cov_grad = if covariance {
            let kernel = &self.kernel;
            let parts = exec::map(n, |i| {
                let mut acc = [0.0; 3];
                let k = self.bundle.matrix();
                for j in 0..i {
                    let h = sq_dist(self.warped.row(i), self.warped.row(j)).sqrt();
                    let w = 2.0 * g[[i, j]];
                    // value and slope were stored at assembly
                    acc[0] += w * 2.0 * k[[i, j]];
                    acc[1] += w * -h * self.slopes[[i, j]];
                    acc[2] += w * kernel.d_log_smoothness(h);
                }
                acc
            });
            let mut out = [0.0; 4];
            for acc in parts {
                for c in 0..3 {
                    out[c] += acc[c];
                }
            }
            let trace_g: f64 = g.diag().sum();
            out[0] += trace_g * 2.0 * kernel.variance();
            out[3] += trace_g * 2.0 * self.cov.noise_var();
            if let Some(c) = out.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { segment: COVARIANCE_SEGMENTS[c].into() });
            }
            Some(out)
        } else {
            None
        };
        Ok((flow_grad, cov_grad))
    }
}

/// ℓ of the warped model as a function of all parameters: the flow's
/// parameters followed by the four log covariance parameters.
pub struct WarpedGpObjective<'a> {
    map: Option<TriangularMap>,
    locations: ArrayView2<'a, f64>,
    values: ArrayView1<'a, f64>,
    schema: ParameterSchema,
}

impl<'a> WarpedGpObjective<'a> {
    pub fn new(map: Option<TriangularMap>, data: &'a SpatialDataset) -> Self {
        let mut schema = map.as_ref().map(|m| m.schema()).unwrap_or_default();
        for name in COVARIANCE_SEGMENTS {
            schema.push(name, 1);
        }
        Self { map, locations: data.locations(), values: data.values(), schema }
    }

    fn split(&self, params: &[f64]) -> Result<(Option<TriangularMap>, CovarianceParams)> {
        let nflow = self.map.as_ref().map_or(0, |m| m.num_params());
        let map = match &self.map {
            Some(m) => {
                let mut m = m.clone();
                m.set_parameters(&params[..nflow])?;
                Some(m)
            }
            None => None,
        };
        Ok((map, CovarianceParams::from_log(&params[nflow..])?))
    }
}

impl Objective for WarpedGpObjective<'_> {
    fn schema(&self) -> &ParameterSchema {
        &self.schema
    }

    fn evaluate(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (map, cov) = self.split(params)?;
        let eval = evaluate_warped(map.as_ref(), self.locations, self.values, &cov, true)?;
        let (gf, gc) = eval.gradients(map.as_ref(), true, true)?;
        let mut grad = gf.unwrap_or_default();
        grad.extend(gc.expect("requested"));
        Ok((eval.value(), grad))
    }

    fn value(&self, params: &[f64]) -> Result<f64> {
        let (map, cov) = self.split(params)?;
        Ok(evaluate_warped(map.as_ref(), self.locations, self.values, &cov, false)?.value())
    }
}

/// Node parameters of the nonstationary model plus the noise level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonstatParams {
    pub config: NonstatMaternConfig,
    pub noise_sd: f64,
}

impl NonstatParams {
    /// [ln σ_1..K, ln λ_1..K, ln ν_1..K, ln h, ln σ_ε].
    pub fn to_log(&self) -> Vec<f64> {
        let c = &self.config;
        c.sigma
            .iter()
            .chain(&c.lambda)
            .chain(&c.nu)
            .map(|v| v.ln())
            .chain([c.bandwidth.ln(), self.noise_sd.ln()])
            .collect()
    }

    pub fn from_log(nodes: &Array2<f64>, v: &[f64]) -> Result<Self> {
        let k = nodes.nrows();
        if v.len() != 3 * k + 2 {
            return Err(Error::DimensionMismatch { expected: 3 * k + 2, got: v.len() });
        }
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { segment: nonstat_segment_names(k)[i].clone() });
        }
        let e = |r: std::ops::Range<usize>| Array1::from_iter(v[r].iter().map(|x| x.exp()));
        let config = NonstatMaternConfig::new(nodes.clone(), e(0..k), e(k..2 * k), e(2 * k..3 * k), v[3 * k].exp())?;
        let noise_sd = v[3 * k + 1].exp();
        if !(noise_sd > 0.0) || !noise_sd.is_finite() {
            return Err(Error::InvalidParameter(format!("noise standard deviation must be positive, got {noise_sd}")));
        }
        Ok(Self { config, noise_sd })
    }

    pub fn schema(&self) -> ParameterSchema {
        let k = self.config.num_nodes();
        let mut s = ParameterSchema::new();
        s.push("nonstat.log_sigma", k);
        s.push("nonstat.log_lambda", k);
        s.push("nonstat.log_nu", k);
        s.push("nonstat.log_bandwidth", 1);
        s.push("noise.log_sd", 1);
        s
    }
}

fn nonstat_segment_names(k: usize) -> Vec<String> {
    let mut v = Vec::with_capacity(3 * k + 2);
    for name in ["nonstat.log_sigma", "nonstat.log_lambda", "nonstat.log_nu"] {
        v.extend(std::iter::repeat_n(name.to_string(), k));
    }
    v.push("nonstat.log_bandwidth".into());
    v.push("noise.log_sd".into());
    v
}

/// Factor, ℓ and (optionally) the log-parameter gradient of the nonstationary model.
pub struct NonstatEvaluation {
    pub value: f64,
    pub bundle: CovarianceMatrixBundle,
    pub alpha: Array1<f64>,
    pub gradient: Option<Vec<f64>>,
}

pub fn evaluate_nonstat(
    locations: ArrayView2<'_, f64>,
    z: ArrayView1<'_, f64>,
    params: &NonstatParams,
    want_gradient: bool,
) -> Result<NonstatEvaluation> {
    let cfg = &params.config;
    cfg.validate()?;
    let (n, d) = locations.dim();
    if d != cfg.dim() {
        return Err(Error::DimensionMismatch { expected: cfg.dim(), got: d });
    }
    if z.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: z.len() });
    }
    let weights: Vec<Array1<f64>> = locations.rows().into_iter().map(|s| kernel_weights_unchecked(s, cfg)).collect();
    let local: Vec<LocalParams> = weights
        .iter()
        .map(|w| LocalParams { sigma: w.dot(&cfg.sigma), lambda: w.dot(&cfg.lambda), nu: w.dot(&cfg.nu) })
        .collect();
    let rows = exec::map(n, |i| {
        (0..i)
            .map(|j| nonstat_pair(local[i], local[j], sq_dist(locations.row(i), locations.row(j)), d))
            .collect::<Vec<_>>()
    });
    let noise_var = params.noise_sd * params.noise_sd;
    let mut k = Array2::zeros((n, n));
    for (i, row) in rows.into_iter().enumerate() {
        k[[i, i]] = local[i].sigma * local[i].sigma + noise_var;
        for (j, v) in row.into_iter().enumerate() {
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    let scale = cfg.sigma.iter().fold(0.0f64, |m, s| m.max(s * s));
    let bundle = CovarianceMatrixBundle::factor(k, noise_var, scale)?;
    let value = gaussian_log_likelihood(bundle.cholesky(), z);
    if !value.is_finite() {
        return Err(Error::NonFinite { segment: "likelihood".into() });
    }
    let alpha = bundle.cholesky().solve(z);
    let gradient = if want_gradient {
        let g = g_matrix(bundle.cholesky(), &alpha);
        // dℓ/d(σ_i, λ_i, ν_i) = 2 Σ_j G_ij ∂C_ij/∂(own parameters of site i)
        let site = exec::map(n, |i| {
            let mut acc = [0.0; 3];
            for j in 0..n {
                let p = nonstat_pair_partials(local[i], local[j], sq_dist(locations.row(i), locations.row(j)), d);
                for c in 0..3 {
                    acc[c] += 2.0 * g[[i, j]] * p.d_a[c];
                }
            }
            acc
        });
        let kn = cfg.num_nodes();
        let h = cfg.bandwidth;
        let mut grad = vec![0.0; 3 * kn + 2];
        for (i, gs) in site.iter().enumerate() {
            let w = &weights[i];
            let d2: Vec<f64> = cfg.nodes.rows().into_iter().map(|node| sq_dist(locations.row(i), node)).collect();
            let mean_d2: f64 = w.iter().zip(&d2).map(|(a, b)| a * b).sum();
            for kk in 0..kn {
                grad[kk] += gs[0] * w[kk] * cfg.sigma[kk];
                grad[kn + kk] += gs[1] * w[kk] * cfg.lambda[kk];
                grad[2 * kn + kk] += gs[2] * w[kk] * cfg.nu[kk];
                // h ∂W_ik/∂h = W_ik (D_ik − D̄_i) / (2h)
                let dw = w[kk] * (d2[kk] - mean_d2) / (2.0 * h);
                grad[3 * kn] += dw * (gs[0] * cfg.sigma[kk] + gs[1] * cfg.lambda[kk] + gs[2] * cfg.nu[kk]);
            }
        }
        grad[3 * kn + 1] = g.diag().sum() * 2.0 * noise_var;
        if let Some(p) = grad.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { segment: nonstat_segment_names(kn)[p].clone() });
        }
        Some(grad)
    } else {
        None
    };
    Ok(NonstatEvaluation { value, bundle, alpha, gradient })
}

/// ℓ of the nonstationary model over its log parameters.
pub struct NonstatObjective<'a> {
    nodes: Array2<f64>,
    locations: ArrayView2<'a, f64>,
    values: ArrayView1<'a, f64>,
    schema: ParameterSchema,
}

impl<'a> NonstatObjective<'a> {
    pub fn new(template: &NonstatParams, data: &'a SpatialDataset) -> Self {
        Self {
            nodes: template.config.nodes.clone(),
            locations: data.locations(),
            values: data.values(),
            schema: template.schema(),
        }
    }
}

impl Objective for NonstatObjective<'_> {
    fn schema(&self) -> &ParameterSchema {
        &self.schema
    }

    fn evaluate(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let p = NonstatParams::from_log(&self.nodes, params)?;
        let e = evaluate_nonstat(self.locations, self.values, &p, true)?;
        Ok((e.value, e.gradient.expect("requested")))
    }

    fn value(&self, params: &[f64]) -> Result<f64> {
        let p = NonstatParams::from_log(&self.nodes, params)?;
        Ok(evaluate_nonstat(self.locations, self.values, &p, false)?.value)
    }
}
