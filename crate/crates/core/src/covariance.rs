//! Matérn covariance on the warped domain and the kernel-smoothed
//! nonstationary Matérn.
//!
//! Parameterization: C(h) = φ₁² · 2^{1−ν}/Γ(ν) · x^ν K_ν(x) with x = h/φ₂.
//! There is no √(2ν) factor on the range, so ν = 1/2 gives φ₁² e^{−h/φ₂} and
//! ν = 3/2 gives φ₁² (1 + h/φ₂) e^{−h/φ₂}. Other libraries often scale the
//! range differently; convert before comparing fitted φ₂ values.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::bessel::{k_pair, k_unchecked};
use crate::error::{Error, Result};
use crate::exec;
use crate::flow::TriangularMap;
use crate::linalg::Cholesky;

/// Beyond this scaled distance x^ν K_ν(x) is below 1e-280 for every ν ≤ 20.
const X_CUTOFF: f64 = 700.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaternParams {
    /// Marginal standard deviation φ₁.
    pub scale: f64,
    /// Range φ₂.
    pub range: f64,
    /// Smoothness φ₃ = ν.
    pub smoothness: f64,
}

impl MaternParams {
    pub fn new(scale: f64, range: f64, smoothness: f64) -> Result<Self> {
        let p = Self { scale, range, smoothness };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("scale", self.scale), ("range", self.range), ("smoothness", self.smoothness)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("Matérn {name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    pub fn variance(&self) -> f64 {
        self.scale * self.scale
    }
}

/// 2^{1−ν} / Γ(ν).
fn matern_norm(nu: f64) -> f64 {
    ((1.0 - nu) * std::f64::consts::LN_2 - libm::lgamma(nu)).exp()
}

/// Matérn correlation ρ_ν(x) = 2^{1−ν}/Γ(ν) x^ν K_ν(x), with ρ(0) = 1.
fn correlation_with_norm(nu: f64, norm: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x > X_CUTOFF {
        return 0.0;
    }
    let k = k_unchecked(nu, x);
    if !k.is_finite() {
        // x is so small relative to ν that K_ν overflows; ρ is 1 to working precision
        return 1.0;
    }
    (norm * x.powf(nu) * k).min(1.0)
}

pub fn matern_correlation(nu: f64, x: f64) -> f64 {
    correlation_with_norm(nu, matern_norm(nu), x)
}

/// (K_{ν−1}(x), K_ν(x)).
fn k_lower_pair(nu: f64, x: f64) -> (f64, f64) {
    if nu >= 1.0 {
        k_pair(nu - 1.0, x)
    } else {
        (k_pair(1.0 - nu, x).0, k_pair(nu, x).0)
    }
}

/// Value of C(h) and its partial derivatives.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MaternPartials {
    pub value: f64,
    pub d_h: f64,
    pub d_log_scale: f64,
    pub d_log_range: f64,
    pub d_log_smoothness: f64,
}

/// Stationary Matérn with its normalizing constant cached.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaternKernel {
    params: MaternParams,
    norm: f64,
    variance: f64,
}

impl MaternKernel {
    pub fn new(params: MaternParams) -> Self {
        Self { params, norm: matern_norm(params.smoothness), variance: params.variance() }
    }

    pub fn params(&self) -> MaternParams {
        self.params
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn value(&self, h: f64) -> f64 {
        self.variance * correlation_with_norm(self.params.smoothness, self.norm, h / self.params.range)
    }

    /// (C(h), dC/dh) sharing one Bessel evaluation where possible.
    pub fn value_and_slope(&self, h: f64) -> (f64, f64) {
        let nu = self.params.smoothness;
        let x = h / self.params.range;
        if x <= 0.0 {
            return (self.variance, 0.0);
        }
        if x > X_CUTOFF {
            return (0.0, 0.0);
        }
        let (k_lo, k) = k_lower_pair(nu, x);
        if !k.is_finite() {
            return (self.variance, 0.0);
        }
        let xn = self.norm * x.powf(nu);
        let value = self.variance * (xn * k).min(1.0);
        let slope = -self.variance * xn * k_lo / self.params.range;
        (value, if slope.is_finite() { slope } else { 0.0 })
    }

    /// ∂C/∂ log ν at distance h, by central difference in ν.
    pub fn d_log_smoothness(&self, h: f64) -> f64 {
        let nu = self.params.smoothness;
        let x = h / self.params.range;
        let step = 1e-5 * nu.max(1.0);
        let up = matern_correlation(nu + step, x);
        let down = matern_correlation(nu - step, x);
        self.variance * nu * (up - down) / (2.0 * step)
    }

    /// C(h) and its derivatives in h, log φ₁, log φ₂, log ν. The smoothness
    /// derivative is a central difference in ν; the others are analytic.
    pub fn partials(&self, h: f64) -> MaternPartials {
        let nu = self.params.smoothness;
        let x = h / self.params.range;
        let value = self.value(h);
        let d_log_smoothness = self.d_log_smoothness(h);
        if x <= 0.0 || x > X_CUTOFF {
            return MaternPartials { value, d_h: 0.0, d_log_scale: 2.0 * value, d_log_range: 0.0, d_log_smoothness };
        }
        let (k_lo, _) = k_lower_pair(nu, x);
        // ρ'(x) = −norm · x^ν K_{ν−1}(x)
        let t = self.norm * x.powf(nu) * k_lo;
        let (d_h, d_log_range) = if t.is_finite() {
            (-self.variance * t / self.params.range, self.variance * t * x)
        } else {
            (0.0, 0.0)
        };
        MaternPartials { value, d_h, d_log_scale: 2.0 * value, d_log_range, d_log_smoothness }
    }
}

pub fn matern(h: f64, params: &MaternParams) -> f64 {
    MaternKernel::new(*params).value(h)
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Matrix of pairwise Euclidean distances between rows.
pub fn pairwise_distances(points: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = points.nrows();
    let rows = exec::map(n, |i| (0..i).map(|j| sq_dist(points.row(i), points.row(j)).sqrt()).collect::<Vec<_>>());
    let mut out = Array2::zeros((n, n));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
    }
    out
}

/// Stationary Matérn matrix on `points` with `nugget` added to the diagonal.
pub fn matern_matrix(points: ArrayView2<'_, f64>, kernel: &MaternKernel, nugget: f64) -> Array2<f64> {
    let n = points.nrows();
    let rows = exec::map(n, |i| {
        (0..i)
            .map(|j| kernel.value(sq_dist(points.row(i), points.row(j)).sqrt()))
            .collect::<Vec<_>>()
    });
    let mut out = Array2::zeros((n, n));
    for (i, row) in rows.into_iter().enumerate() {
        out[[i, i]] = kernel.variance() + nugget;
        for (j, v) in row.into_iter().enumerate() {
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
    }
    out
}

/// A covariance matrix together with its Cholesky factor.
#[derive(Clone, Debug)]
pub struct CovarianceMatrixBundle {
    matrix: Array2<f64>,
    nugget: f64,
    jitter: f64,
    cholesky: Cholesky,
}

impl CovarianceMatrixBundle {
    /// Factor `matrix`, adding diagonal jitter 1e-10·v, 1e-9·v, …, 1e-4·v
    /// (v = `variance`) until the factorization succeeds.
    pub fn factor(mut matrix: Array2<f64>, nugget: f64, variance: f64) -> Result<Self> {
        let n = matrix.nrows();
        let mut jitter = 0.0;
        let mut next = 1e-10 * variance;
        loop {
            match Cholesky::factor(matrix.clone()) {
                Ok(cholesky) => return Ok(Self { matrix, nugget, jitter, cholesky }),
                Err(e) => {
                    if next > 1e-4 * variance * (1.0 + 1e-9) || !next.is_finite() || next <= 0.0 {
                        let diag = matrix.diag();
                        return Err(Error::NotPositiveDefinite {
                            order: n,
                            pivot: e.pivot,
                            jitter,
                            min_diag: diag.iter().cloned().fold(f64::INFINITY, f64::min),
                            max_diag: diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                        });
                    }
                    for i in 0..n {
                        matrix[[i, i]] += next - jitter;
                    }
                    jitter = next;
                    next *= 10.0;
                }
            }
        }
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.matrix.view()
    }

    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    /// Extra diagonal added to make the factorization succeed (zero if none).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn cholesky(&self) -> &Cholesky {
        &self.cholesky
    }
}

/// K_ij = C(‖T(s_i) − T(s_j)‖) + σ_ε² δ_ij, factored.
pub fn assemble_warped_k(
    map: &TriangularMap,
    locations: ArrayView2<'_, f64>,
    params: &MaternParams,
    noise_var: f64,
) -> Result<CovarianceMatrixBundle> {
    params.validate()?;
    if !(noise_var >= 0.0) || !noise_var.is_finite() {
        return Err(Error::InvalidParameter(format!("noise variance must be ≥ 0, got {noise_var}")));
    }
    let warped = map.forward_batch(locations)?;
    let kernel = MaternKernel::new(*params);
    let k = matern_matrix(warped.view(), &kernel, noise_var);
    CovarianceMatrixBundle::factor(k, noise_var, kernel.variance())
}

/// Cross-covariance between already-warped targets (rows) and observations (columns).
pub fn cross_covariance_warped(
    targets: ArrayView2<'_, f64>,
    observations: ArrayView2<'_, f64>,
    kernel: &MaternKernel,
) -> Array2<f64> {
    let n0 = targets.nrows();
    let n = observations.nrows();
    let rows = exec::map(n0, |r| {
        (0..n)
            .map(|j| kernel.value(sq_dist(targets.row(r), observations.row(j)).sqrt()))
            .collect::<Vec<_>>()
    });
    Array2::from_shape_vec((n0, n), rows.into_iter().flatten().collect()).expect("shape")
}

/// n₀×N matrix of C(‖T(s₀) − T(s_j)‖); no nugget.
pub fn cross_covariance(
    map: &TriangularMap,
    targets: ArrayView2<'_, f64>,
    observations: ArrayView2<'_, f64>,
    params: &MaternParams,
) -> Result<Array2<f64>> {
    params.validate()?;
    let t = map.forward_batch(targets)?;
    let o = map.forward_batch(observations)?;
    Ok(cross_covariance_warped(t.view(), o.view(), &MaternKernel::new(*params)))
}

/// Nonstationary Matérn with node parameters smoothed by a Gaussian kernel.
///
/// Each node carries (σ, λ, ν); the local anisotropy matrix is λ·I, so the
/// shape exponent of the full construction has no effect and is not stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonstatMaternConfig {
    /// K×d node locations.
    pub nodes: Array2<f64>,
    pub sigma: Array1<f64>,
    pub lambda: Array1<f64>,
    pub nu: Array1<f64>,
    /// Squared-exponential bandwidth h.
    pub bandwidth: f64,
}

/// Smoothed (σ, λ, ν) at one location.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalParams {
    pub sigma: f64,
    pub lambda: f64,
    pub nu: f64,
}

impl NonstatMaternConfig {
    pub fn new(nodes: Array2<f64>, sigma: Array1<f64>, lambda: Array1<f64>, nu: Array1<f64>, bandwidth: f64) -> Result<Self> {
        let cfg = Self { nodes, sigma, lambda, nu, bandwidth };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same (σ, λ, ν) at every node.
    pub fn uniform(nodes: Array2<f64>, local: LocalParams, bandwidth: f64) -> Result<Self> {
        let k = nodes.nrows();
        Self::new(
            nodes,
            Array1::from_elem(k, local.sigma),
            Array1::from_elem(k, local.lambda),
            Array1::from_elem(k, local.nu),
            bandwidth,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.nodes.nrows();
        if k == 0 {
            return Err(Error::InvalidParameter("nonstationary Matérn needs at least one node".into()));
        }
        for (name, v) in [("sigma", &self.sigma), ("lambda", &self.lambda), ("nu", &self.nu)] {
            if v.len() != k {
                return Err(Error::DimensionMismatch { expected: k, got: v.len() });
            }
            if let Some(bad) = v.iter().find(|x| !(**x > 0.0) || !x.is_finite()) {
                return Err(Error::InvalidParameter(format!("node {name} must be positive, got {bad}")));
            }
        }
        if !(self.bandwidth > 0.0) || !self.bandwidth.is_finite() {
            return Err(Error::InvalidParameter(format!("bandwidth must be positive, got {}", self.bandwidth)));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.nodes.ncols()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.nrows()
    }

    /// Smoothed parameters at `s`.
    pub fn local_params(&self, s: ArrayView1<'_, f64>) -> LocalParams {
        let w = kernel_weights_unchecked(s, self);
        LocalParams { sigma: w.dot(&self.sigma), lambda: w.dot(&self.lambda), nu: w.dot(&self.nu) }
    }
}

/// Normalized squared-exponential weights of `s` against every node. If every
/// kernel value underflows, all weight goes to the nearest node.
pub fn kernel_weights(s: ArrayView1<'_, f64>, cfg: &NonstatMaternConfig) -> Result<Array1<f64>> {
    cfg.validate()?;
    if s.len() != cfg.dim() {
        return Err(Error::DimensionMismatch { expected: cfg.dim(), got: s.len() });
    }
    Ok(kernel_weights_unchecked(s, cfg))
}

pub(crate) fn kernel_weights_unchecked(s: ArrayView1<'_, f64>, cfg: &NonstatMaternConfig) -> Array1<f64> {
    let d2: Array1<f64> = cfg.nodes.rows().into_iter().map(|node| sq_dist(s, node)).collect();
    let mut w = d2.mapv(|d| (-d / (2.0 * cfg.bandwidth)).exp());
    let total = w.sum();
    if total > 0.0 && total.is_finite() {
        w /= total;
    } else {
        let nearest = d2
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (k, &d)| if d < best.1 { (k, d) } else { best })
            .0;
        w.fill(0.0);
        w[nearest] = 1.0;
    }
    w
}

/// Γ(ν)2^{ν−1} normalized Matérn term (2√(νQ))^ν K_ν(2√(νQ)) / (Γ(ν)2^{ν−1}).
fn nonstat_shape(nu: f64, q: f64) -> f64 {
    matern_correlation(nu, 2.0 * (nu * q).sqrt())
}

/// C^NS between two sites given their smoothed parameters and squared
/// distance, in dimension `d`.
pub fn nonstat_pair(a: LocalParams, b: LocalParams, dist2: f64, d: usize) -> f64 {
    let df = d as f64;
    let mid = 0.5 * (a.lambda + b.lambda);
    let prefactor = a.sigma * b.sigma * (a.lambda * b.lambda).powf(df / 4.0) * mid.powf(-df / 2.0);
    prefactor * nonstat_shape(0.5 * (a.nu + b.nu), dist2 / mid)
}

/// Derivatives of [`nonstat_pair`] with respect to each site's (σ, λ, ν).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NonstatPairPartials {
    pub value: f64,
    pub d_a: [f64; 3],
    pub d_b: [f64; 3],
}

pub fn nonstat_pair_partials(a: LocalParams, b: LocalParams, dist2: f64, d: usize) -> NonstatPairPartials {
    let df = d as f64;
    let value = nonstat_pair(a, b, dist2, d);
    let mid = 0.5 * (a.lambda + b.lambda);
    let nu_bar = 0.5 * (a.nu + b.nu);
    let q = dist2 / mid;
    let y = 2.0 * (nu_bar * q).sqrt();
    // y · K_{ν−1}(y)/K_ν(y), which vanishes as y → 0
    let ratio_term = if y > 0.0 && y <= X_CUTOFF {
        let (k_lo, k) = k_lower_pair(nu_bar, y);
        if k > 0.0 && k.is_finite() && k_lo.is_finite() { y * k_lo / k } else { 0.0 }
    } else if y > X_CUTOFF {
        // K_{ν−1}/K_ν → 1 for large y
        y
    } else {
        0.0
    };
    let d_lambda = |own: f64| value * (df / (4.0 * own) - df / (4.0 * mid) + ratio_term / (4.0 * mid));
    let d_nu = {
        let step = 1e-5 * nu_bar.max(1.0);
        let prefactor = a.sigma * b.sigma * (a.lambda * b.lambda).powf(df / 4.0) * mid.powf(-df / 2.0);
        let slope = (nonstat_shape(nu_bar + step, q) - nonstat_shape(nu_bar - step, q)) / (2.0 * step);
        0.5 * prefactor * slope
    };
    NonstatPairPartials {
        value,
        d_a: [value / a.sigma, d_lambda(a.lambda), d_nu],
        d_b: [value / b.sigma, d_lambda(b.lambda), d_nu],
    }
}

/// C^NS(s_i, s_j).
pub fn nonstat_matern(si: ArrayView1<'_, f64>, sj: ArrayView1<'_, f64>, cfg: &NonstatMaternConfig) -> Result<f64> {
    cfg.validate()?;
    if si.len() != cfg.dim() || sj.len() != cfg.dim() {
        return Err(Error::DimensionMismatch { expected: cfg.dim(), got: si.len().min(sj.len()) });
    }
    let a = cfg.local_params(si);
    let b = cfg.local_params(sj);
    Ok(nonstat_pair(a, b, sq_dist(si, sj), cfg.dim()))
}

/// Nonstationary covariance between two location sets (no nugget).
pub fn nonstat_cross(targets: ArrayView2<'_, f64>, observations: ArrayView2<'_, f64>, cfg: &NonstatMaternConfig) -> Array2<f64> {
    let pa: Vec<LocalParams> = targets.rows().into_iter().map(|s| cfg.local_params(s)).collect();
    let pb: Vec<LocalParams> = observations.rows().into_iter().map(|s| cfg.local_params(s)).collect();
    let d = cfg.dim();
    let rows = exec::map(targets.nrows(), |r| {
        (0..observations.nrows())
            .map(|j| nonstat_pair(pa[r], pb[j], sq_dist(targets.row(r), observations.row(j)), d))
            .collect::<Vec<_>>()
    });
    Array2::from_shape_vec((targets.nrows(), observations.nrows()), rows.into_iter().flatten().collect()).expect("shape")
}

/// Nonstationary covariance matrix on `locations` plus `nugget` on the diagonal.
pub fn nonstat_matrix(locations: ArrayView2<'_, f64>, cfg: &NonstatMaternConfig, nugget: f64) -> Result<Array2<f64>> {
    cfg.validate()?;
    if locations.ncols() != cfg.dim() {
        return Err(Error::DimensionMismatch { expected: cfg.dim(), got: locations.ncols() });
    }
    let mut k = nonstat_cross(locations, locations, cfg);
    let n = k.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (k[[i, j]] + k[[j, i]]);
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
        k[[i, i]] += nugget;
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_lag_is_variance() {
        let p = MaternParams::new(1.7, 0.3, 2.2).unwrap();
        assert_eq!(matern(0.0, &p), 1.7 * 1.7);
    }

    #[test]
    fn half_integer_closed_forms() {
        let (s, r): (f64, f64) = (1.3, 0.7);
        for h in [0.1f64, 1.0, 5.0] {
            let exp = s * s * (-h / r).exp();
            assert!((matern(h, &MaternParams::new(s, r, 0.5).unwrap()) - exp).abs() < 1e-10);
            let x: f64 = h / r;
            let m32 = s * s * (1.0 + x) * (-x).exp();
            assert!((matern(h, &MaternParams::new(s, r, 1.5).unwrap()) - m32).abs() < 1e-10);
        }
    }

    #[test]
    fn continuity_at_zero() {
        for nu in [0.5, 1.0, 1.5, 3.0] {
            let p = MaternParams::new(2.0, 0.5, nu).unwrap();
            assert!(matern(0.0, &p) - matern(1e-12, &p) < 1e-8 * 4.0, "nu={nu}");
        }
    }

    #[test]
    fn partials_match_differences() {
        let base = MaternParams::new(1.2, 0.4, 1.3).unwrap();
        let k = MaternKernel::new(base);
        for h in [0.05, 0.3, 1.1] {
            let p = k.partials(h);
            let e = 1e-6;
            let fd_h = (matern(h + e, &base) - matern(h - e, &base)) / (2.0 * e);
            assert!((p.d_h - fd_h).abs() < 1e-7, "{} {}", p.d_h, fd_h);
            let scaled = |dr: f64| MaternParams { range: base.range * dr.exp(), ..base };
            let fd_r = (matern(h, &scaled(e)) - matern(h, &scaled(-e))) / (2.0 * e);
            assert!((p.d_log_range - fd_r).abs() < 1e-7);
            let smooth = |dn: f64| MaternParams { smoothness: base.smoothness * dn.exp(), ..base };
            let fd_n = (matern(h, &smooth(e)) - matern(h, &smooth(-e))) / (2.0 * e);
            assert!((p.d_log_smoothness - fd_n).abs() < 1e-7);
            assert!((p.d_log_scale - 2.0 * p.value).abs() < 1e-15);
        }
        // ν < 1 uses K_{1−ν}
        let k = MaternKernel::new(MaternParams::new(1.0, 1.0, 0.7).unwrap());
        let fd = (k.value(0.5 + 1e-6) - k.value(0.5 - 1e-6)) / 2e-6;
        assert!((k.partials(0.5).d_h - fd).abs() < 1e-7);
    }

    fn random_points(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matrix_matches_double_loop() {
        let pts = random_points(50, 2, 3);
        let p = MaternParams::new(0.9, 0.25, 1.1).unwrap();
        let k = matern_matrix(pts.view(), &MaternKernel::new(p), 0.01);
        for i in 0..50 {
            for j in 0..50 {
                let h = (0..2).map(|c| (pts[[i, c]] - pts[[j, c]]).powi(2)).sum::<f64>().sqrt();
                let expect = matern(h, &p) + if i == j { 0.01 } else { 0.0 };
                assert!((k[[i, j]] - expect).abs() < 1e-14);
            }
        }
        let two = matern_matrix(pts.slice(ndarray::s![..2, ..]), &MaternKernel::new(p), 0.3);
        assert!((two[[0, 0]] - (0.81 + 0.3)).abs() < 1e-15);
        assert!((two[[1, 1]] - (0.81 + 0.3)).abs() < 1e-15);
    }

    #[test]
    fn jitter_rescues_coincident_points() {
        let pts = ndarray::array![[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]];
        let p = MaternParams::new(1.0, 1.0, 2.5).unwrap();
        let k = matern_matrix(pts.view(), &MaternKernel::new(p), 0.0);
        let b = CovarianceMatrixBundle::factor(k, 0.0, 1.0).unwrap();
        assert!(b.jitter() > 0.0 && b.jitter() <= 1e-4);
    }

    #[test]
    fn hopeless_matrix_reports_diagnostics() {
        let k = ndarray::array![[1.0, 2.0], [2.0, 1.0]];
        match CovarianceMatrixBundle::factor(k, 0.0, 1.0).unwrap_err() {
            Error::NotPositiveDefinite { order, pivot, jitter, .. } => {
                assert_eq!((order, pivot), (2, 1));
                assert!((jitter - 1e-4).abs() < 1e-12);
            }
            e => panic!("{e:?}"),
        }
    }

    fn two_node_config() -> NonstatMaternConfig {
        NonstatMaternConfig::new(
            ndarray::array![[-0.25, -0.25], [0.25, 0.25]],
            ndarray::array![1.0, 2.0],
            ndarray::array![0.05, 0.2],
            ndarray::array![0.8, 2.0],
            0.1,
        )
        .unwrap()
    }

    #[test]
    fn weights() {
        let cfg = two_node_config();
        let w = kernel_weights(ndarray::array![0.0, 0.0].view(), &cfg).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);

        let one = NonstatMaternConfig::uniform(
            ndarray::array![[0.3, 0.3]],
            LocalParams { sigma: 1.0, lambda: 0.1, nu: 1.0 },
            0.05,
        )
        .unwrap();
        assert_eq!(kernel_weights(ndarray::array![-0.4, 0.9].view(), &one).unwrap(), ndarray::array![1.0]);

        // far away from every node: all exponentials underflow
        let w = kernel_weights(ndarray::array![1e3, 1e3].view(), &cfg).unwrap();
        assert_eq!(w, ndarray::array![0.0, 1.0]);

        let cfg3 = NonstatMaternConfig::new(
            ndarray::array![[0.0, 0.1], [0.5, -0.2], [-0.3, 0.4]],
            ndarray::array![1.0, 1.0, 1.0],
            ndarray::array![1.0, 1.0, 1.0],
            ndarray::array![1.0, 1.0, 1.0],
            0.07,
        )
        .unwrap();
        let s = ndarray::array![0.12, -0.31];
        let raw: Vec<f64> = cfg3
            .nodes
            .rows()
            .into_iter()
            .map(|n| (-((s[0] - n[0]).powi(2) + (s[1] - n[1]).powi(2)) / 0.14).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        let w = kernel_weights(s.view(), &cfg3).unwrap();
        for k in 0..3 {
            assert!((w[k] - raw[k] / total).abs() < 1e-15);
        }
    }

    #[test]
    fn nonstat_variance_identity() {
        let cfg = two_node_config();
        let s = ndarray::array![0.1, -0.2];
        let sigma = cfg.local_params(s.view()).sigma;
        let v = nonstat_matern(s.view(), s.view(), &cfg).unwrap();
        assert!((v - sigma * sigma).abs() < 1e-14);
    }

    /// Direct transcription of the anisotropic form with full matrices, used as an oracle.
    fn direct_nonstat(si: &[f64], sj: &[f64], cfg: &NonstatMaternConfig) -> f64 {
        let local = |s: &[f64]| {
            let e: Vec<f64> = cfg
                .nodes
                .rows()
                .into_iter()
                .map(|n| (-(n.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()) / (2.0 * cfg.bandwidth)).exp())
                .collect();
            let t: f64 = e.iter().sum();
            let avg = |v: &Array1<f64>| e.iter().zip(v).map(|(w, x)| w * x).sum::<f64>() / t;
            (avg(&cfg.sigma), avg(&cfg.lambda), avg(&cfg.nu))
        };
        let (s1, l1, n1) = local(si);
        let (s2, l2, n2) = local(sj);
        let d = si.len();
        // determinants of λI and of the average matrix
        let det1 = l1.powi(d as i32);
        let det2 = l2.powi(d as i32);
        let avg = (l1 + l2) / 2.0;
        let det_avg = avg.powi(d as i32);
        let q: f64 = si.iter().zip(sj).map(|(a, b)| (a - b) * (a - b) / avg).sum();
        let nu = (n1 + n2) / 2.0;
        let arg = 2.0 * (nu * q).sqrt();
        let shape = if arg == 0.0 {
            1.0
        } else {
            arg.powf(nu) * crate::bessel::bessel_k(nu, arg).unwrap() / (libm::tgamma(nu) * 2f64.powf(nu - 1.0))
        };
        s1 * s2 * det1.powf(0.25) * det2.powf(0.25) * det_avg.powf(-0.5) * shape
    }

    #[test]
    fn nonstat_matches_direct_evaluation() {
        let cfg = two_node_config();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let a = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
            let b = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
            let got = nonstat_matern(ndarray::aview1(&a), ndarray::aview1(&b), &cfg).unwrap();
            let want = direct_nonstat(&a, &b, &cfg);
            assert!((got - want).abs() < 1e-12 * want.abs().max(1e-300), "{got} {want}");
        }
    }

    #[test]
    fn stationary_reduction() {
        let local = LocalParams { sigma: 1.4, lambda: 0.09, nu: 1.7 };
        let stat = MaternParams::new(local.sigma, local.lambda.sqrt() / (2.0 * local.nu.sqrt()), local.nu).unwrap();
        let pts = random_points(50, 2, 5);
        let kstat = matern_matrix(pts.view(), &MaternKernel::new(stat), 0.0);
        for k in 1..=3 {
            let nodes = random_points(k, 2, 100 + k as u64);
            let cfg = NonstatMaternConfig::uniform(nodes, local, 0.05).unwrap();
            let kns = nonstat_matrix(pts.view(), &cfg, 0.0).unwrap();
            let err = (&kns - &kstat).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-10, "K={k} err={err}");
        }
    }

    #[test]
    fn pair_partials_match_differences() {
        let a = LocalParams { sigma: 1.1, lambda: 0.07, nu: 0.9 };
        let b = LocalParams { sigma: 0.8, lambda: 0.15, nu: 1.6 };
        let d2 = 0.04;
        let p = nonstat_pair_partials(a, b, d2, 2);
        let e = 1e-6;
        let bump = |which: usize, side_a: bool, sign: f64| {
            let mut aa = a;
            let mut bb = b;
            let t = if side_a { &mut aa } else { &mut bb };
            match which {
                0 => t.sigma += sign * e,
                1 => t.lambda += sign * e,
                _ => t.nu += sign * e,
            }
            nonstat_pair(aa, bb, d2, 2)
        };
        for w in 0..3 {
            let fa = (bump(w, true, 1.0) - bump(w, true, -1.0)) / (2.0 * e);
            let fb = (bump(w, false, 1.0) - bump(w, false, -1.0)) / (2.0 * e);
            assert!((p.d_a[w] - fa).abs() < 1e-6 * (1.0 + fa.abs()), "a{w}: {} {}", p.d_a[w], fa);
            assert!((p.d_b[w] - fb).abs() < 1e-6 * (1.0 + fb.abs()), "b{w}: {} {}", p.d_b[w], fb);
        }
    }

    proptest! {
        #[test]
        fn matern_decreasing(nu in 0.2f64..6.0, r in 0.05f64..2.0, h in 0.0f64..3.0, dh in 1e-3f64..1.0) {
            let p = MaternParams::new(1.0, r, nu).unwrap();
            let a = matern(h, &p);
            let b = matern(h + dh, &p);
            prop_assert!(b < a || (a == 0.0 && b == 0.0));
        }

        #[test]
        fn nonstat_symmetric(x in proptest::collection::vec(-0.5f64..0.5, 4)) {
            let cfg = two_node_config();
            let a = ndarray::array![x[0], x[1]];
            let b = ndarray::array![x[2], x[3]];
            let ab = nonstat_matern(a.view(), b.view(), &cfg).unwrap();
            let ba = nonstat_matern(b.view(), a.view(), &cfg).unwrap();
            prop_assert_eq!(ab.to_bits(), ba.to_bits());
        }

        #[test]
        fn random_matrices_are_spd(seed in 0u64..1000, nu in 0.3f64..3.0, r in 0.05f64..1.0) {
            let pts = random_points(40, 2, seed);
            let p = MaternParams::new(1.0, r, nu).unwrap();
            let k = matern_matrix(pts.view(), &MaternKernel::new(p), 1e-3);
            prop_assert!(CovarianceMatrixBundle::factor(k, 1e-3, 1.0).is_ok());
        }
    }
}
