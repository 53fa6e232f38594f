//! Synthetic warped Gaussian fields on grids.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::covariance::{matern_matrix, CovarianceMatrixBundle, MaternKernel, MaternParams};
use crate::error::{Error, Result};
use crate::types::{RegularGrid, SpatialDataset};

/// Image points closer than this count as a collision.
pub const INJECTIVITY_TOLERANCE: f64 = 1e-10;

/// Analytic deformation of the simulation domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FixedWarping {
    Identity,
    /// Radius-preserving swirl of the first two coordinates; further
    /// coordinates pass through.
    Spiral { a: f64, b: f64 },
    /// `scale · sinh(rate · s_axis) / rate`, a monotone stretch of one axis.
    AxisSinh { axis: usize, rate: f64, scale: f64 },
    /// Applied left to right.
    Compose(Vec<FixedWarping>),
}

impl Default for FixedWarping {
    fn default() -> Self {
        FixedWarping::Spiral { a: 2.0, b: 4.0 }
    }
}

/// f(s) = r (cos(θ + a r + b r³), sin(θ + a r + b r³)) with (r, θ) the polar
/// coordinates of `s`.
pub fn spiral_warp(s: [f64; 2], a: f64, b: f64) -> [f64; 2] {
    let r = s[0].hypot(s[1]);
    // rotating s by the extra angle is the same map without going through atan2
    let (sin, cos) = (a * r + b * r * r * r).sin_cos();
    [s[0] * cos - s[1] * sin, s[0] * sin + s[1] * cos]
}

impl FixedWarping {
    pub fn apply(&self, s: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let mut out = s.to_owned();
        self.apply_in_place(&mut out)?;
        Ok(out)
    }

    fn apply_in_place(&self, s: &mut Array1<f64>) -> Result<()> {
        match self {
            FixedWarping::Identity => {}
            FixedWarping::Spiral { a, b } => {
                if s.len() < 2 {
                    return Err(Error::DimensionMismatch { expected: 2, got: s.len() });
                }
                let [x, y] = spiral_warp([s[0], s[1]], *a, *b);
                s[0] = x;
                s[1] = y;
            }
            FixedWarping::AxisSinh { axis, rate, scale } => {
                if *axis >= s.len() {
                    return Err(Error::DimensionMismatch { expected: axis + 1, got: s.len() });
                }
                if !(*rate > 0.0) || !(*scale > 0.0) {
                    return Err(Error::InvalidParameter(format!("axis stretch needs positive rate and scale, got {rate}, {scale}")));
                }
                s[*axis] = scale * (rate * s[*axis]).sinh() / rate;
            }
            FixedWarping::Compose(parts) => {
                for p in parts {
                    p.apply_in_place(s)?;
                }
            }
        }
        Ok(())
    }

    pub fn apply_batch(&self, points: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut out = points.to_owned();
        for mut row in out.rows_mut() {
            let mut r = row.to_owned();
            self.apply_in_place(&mut r)?;
            row.assign(&r);
        }
        Ok(out)
    }
}

/// Error if two images lie within [`INJECTIVITY_TOLERANCE`] of each other.
pub fn check_injective(images: ArrayView2<'_, f64>) -> Result<()> {
    let n = images.nrows();
    // sort along the first coordinate and only compare neighbours within tolerance
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| images[[i, 0]].total_cmp(&images[[j, 0]]));
    for (pos, &i) in order.iter().enumerate() {
        for &j in &order[pos + 1..] {
            if images[[j, 0]] - images[[i, 0]] > INJECTIVITY_TOLERANCE {
                break;
            }
            let d2: f64 = images.row(i).iter().zip(images.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2.sqrt() <= INJECTIVITY_TOLERANCE {
                return Err(Error::Domain(format!(
                    "warping is not injective on the grid: points {} and {} map within {INJECTIVITY_TOLERANCE}",
                    i.min(j),
                    i.max(j)
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub grid: RegularGrid,
    pub warping: FixedWarping,
    /// Covariance on the warped domain.
    pub matern: MaternParams,
    pub noise_var: f64,
    /// Number of grid nodes observed (without replacement).
    pub sample_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SimulatedField {
    pub grid_points: Array2<f64>,
    /// Process values Y at every grid node.
    pub truth: Array1<f64>,
    /// Noisy observations at the sampled nodes.
    pub data: SpatialDataset,
    /// Sampled grid indices, ascending.
    pub training: Vec<usize>,
    /// Remaining grid indices, ascending.
    pub held_out: Vec<usize>,
}

/// Draw Y = L ξ on the warped grid, sample nodes, and add N(0, σ_ε²) noise.
pub fn simulate_field(spec: &SimulationSpec) -> Result<SimulatedField> {
    spec.matern.validate()?;
    if !(spec.noise_var >= 0.0) || !spec.noise_var.is_finite() {
        return Err(Error::InvalidParameter(format!("noise variance must be non-negative, got {}", spec.noise_var)));
    }
    let n_p = spec.grid.len();
    if spec.sample_size > n_p {
        return Err(Error::InvalidInput(format!(
            "sample size {} exceeds the {n_p} grid nodes",
            spec.sample_size
        )));
    }
    let points = spec.grid.points();
    let warped = spec.warping.apply_batch(points.view())?;
    check_injective(warped.view())?;
    let kernel = MaternKernel::new(spec.matern);
    let bundle = CovarianceMatrixBundle::factor(matern_matrix(warped.view(), &kernel, 0.0), 0.0, kernel.variance())?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let xi: Array1<f64> = (0..n_p).map(|_| StandardNormal.sample(&mut rng)).collect();
    let l = bundle.cholesky().l();
    let truth: Array1<f64> = (0..n_p).map(|i| l.row(i).slice(ndarray::s![..=i]).dot(&xi.slice(ndarray::s![..=i]))).collect();

    let mut training = rand::seq::index::sample(&mut rng, n_p, spec.sample_size).into_vec();
    training.sort_unstable();
    let mut taken = vec![false; n_p];
    for &i in &training {
        taken[i] = true;
    }
    let held_out: Vec<usize> = (0..n_p).filter(|&i| !taken[i]).collect();

    let sd = spec.noise_var.sqrt();
    let locations = Array2::from_shape_fn((training.len(), spec.grid.dim()), |(r, c)| points[[training[r], c]]);
    let values: Array1<f64> = training
        .iter()
        .map(|&i| {
            let e: f64 = StandardNormal.sample(&mut rng);
            truth[i] + sd * e
        })
        .collect();
    let data = SpatialDataset::new(locations, values)?;
    Ok(SimulatedField { grid_points: points, truth, data, training, held_out })
}
