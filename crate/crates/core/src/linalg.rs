//! Dense symmetric positive-definite factorizations.
//!
//! The Cholesky factorization is right-looking and blocked; the trailing
//! update of each block step is a GEMM, which is where nearly all the flops go.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::exec;

const BLOCK: usize = 64;

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: Array2<f64>,
}

/// Index of the first non-positive pivot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NotPositiveDefinite {
    pub pivot: usize,
}

impl Cholesky {
    /// Factor a symmetric matrix; only the lower triangle of `a` is read.
    pub fn factor(mut a: Array2<f64>) -> Result<Self, NotPositiveDefinite> {
        assert_eq!(a.nrows(), a.ncols(), "Cholesky needs a square matrix");
        factor_in_place(&mut a)?;
        Ok(Self { l: a })
    }

    pub fn order(&self) -> usize {
        self.l.nrows()
    }

    pub fn l(&self) -> ArrayView2<'_, f64> {
        self.l.view()
    }

    /// log |A| = 2 Σ log L_ii.
    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diag().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Solve `L x = b`.
    pub fn solve_lower(&self, b: ArrayView1<'_, f64>) -> Array1<f64> {
        let n = self.order();
        assert_eq!(b.len(), n);
        let mut x = b.to_owned();
        let xs = x.as_slice_mut().unwrap();
        for i in 0..n {
            let row = self.l.row(i);
            let row = row.as_slice().unwrap();
            let acc = dot(&row[..i], &xs[..i]);
            xs[i] = (xs[i] - acc) / row[i];
        }
        x
    }

    /// Solve `Lᵀ x = b`.
    pub fn solve_upper(&self, b: ArrayView1<'_, f64>) -> Array1<f64> {
        let n = self.order();
        assert_eq!(b.len(), n);
        let mut x = b.to_owned();
        let xs = x.as_slice_mut().unwrap();
        // column-oriented back substitution over rows of L
        for i in (0..n).rev() {
            let row = self.l.row(i);
            let row = row.as_slice().unwrap();
            xs[i] /= row[i];
            let xi = xs[i];
            for (xj, lij) in xs[..i].iter_mut().zip(&row[..i]) {
                *xj -= lij * xi;
            }
        }
        x
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: ArrayView1<'_, f64>) -> Array1<f64> {
        let y = self.solve_lower(b);
        self.solve_upper(y.view())
    }

    /// `L⁻¹ Bᵀ` for each row of `b` (n₀×N), returned as rows (n₀×N): row r is `L⁻¹ b_r`.
    pub fn solve_lower_rows(&self, b: ArrayView2<'_, f64>) -> Array2<f64> {
        let n = self.order();
        assert_eq!(b.ncols(), n);
        let mut out = b.to_owned();
        let rows = out.nrows();
        if rows == 0 {
            return out;
        }
        let data = out.as_slice_mut().unwrap();
        exec::for_each_chunk_mut(data, n * 16, |_, chunk| {
            for xs in chunk.chunks_mut(n) {
                for i in 0..n {
                    let row = self.l.row(i);
                    let row = row.as_slice().unwrap();
                    let acc = dot(&row[..i], &xs[..i]);
                    xs[i] = (xs[i] - acc) / row[i];
                }
            }
        });
        out
    }

    /// `L⁻¹` (lower triangular).
    pub fn inverse_lower(&self) -> Array2<f64> {
        let n = self.order();
        // entry k of the j-th vector is L⁻¹[j + k, j]
        let cols = exec::map(n, |j| {
            let mut x = vec![0.0; n - j];
            x[0] = 1.0 / self.l[[j, j]];
            for i in j + 1..n {
                let row = self.l.row(i);
                let row = row.as_slice().unwrap();
                let acc = dot(&row[j..i], &x[..i - j]);
                x[i - j] = -acc / row[i];
            }
            x
        });
        let mut inv = Array2::zeros((n, n));
        for (j, col) in cols.into_iter().enumerate() {
            for (k, v) in col.into_iter().enumerate() {
                inv[[j + k, j]] = v;
            }
        }
        inv
    }

    /// `A⁻¹ = L⁻ᵀ L⁻¹`.
    pub fn inverse(&self) -> Array2<f64> {
        let n = self.order();
        let linv = self.inverse_lower();
        let mut out = Array2::zeros((n, n));
        general_mat_mul(1.0, &linv.t(), &linv, 0.0, &mut out);
        // exact symmetry
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (out[[i, j]] + out[[j, i]]);
                out[[i, j]] = v;
                out[[j, i]] = v;
            }
        }
        out
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the compiler vectorize
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn factor_in_place(a: &mut Array2<f64>) -> Result<(), NotPositiveDefinite> {
    let n = a.nrows();
    if !a.is_standard_layout() {
        *a = a.as_standard_layout().to_owned();
    }
    for k0 in (0..n).step_by(BLOCK) {
        let k1 = (k0 + BLOCK).min(n);
        // diagonal block
        for j in k0..k1 {
            let (d, rowj) = {
                let row = a.row(j);
                let row = row.as_slice().unwrap();
                (row[j] - dot(&row[k0..j], &row[k0..j]), row[k0..j].to_vec())
            };
            if !(d > 0.0) || !d.is_finite() {
                return Err(NotPositiveDefinite { pivot: j });
            }
            let ljj = d.sqrt();
            a[[j, j]] = ljj;
            for i in j + 1..k1 {
                let mut row = a.row_mut(i);
                let row = row.as_slice_mut().unwrap();
                row[j] = (row[j] - dot(&row[k0..j], &rowj)) / ljj;
            }
        }
        if k1 == n {
            break;
        }
        // panel below the diagonal block: X L11ᵀ = A21
        let l11 = a.slice(s![k0..k1, k0..k1]).to_owned();
        {
            let mut panel = a.slice_mut(s![k1.., ..]);
            let width = panel.ncols();
            let data = panel.as_slice_mut().unwrap();
            let l11 = &l11;
            exec::for_each_chunk_mut(data, width * 32, move |_, chunk| {
                for row in chunk.chunks_mut(width) {
                    for j in k0..k1 {
                        let lj = l11.row(j - k0);
                        let lj = lj.as_slice().unwrap();
                        let acc = dot(&row[k0..j], &lj[..j - k0]);
                        row[j] = (row[j] - acc) / lj[j - k0];
                    }
                }
            });
        }
        // trailing update A22 -= A21 A21ᵀ, lower block columns only
        let (left, mut right) = a.view_mut().split_at(Axis(1), k1);
        let a21 = left.slice(s![.., k0..k1]);
        for j0 in (k1..n).step_by(BLOCK) {
            let j1 = (j0 + BLOCK).min(n);
            let lhs = a21.slice(s![j0.., ..]);
            let rhs = a21.slice(s![j0..j1, ..]);
            let mut target = right.slice_mut(s![j0.., j0 - k1..j1 - k1]);
            general_mat_mul(-1.0, &lhs, &rhs.t(), 1.0, &mut target);
        }
    }
    // zero the strict upper triangle
    for i in 0..n {
        a.row_mut(i).slice_mut(s![i + 1..]).fill(0.0);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        let mut a = b.dot(&b.t());
        for i in 0..n {
            a[[i, i]] += n as f64 * 0.1;
        }
        a
    }

    #[test]
    fn reconstructs_across_block_boundaries() {
        for n in [1, 3, 63, 64, 65, 150] {
            let a = random_spd(n, n as u64);
            let c = Cholesky::factor(a.clone()).unwrap();
            let back = c.l().dot(&c.l().t());
            let err = (&back - &a).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-10 * n as f64, "n={n} err={err}");
            // upper triangle zeroed
            for i in 0..n {
                for j in i + 1..n {
                    assert_eq!(c.l()[[i, j]], 0.0);
                }
            }
        }
    }

    #[test]
    fn solve_and_inverse() {
        let n = 97;
        let a = random_spd(n, 11);
        let c = Cholesky::factor(a.clone()).unwrap();
        let b = Array1::from_shape_fn(n, |i| (i as f64).sin());
        let x = c.solve(b.view());
        let r = a.dot(&x) - &b;
        assert!(r.iter().all(|v| v.abs() < 1e-9));

        let inv = c.inverse();
        let eye = a.dot(&inv);
        for i in 0..n {
            for j in 0..n {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((eye[[i, j]] - e).abs() < 1e-9);
            }
        }

        let rows = Array2::from_shape_fn((5, n), |(r, i)| ((r * n + i) as f64).cos());
        let solved = c.solve_lower_rows(rows.view());
        for r in 0..5 {
            let single = c.solve_lower(rows.row(r));
            assert_eq!(solved.row(r), single);
        }
    }

    #[test]
    fn log_det_of_diagonal() {
        let a = Array2::from_diag(&ndarray::array![2.0, 3.0, 4.0]);
        let c = Cholesky::factor(a).unwrap();
        assert!((c.log_det() - 24f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn indefinite_reports_pivot() {
        let a = ndarray::array![[1.0, 2.0], [2.0, 1.0]];
        assert_eq!(Cholesky::factor(a).unwrap_err(), NotPositiveDefinite { pivot: 1 });
    }
}
