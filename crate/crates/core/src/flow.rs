//! Monotone scalar transforms (DSF, DDSF) and the triangular map built from
//! them.
//!
//! A DDSF sublayer computes h = σ⁻¹(W σ(z)) row by row. The logit of the
//! convex mixture is evaluated as ln(Σ W_j σ(z_j)) − ln(Σ W_j σ(−z_j)), with
//! both sums formed directly from positive terms, so nothing cancels when the
//! mixture is close to 0 or 1 and no clamping is needed. If either sum
//! underflows the same quantity is recomputed in log space.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioner::{ConditionerCache, ConditionerNetwork};
use crate::error::{Error, Result};
use crate::exec;
use crate::params::{ParameterSchema, ParameterVector};

const MIX_TINY: f64 = 1e-250;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + eˣ).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// ln σ(x).
fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Inverse of softplus: the raw value whose softplus is `y` (y > 0).
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Sublayer shapes (M_l, M̃_l) of a DDSF: M̃_l sigmoid units mixed into M_l
/// outputs. The last sublayer has M_L = 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DdsfShape {
    layers: Vec<(usize, usize)>,
}

impl DdsfShape {
    pub fn new(layers: Vec<(usize, usize)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("a DDSF needs at least one sublayer".into()));
        }
        if layers.iter().any(|&(m, mt)| m == 0 || mt == 0) {
            return Err(Error::InvalidInput("DDSF sublayer sizes must be positive".into()));
        }
        if layers.last().unwrap().0 != 1 {
            return Err(Error::InvalidInput("the last DDSF sublayer must have a single output".into()));
        }
        Ok(Self { layers })
    }

    /// `sublayers` layers of `width` units, the last one mixed down to a scalar.
    pub fn uniform(sublayers: usize, width: usize) -> Result<Self> {
        let mut layers = vec![(width, width); sublayers.max(1)];
        layers.last_mut().unwrap().0 = 1;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[(usize, usize)] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Unconstrained parameter count m_k of one coordinate's transform.
    pub fn num_params(&self) -> usize {
        let mut n = 0;
        for (l, &(m, mt)) in self.layers.iter().enumerate() {
            n += 2 * mt + m * mt;
            if l > 0 {
                n += mt * self.layers[l - 1].0;
            }
        }
        n
    }

    /// Offsets of each block in the raw layout: a¹..a^L, b¹..b^L, W¹..W^L, U²..U^L.
    fn offsets(&self) -> RawOffsets {
        let depth = self.depth();
        let mut pos = 0;
        let mut a = Vec::with_capacity(depth);
        for &(_, mt) in &self.layers {
            a.push(pos);
            pos += mt;
        }
        let mut b = Vec::with_capacity(depth);
        for &(_, mt) in &self.layers {
            b.push(pos);
            pos += mt;
        }
        let mut w = Vec::with_capacity(depth);
        for &(m, mt) in &self.layers {
            w.push(pos);
            pos += m * mt;
        }
        let mut u = vec![0; depth];
        for l in 1..depth {
            u[l] = pos;
            pos += self.layers[l].1 * self.layers[l - 1].0;
        }
        RawOffsets { a, b, w, u }
    }

    /// Raw indices holding the a-entries (fed through softplus).
    pub fn a_indices(&self) -> std::ops::Range<usize> {
        0..self.layers.iter().map(|l| l.1).sum()
    }
}

struct RawOffsets {
    a: Vec<usize>,
    b: Vec<usize>,
    w: Vec<usize>,
    u: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
struct Sublayer {
    a: Vec<f64>,
    b: Vec<f64>,
    /// M_l × M̃_l, rows on the simplex.
    w: Array2<f64>,
    /// M̃_l × M_{l−1}, rows on the simplex; absent for the first sublayer.
    u: Option<Array2<f64>>,
}

/// Deep dense sigmoidal flow for one coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct DdsfStep {
    layers: Vec<Sublayer>,
}

/// Single-sublayer sigmoidal flow σ⁻¹(wᵀ σ(a x + b)).
#[derive(Clone, Debug, PartialEq)]
pub struct DsfStep(DdsfStep);

fn softmax_rows(raw: &[f64], rows: usize, cols: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows, cols));
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        let src = &raw[r * cols..(r + 1) * cols];
        let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (dst, &v) in row.iter_mut().zip(src) {
            *dst = (v - m).exp();
            total += *dst;
        }
        row /= total;
    }
    out
}

fn check_simplex(m: &Array2<f64>, what: &str) -> Result<()> {
    for row in m.rows() {
        let s: f64 = row.sum();
        if row.iter().any(|v| !(*v > 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("{what} rows must be positive and sum to 1")));
        }
    }
    Ok(())
}

/// Per-sublayer intermediate values kept for the backward pass.
struct LayerTrace {
    /// Input to the affine part: x for the first sublayer, U h^{l−1} after.
    v: Vec<f64>,
    sp: Vec<f64>,
    sm: Vec<f64>,
    /// Per output row: Some((p, q)) on the direct path, None if logs were needed.
    pq: Vec<Option<(f64, f64)>>,
    ln_pq: Vec<(f64, f64)>,
    z: Vec<f64>,
}

impl DdsfStep {
    /// Build from unconstrained values: softplus on a, softmax on W/U rows.
    pub fn from_raw(shape: &DdsfShape, raw: &[f64]) -> Result<Self> {
        if raw.len() != shape.num_params() {
            return Err(Error::DimensionMismatch { expected: shape.num_params(), got: raw.len() });
        }
        let off = shape.offsets();
        let layers = shape
            .layers
            .iter()
            .enumerate()
            .map(|(l, &(m, mt))| Sublayer {
                a: raw[off.a[l]..off.a[l] + mt].iter().map(|&r| softplus(r)).collect(),
                b: raw[off.b[l]..off.b[l] + mt].to_vec(),
                w: softmax_rows(&raw[off.w[l]..off.w[l] + m * mt], m, mt),
                u: (l > 0).then(|| {
                    let prev = shape.layers[l - 1].0;
                    softmax_rows(&raw[off.u[l]..off.u[l] + mt * prev], mt, prev)
                }),
            })
            .collect();
        Ok(Self { layers })
    }

    /// Build from constrained values; `layers[l] = (a, b, W, U)` with `U` absent for l = 0.
    pub fn new(layers: Vec<(Vec<f64>, Vec<f64>, Array2<f64>, Option<Array2<f64>>)>) -> Result<Self> {
        let mut out = Vec::with_capacity(layers.len());
        let mut prev_m = None;
        for (l, (a, b, w, u)) in layers.into_iter().enumerate() {
            let mt = a.len();
            if b.len() != mt || w.ncols() != mt {
                return Err(Error::DimensionMismatch { expected: mt, got: b.len().min(w.ncols()) });
            }
            if a.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("DDSF a-entries must be positive and b finite".into()));
            }
            check_simplex(&w, "W")?;
            match (l, &u, prev_m) {
                (0, None, _) => {}
                (_, Some(u), Some(pm)) if u.nrows() == mt && u.ncols() == pm => check_simplex(u, "U")?,
                _ => return Err(Error::InvalidParameter(format!("sublayer {l} has a missing or misshapen U"))),
            }
            prev_m = Some(w.nrows());
            out.push(Sublayer { a, b, w, u });
        }
        if prev_m != Some(1) {
            return Err(Error::InvalidParameter("the last DDSF sublayer must have a single output".into()));
        }
        Ok(Self { layers: out })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Mixture logit h_i = ln p_i − ln q_i for every output row of `w`.
    fn mix(w: &Array2<f64>, z: &[f64], sp: &[f64], sm: &[f64]) -> (Vec<f64>, Vec<Option<(f64, f64)>>, Vec<(f64, f64)>) {
        let mut h = Vec::with_capacity(w.nrows());
        let mut pq = Vec::with_capacity(w.nrows());
        let mut ln_pq = Vec::with_capacity(w.nrows());
        for row in w.rows() {
            let mut p = 0.0;
            let mut q = 0.0;
            for ((&wij, &s), &t) in row.iter().zip(sp).zip(sm) {
                p += wij * s;
                q += wij * t;
            }
            if p > MIX_TINY && q > MIX_TINY {
                let (lp, lq) = (p.ln(), q.ln());
                h.push(lp - lq);
                pq.push(Some((p, q)));
                ln_pq.push((lp, lq));
            } else {
                let lp = log_sum_exp(row.iter().zip(z).map(|(&wij, &zj)| wij.ln() + log_sigmoid(zj)));
                let lq = log_sum_exp(row.iter().zip(z).map(|(&wij, &zj)| wij.ln() + log_sigmoid(-zj)));
                h.push(lp - lq);
                pq.push(None);
                ln_pq.push((lp, lq));
            }
        }
        (h, pq, ln_pq)
    }

    /// Normalized mixture weights (P_ij, Q_ij) of row `i`.
    fn row_shares(w: &Array2<f64>, i: usize, t: &LayerTrace, j: usize) -> (f64, f64) {
        let wij = w[[i, j]];
        match t.pq[i] {
            Some((p, q)) => (wij * t.sp[j] / p, wij * t.sm[j] / q),
            None => {
                let (lp, lq) = t.ln_pq[i];
                let lw = wij.ln();
                ((lw + log_sigmoid(t.z[j]) - lp).exp(), (lw + log_sigmoid(-t.z[j]) - lq).exp())
            }
        }
    }

    fn forward_trace(&self, x: f64) -> (f64, Vec<LayerTrace>) {
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut h: Vec<f64> = vec![x];
        for layer in &self.layers {
            let v: Vec<f64> = match &layer.u {
                None => vec![x; layer.a.len()],
                Some(u) => u.rows().into_iter().map(|r| r.iter().zip(&h).map(|(a, b)| a * b).sum()).collect(),
            };
            let z: Vec<f64> = v.iter().zip(&layer.a).zip(&layer.b).map(|((v, a), b)| a * v + b).collect();
            let sp: Vec<f64> = z.iter().map(|&z| sigmoid(z)).collect();
            let sm: Vec<f64> = z.iter().map(|&z| sigmoid(-z)).collect();
            let (hn, pq, ln_pq) = Self::mix(&layer.w, &z, &sp, &sm);
            h = hn;
            traces.push(LayerTrace { v, sp, sm, pq, ln_pq, z });
        }
        (h[0], traces)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.forward_trace(x).0
    }

    /// (S(x), S'(x)) by forward-mode differentiation.
    pub fn eval_with_derivative(&self, x: f64) -> (f64, f64) {
        let (y, traces) = self.forward_trace(x);
        let mut dh = vec![1.0];
        for (layer, t) in self.layers.iter().zip(&traces) {
            let dv: Vec<f64> = match &layer.u {
                None => vec![1.0; layer.a.len()],
                Some(u) => u.rows().into_iter().map(|r| r.iter().zip(&dh).map(|(a, b)| a * b).sum()).collect(),
            };
            let dz: Vec<f64> = dv.iter().zip(&layer.a).map(|(d, a)| a * d).collect();
            dh = (0..layer.w.nrows())
                .map(|i| {
                    (0..dz.len())
                        .map(|j| {
                            let (pij, qij) = Self::row_shares(&layer.w, i, t, j);
                            (pij * t.sm[j] + qij * t.sp[j]) * dz[j]
                        })
                        .sum()
                })
                .collect();
        }
        (y, dh[0])
    }

    pub fn derivative(&self, x: f64) -> f64 {
        self.eval_with_derivative(x).1
    }

    /// Given dℓ/dS at x, accumulate dℓ/d(raw parameters) into `g_raw` (raw
    /// layout of [`DdsfStep::from_raw`]) and return (S(x), dℓ/dx).
    pub fn backward(&self, shape: &DdsfShape, x: f64, g_out: f64, g_raw: &mut [f64]) -> (f64, f64) {
        let (y, traces) = self.forward_trace(x);
        let off = shape.offsets();
        let mut gh = vec![g_out];
        let mut gx = 0.0;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let t = &traces[l];
            let (m, mt) = (layer.w.nrows(), layer.a.len());
            let mut gz = vec![0.0; mt];
            for (i, &g) in gh.iter().enumerate().take(m) {
                if g == 0.0 {
                    continue;
                }
                for j in 0..mt {
                    let (pij, qij) = Self::row_shares(&layer.w, i, t, j);
                    gz[j] += g * (pij * t.sm[j] + qij * t.sp[j]);
                    g_raw[off.w[l] + i * mt + j] += g * (pij - qij);
                }
            }
            let mut gv = vec![0.0; mt];
            for j in 0..mt {
                g_raw[off.b[l] + j] += gz[j];
                // d softplus(r)/dr = σ(r) = 1 − e^{−a}
                g_raw[off.a[l] + j] += gz[j] * t.v[j] * -(-layer.a[j]).exp_m1();
                gv[j] = gz[j] * layer.a[j];
            }
            match &layer.u {
                None => gx = gv.iter().sum(),
                Some(u) => {
                    let h_prev = &traces[l - 1];
                    let prev_h: Vec<f64> = self.layer_output(l - 1, h_prev);
                    let prev_m = u.ncols();
                    let mut gh_prev = vec![0.0; prev_m];
                    for j in 0..mt {
                        let row = u.row(j);
                        let dot: f64 = row.iter().zip(&prev_h).map(|(a, b)| a * b).sum();
                        // gU_jm = gv_j h_m; softmax backward: U_jm (gU_jm − Σ U gU)
                        for (mm, &ujm) in row.iter().enumerate() {
                            g_raw[off.u[l] + j * prev_m + mm] += ujm * gv[j] * (prev_h[mm] - dot);
                            gh_prev[mm] += gv[j] * ujm;
                        }
                    }
                    gh = gh_prev;
                }
            }
        }
        (y, gx)
    }

    fn layer_output(&self, l: usize, t: &LayerTrace) -> Vec<f64> {
        t.ln_pq.iter().map(|(lp, lq)| lp - lq).take(self.layers[l].w.nrows()).collect()
    }
}

impl DsfStep {
    pub fn new(w: Vec<f64>, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let m = w.len();
        let w = Array2::from_shape_vec((1, m), w).expect("shape");
        DdsfStep::new(vec![(a, b, w, None)]).map(Self)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.0.eval(x)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        self.0.derivative(x)
    }

    pub fn as_ddsf(&self) -> &DdsfStep {
        &self.0
    }
}

pub fn dsf_eval(step: &DsfStep, x: f64) -> f64 {
    step.eval(x)
}

pub fn ddsf_eval(step: &DdsfStep, x: f64) -> f64 {
    step.eval(x)
}

/// Architecture of a [`TriangularMap`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dim: usize,
    pub stages: usize,
    pub shape: DdsfShape,
    pub hidden: Vec<usize>,
    pub init_scale: f64,
}

impl FlowConfig {
    /// Two stages of five-sublayer, width-16 DDSFs with five hidden layers of 100.
    pub fn standard(dim: usize) -> Self {
        Self {
            dim,
            stages: 2,
            shape: DdsfShape::uniform(5, 16).expect("valid shape"),
            hidden: vec![100; 5],
            init_scale: 0.01,
        }
    }
}

/// Composition of autoregressive stages; stage s applies a DDSF to each
/// coordinate with parameters produced by its own conditioner from the
/// preceding coordinates of the stage input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriangularMap {
    config: FlowConfig,
    stages: Vec<ConditionerNetwork>,
}

/// Intermediate values of a batch forward pass, consumed by the backward pass.
pub struct MapCache {
    inputs: Vec<Array2<f64>>,
    raws: Vec<Array2<f64>>,
    conditioner: Vec<ConditionerCache>,
}

/// Search box for inversion in the original coordinates.
pub const INVERSE_BOX: f64 = 10.0;

impl TriangularMap {
    pub fn new<R: Rng + ?Sized>(config: FlowConfig, rng: &mut R) -> Result<Self> {
        if config.dim == 0 || config.stages == 0 {
            return Err(Error::InvalidInput("flow needs dim ≥ 1 and at least one stage".into()));
        }
        let stages = (0..config.stages)
            .map(|_| ConditionerNetwork::build(config.dim, &config.hidden, &config.shape, config.init_scale, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, stages })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn stages(&self) -> &[ConditionerNetwork] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [ConditionerNetwork] {
        &mut self.stages
    }

    pub fn schema(&self) -> ParameterSchema {
        let mut schema = ParameterSchema::new();
        for (s, net) in self.stages.iter().enumerate() {
            net.extend_schema(&mut schema, &format!("flow.stage{}", s + 1));
        }
        schema
    }

    pub fn num_params(&self) -> usize {
        self.stages.iter().map(|s| s.num_params()).sum()
    }

    pub fn parameters(&self) -> ParameterVector {
        let mut values = Vec::with_capacity(self.num_params());
        for net in &self.stages {
            net.write_params(&mut values);
        }
        ParameterVector::new(self.schema(), values).expect("schema matches")
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::DimensionMismatch { expected: self.num_params(), got: values.len() });
        }
        let mut pos = 0;
        for net in &mut self.stages {
            let n = net.num_params();
            net.read_params(&values[pos..pos + n]);
            pos += n;
        }
        Ok(())
    }

    fn apply_stage(&self, raw: &Array2<f64>, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let d = self.dim();
        let m = self.config.shape.num_params();
        let shape = &self.config.shape;
        let mut out = Array2::zeros(x.raw_dim());
        let data = out.as_slice_mut().expect("standard layout");
        exec::for_each_chunk_mut(data, d * 8, |c, chunk| {
            for (r, row) in chunk.chunks_mut(d).enumerate() {
                let i = c * 8 + r;
                let raw_i = raw.row(i);
                let raw_i = raw_i.as_slice().expect("contiguous");
                for k in 0..d {
                    let step = DdsfStep::from_raw(shape, &raw_i[k * m..(k + 1) * m]).expect("sized");
                    row[k] = step.eval(x[[i, k]]);
                }
            }
        });
        out
    }

    fn check_dim(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.ncols() });
        }
        Ok(())
    }

    /// T applied to every row of `locations`.
    pub fn forward_batch(&self, locations: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_dim(locations)?;
        let mut x = locations.to_owned();
        for net in &self.stages {
            let (raw, _) = net.forward_batch(x.view(), false);
            x = self.apply_stage(&raw, x.view());
        }
        Ok(x)
    }

    pub fn forward_cached(&self, locations: ArrayView2<'_, f64>) -> Result<(Array2<f64>, MapCache)> {
        self.check_dim(locations)?;
        let mut cache = MapCache { inputs: Vec::new(), raws: Vec::new(), conditioner: Vec::new() };
        let mut x = locations.to_owned();
        for net in &self.stages {
            let (raw, c) = net.forward_batch(x.view(), true);
            let y = self.apply_stage(&raw, x.view());
            cache.inputs.push(x);
            cache.raws.push(raw);
            cache.conditioner.push(c.expect("cache requested"));
            x = y;
        }
        Ok((x, cache))
    }

    /// Given dℓ/dT(s_i) for every row, return dℓ/d(flow parameters) and dℓ/ds.
    pub fn backward(&self, cache: &MapCache, g_out: ArrayView2<'_, f64>) -> (Vec<f64>, Array2<f64>) {
        let d = self.dim();
        let m = self.config.shape.num_params();
        let shape = &self.config.shape;
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(self.stages.len());
        let mut g = g_out.to_owned();
        for (s, net) in self.stages.iter().enumerate().rev() {
            let x = &cache.inputs[s];
            let raw = &cache.raws[s];
            let n = x.nrows();
            let mut g_raw = Array2::<f64>::zeros((n, d * m));
            let rows = exec::map(n, |i| {
                let mut gr = vec![0.0; d * m];
                let mut gx = vec![0.0; d];
                let raw_i = raw.row(i);
                let raw_i = raw_i.as_slice().expect("contiguous");
                for k in 0..d {
                    let go = g[[i, k]];
                    if go == 0.0 {
                        continue;
                    }
                    let step = DdsfStep::from_raw(shape, &raw_i[k * m..(k + 1) * m]).expect("sized");
                    let (_, gxk) = step.backward(shape, x[[i, k]], go, &mut gr[k * m..(k + 1) * m]);
                    gx[k] = gxk;
                }
                (gr, gx)
            });
            let mut gx_direct = Array2::<f64>::zeros((n, d));
            for (i, (gr, gx)) in rows.into_iter().enumerate() {
                g_raw.row_mut(i).as_slice_mut().expect("contiguous").copy_from_slice(&gr);
                gx_direct.row_mut(i).as_slice_mut().expect("contiguous").copy_from_slice(&gx);
            }
            let (g_params, g_cond_in) = net.backward(&cache.conditioner[s], g_raw.view());
            grads.push(g_params);
            g = gx_direct + g_cond_in;
        }
        grads.reverse();
        (grads.concat(), g)
    }

    pub fn forward(&self, s: &[f64]) -> Result<Vec<f64>> {
        let x = ndarray::ArrayView2::from_shape((1, s.len()), s).map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(self.forward_batch(x)?.row(0).to_vec())
    }

    /// Scalar transform of coordinate `k` in stage `stage` given the stage input `x`.
    fn coordinate_step(&self, stage: usize, x: &[f64], k: usize) -> DdsfStep {
        let raw = self.stages[stage].forward_coordinate(x, k);
        DdsfStep::from_raw(&self.config.shape, &raw).expect("sized")
    }

    /// T⁻¹(t), solving coordinate by coordinate. The result must lie in
    /// [−10, 10]ᵈ; targets outside the image of that box are rejected.
    pub fn inverse(&self, t: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if t.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: t.len() });
        }
        let mut y = t.to_vec();
        for stage in (0..self.stages.len()).rev() {
            let mut x = vec![0.0; d];
            for k in 0..d {
                let step = self.coordinate_step(stage, &x, k);
                x[k] = if stage == 0 {
                    solve_monotone(&step, y[k], -INVERSE_BOX, INVERSE_BOX, false)
                } else {
                    solve_monotone(&step, y[k], -INVERSE_BOX, INVERSE_BOX, true)
                }
                .ok_or(Error::OutOfRange { coordinate: k, value: t[k] })?;
            }
            y = x;
        }
        Ok(y)
    }

    pub fn inverse_batch(&self, targets: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_dim(targets)?;
        let rows = exec::map(targets.nrows(), |i| self.inverse(targets.row(i).as_slice().expect("contiguous")));
        let mut out = Array2::zeros(targets.raw_dim());
        for (mut row, r) in out.axis_iter_mut(Axis(0)).zip(rows) {
            row.assign(&ndarray::Array1::from(r?));
        }
        Ok(out)
    }
}

pub fn map_forward(map: &TriangularMap, s: &[f64]) -> Result<Vec<f64>> {
    map.forward(s)
}

pub fn map_inverse(map: &TriangularMap, t: &[f64]) -> Result<Vec<f64>> {
    map.inverse(t)
}

/// Root of S(x) = target for increasing S: Newton steps kept inside a
/// shrinking bracket, bisecting whenever Newton would leave it or stalls.
/// With `expand`, the bracket grows geometrically (up to 1e6) to contain the root.
fn solve_monotone(step: &DdsfStep, target: f64, mut lo: f64, mut hi: f64, expand: bool) -> Option<f64> {
    if !target.is_finite() {
        return None;
    }
    let mut f_lo = step.eval(lo) - target;
    let mut f_hi = step.eval(hi) - target;
    while expand && f_lo > 0.0 && lo > -1e6 {
        hi = lo;
        f_hi = f_lo;
        lo *= 4.0;
        f_lo = step.eval(lo) - target;
    }
    while expand && f_hi < 0.0 && hi < 1e6 {
        lo = hi;
        f_lo = f_hi;
        hi *= 4.0;
        f_hi = step.eval(hi) - target;
    }
    if f_lo > 0.0 || f_hi < 0.0 || !f_lo.is_finite() || !f_hi.is_finite() {
        return None;
    }
    if f_lo == 0.0 {
        return Some(lo);
    }
    if f_hi == 0.0 {
        return Some(hi);
    }
    let tol_f = 1e-13 * target.abs().max(1.0);
    let mut x = 0.5 * (lo + hi);
    let mut dx_old = hi - lo;
    let mut dx = dx_old;
    let (mut f, mut df) = step.eval_with_derivative(x);
    f -= target;
    for _ in 0..200 {
        if f.abs() <= tol_f {
            return Some(x);
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let newton_ok = df > 0.0 && {
            let nx = x - f / df;
            nx > lo && nx < hi && (2.0 * f).abs() <= (dx_old * df).abs()
        };
        dx_old = dx;
        if newton_ok {
            dx = f / df;
            x -= dx;
        } else {
            dx = 0.5 * (hi - lo);
            x = lo + dx;
        }
        if hi - lo <= 4.0 * f64::EPSILON * x.abs().max(1e-300) {
            return Some(x);
        }
        let (nf, ndf) = step.eval_with_derivative(x);
        f = nf - target;
        df = ndf;
    }
    Some(x)
}
