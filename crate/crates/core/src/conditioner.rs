//! Masked autoregressive conditioner producing the per-coordinate DDSF
//! parameters.
//!
//! Degrees: input s_j has degree j (1-based). Hidden units get degrees
//! round-robin from {1, …, max(1, d−1)} and may read a unit of the previous
//! layer when their degree is at least the parent's. Output units of
//! coordinate k have degree k−1 and read only units of degree ≤ k−1, so the
//! first coordinate's outputs are pure biases.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{softplus_inverse, DdsfShape, DdsfStep};
use crate::params::ParameterSchema;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedDenseLayer {
    /// out × in; masked entries are held at exactly zero.
    weight: Array2<f64>,
    bias: Array1<f64>,
    mask: Array2<f64>,
    degrees: Vec<usize>,
}

impl MaskedDenseLayer {
    fn new(in_degrees: &[usize], degrees: Vec<usize>, allowed: impl Fn(usize, usize) -> bool) -> Self {
        let mask = Array2::from_shape_fn((degrees.len(), in_degrees.len()), |(o, i)| {
            if allowed(degrees[o], in_degrees[i]) { 1.0 } else { 0.0 }
        });
        Self {
            weight: Array2::zeros(mask.raw_dim()),
            bias: Array1::zeros(degrees.len()),
            mask,
            degrees,
        }
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn mask(&self) -> &Array2<f64> {
        &self.mask
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// x (N × in) ↦ x Wᵀ + b.
    fn affine(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::from_shape_fn((x.nrows(), self.bias.len()), |(_, j)| self.bias[j]);
        general_mat_mul(1.0, &x, &self.weight.t(), 1.0, &mut out);
        out
    }
}

/// Cached layer inputs of a batch forward pass.
pub struct ConditionerCache {
    /// inputs[0] is the batch itself; inputs[l] the tanh output of hidden layer l.
    inputs: Vec<Array2<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionerNetwork {
    dim: usize,
    shape: DdsfShape,
    hidden: Vec<MaskedDenseLayer>,
    output: MaskedDenseLayer,
}

impl ConditionerNetwork {
    /// Masked network for `dim` inputs with the given hidden widths, emitting
    /// `dim` raw DDSF parameter blocks. Weights are N(0, init_scale²) on the
    /// allowed connections. Output biases are N(0, init_scale²) plus
    /// softplus⁻¹(1) on the a-entries, so every DDSF starts close to the identity.
    pub fn build<R: Rng + ?Sized>(
        dim: usize,
        hidden: &[usize],
        shape: &DdsfShape,
        init_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("conditioner needs at least one input".into()));
        }
        if hidden.contains(&0) {
            return Err(Error::InvalidInput("hidden layer widths must be positive".into()));
        }
        if !(init_scale >= 0.0) || !init_scale.is_finite() {
            return Err(Error::InvalidInput(format!("init scale must be ≥ 0, got {init_scale}")));
        }
        let cycle = dim.saturating_sub(1).max(1);
        let mut prev: Vec<usize> = (1..=dim).collect();
        let mut layers = Vec::with_capacity(hidden.len());
        for &width in hidden {
            let degrees: Vec<usize> = (0..width).map(|u| u % cycle + 1).collect();
            let layer = MaskedDenseLayer::new(&prev, degrees, |child, parent| child >= parent);
            prev = layer.degrees.clone();
            layers.push(layer);
        }
        let m = shape.num_params();
        let out_degrees: Vec<usize> = (0..dim * m).map(|o| o / m).collect();
        let output = MaskedDenseLayer::new(&prev, out_degrees, |child, parent| parent <= child);

        let mut net = Self { dim, shape: shape.clone(), hidden: layers, output };
        let normal = Normal::new(0.0, init_scale).map_err(|e| Error::InvalidInput(e.to_string()))?;
        for layer in net.hidden.iter_mut().chain(std::iter::once(&mut net.output)) {
            let mask = &layer.mask;
            layer.weight.zip_mut_with(mask, |w, &keep| *w = if keep > 0.0 { normal.sample(rng) } else { 0.0 });
        }
        let a_bias = softplus_inverse(1.0);
        let a_idx = shape.a_indices();
        for (o, b) in net.output.bias.iter_mut().enumerate() {
            *b = normal.sample(rng) + if a_idx.contains(&(o % m)) { a_bias } else { 0.0 };
        }
        Ok(net)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> &DdsfShape {
        &self.shape
    }

    pub fn hidden_layers(&self) -> &[MaskedDenseLayer] {
        &self.hidden
    }

    pub fn output_layer(&self) -> &MaskedDenseLayer {
        &self.output
    }

    fn layers(&self) -> impl Iterator<Item = &MaskedDenseLayer> {
        self.hidden.iter().chain(std::iter::once(&self.output))
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(|l| l.num_params()).sum()
    }

    pub fn extend_schema(&self, schema: &mut ParameterSchema, prefix: &str) {
        for (l, layer) in self.hidden.iter().enumerate() {
            schema.push(format!("{prefix}.hidden{}.weight", l + 1), layer.weight.len());
            schema.push(format!("{prefix}.hidden{}.bias", l + 1), layer.bias.len());
        }
        schema.push(format!("{prefix}.output.weight"), self.output.weight.len());
        schema.push(format!("{prefix}.output.bias"), self.output.bias.len());
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        for layer in self.layers() {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
        }
    }

    /// Load parameters in [`ConditionerNetwork::write_params`] order; masked
    /// weights are forced back to zero.
    pub fn read_params(&mut self, values: &[f64]) {
        let mut pos = 0;
        for layer in self.hidden.iter_mut().chain(std::iter::once(&mut self.output)) {
            let nw = layer.weight.len();
            for ((w, &m), &v) in layer.weight.iter_mut().zip(&layer.mask).zip(&values[pos..pos + nw]) {
                *w = v * m;
            }
            pos += nw;
            let nb = layer.bias.len();
            layer.bias.iter_mut().zip(&values[pos..pos + nb]).for_each(|(b, &v)| *b = v);
            pos += nb;
        }
    }

    /// Raw (unconstrained) outputs for every row of `x`: N × (d·m_k).
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>, keep_cache: bool) -> (Array2<f64>, Option<ConditionerCache>) {
        let mut inputs = Vec::new();
        let mut h = x.to_owned();
        for layer in &self.hidden {
            let mut next = layer.affine(h.view());
            next.mapv_inplace(f64::tanh);
            if keep_cache {
                inputs.push(std::mem::replace(&mut h, next));
            } else {
                h = next;
            }
        }
        let out = self.output.affine(h.view());
        if keep_cache {
            inputs.push(h);
            (out, Some(ConditionerCache { inputs }))
        } else {
            (out, None)
        }
    }

    /// Gradient of a loss with respect to the parameters (in
    /// [`ConditionerNetwork::write_params`] order) and the inputs, given dℓ/d(raw outputs).
    pub fn backward(&self, cache: &ConditionerCache, g_out: ArrayView2<'_, f64>) -> (Vec<f64>, Array2<f64>) {
        let layers: Vec<&MaskedDenseLayer> = self.layers().collect();
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
        let mut g = g_out.to_owned();
        for (l, layer) in layers.iter().enumerate().rev() {
            let input = &cache.inputs[l];
            let mut gw = Array2::zeros(layer.weight.raw_dim());
            general_mat_mul(1.0, &g.t(), input, 0.0, &mut gw);
            gw *= &layer.mask;
            let gb = g.sum_axis(Axis(0));
            let mut g_in = Array2::zeros(input.raw_dim());
            general_mat_mul(1.0, &g, &layer.weight, 0.0, &mut g_in);
            if l > 0 {
                // input is tanh output of the previous hidden layer
                g_in.zip_mut_with(input, |gi, &h| *gi *= 1.0 - h * h);
            }
            let mut flat = gw.into_raw_vec_and_offset().0;
            flat.extend(gb.iter());
            grads.push(flat);
            g = g_in;
        }
        grads.reverse();
        (grads.concat(), g)
    }

    /// All raw outputs at a single location.
    pub fn forward_raw(&self, s: &[f64]) -> Vec<f64> {
        let x = ArrayView2::from_shape((1, s.len()), s).expect("row vector");
        self.forward_batch(x, false).0.into_raw_vec_and_offset().0
    }

    /// Raw outputs of coordinate `k` (0-based) only.
    pub fn forward_coordinate(&self, s: &[f64], k: usize) -> Vec<f64> {
        let mut h = Array1::from(s.to_vec());
        for layer in &self.hidden {
            h = (layer.weight.dot(&h) + &layer.bias).mapv(f64::tanh);
        }
        let m = self.shape.num_params();
        (k * m..(k + 1) * m)
            .map(|o| self.output.weight.row(o).dot(&h) + self.output.bias[o])
            .collect()
    }

    /// Constrained DDSF parameters γ₁, …, γ_d at `s`.
    pub fn forward(&self, s: &[f64]) -> Result<Vec<DdsfStep>> {
        if s.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: s.len() });
        }
        let raw = self.forward_raw(s);
        let m = self.shape.num_params();
        raw.chunks(m).map(|c| DdsfStep::from_raw(&self.shape, c)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(dim: usize, hidden: &[usize], scale: f64, seed: u64) -> ConditionerNetwork {
        let shape = DdsfShape::uniform(2, 3).unwrap();
        ConditionerNetwork::build(dim, hidden, &shape, scale, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn no_hidden_layer_mask() {
        let n = net(2, &[], 1.0, 0);
        let m = n.shape().num_params();
        let mask = n.output_layer().mask();
        for r in 0..m {
            assert_eq!(mask.row(r).to_vec(), vec![0.0, 0.0]);
            assert_eq!(mask.row(m + r).to_vec(), vec![1.0, 0.0]);
        }
    }

    #[test]
    fn later_inputs_never_reach_earlier_outputs() {
        let n = net(3, &[7, 5], 1.0, 1);
        let m = n.shape().num_params();
        let base = n.forward_raw(&[0.2, -0.4, 0.5]);
        let moved3 = n.forward_raw(&[0.2, -0.4, -0.9]);
        assert_eq!(base, moved3);
        let moved2 = n.forward_raw(&[0.2, 0.7, 0.5]);
        assert_eq!(base[..2 * m], moved2[..2 * m]);
        assert_ne!(base[2 * m..], moved2[2 * m..]);
        let moved1 = n.forward_raw(&[-0.6, -0.4, 0.5]);
        assert_eq!(base[..m], moved1[..m]);
        assert_ne!(base[m..2 * m], moved1[m..2 * m]);
    }

    #[test]
    fn finite_difference_jacobian_zero_pattern() {
        let n = net(2, &[4], 1.0, 2);
        let m = n.shape().num_params();
        let s = [0.3, -0.1];
        let e = 1e-4;
        for j in 0..2 {
            let mut up = s;
            up[j] += e;
            let mut down = s;
            down[j] -= e;
            let (a, b) = (n.forward_raw(&up), n.forward_raw(&down));
            for k in 0..2 {
                for r in 0..m {
                    let d = (a[k * m + r] - b[k * m + r]) / (2.0 * e);
                    if j >= k {
                        assert_eq!(d, 0.0, "coordinate {k} depends on input {j}");
                    }
                }
            }
        }
    }

    #[test]
    fn one_dimensional_network_is_bias_only() {
        let n = net(1, &[5, 5], 1.0, 3);
        assert_eq!(n.forward_raw(&[0.1]), n.forward_raw(&[9.0]));
    }

    #[test]
    fn zero_network_outputs() {
        let shape = DdsfShape::uniform(2, 4).unwrap();
        let mut n = ConditionerNetwork::build(2, &[3], &shape, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        n.read_params(&vec![0.0; n.num_params()]);
        for step in n.forward(&[0.5, 0.5]).unwrap() {
            // a = ln 2, b = 0, uniform rows: the map is (ln 2)² x
            let x = 0.37;
            assert!((step.eval(x) - 2f64.ln().powi(2) * x).abs() < 1e-14);
        }
        let raw = n.forward_raw(&[0.5, 0.5]);
        assert!(raw.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constrained_rows_sum_to_one() {
        let n = net(2, &[6], 2.0, 4);
        let m = n.shape().num_params();
        let raw = n.forward_raw(&[0.9, -0.3]);
        // W¹ block of the first coordinate: rows of width 3 after the a and b blocks
        let w_start = 12;
        for r in 0..3 {
            let row = &raw[w_start + 3 * r..w_start + 3 * r + 3];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let t: f64 = e.iter().sum();
            assert!((e.iter().map(|v| v / t).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(raw.len(), 2 * m);
    }

    #[test]
    fn backward_matches_differences() {
        let mut n = net(3, &[5, 4], 0.7, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Array2::from_shape_fn((3, 3), |_| rng.random_range(-1.0..1.0));
        let (out, cache) = n.forward_batch(x.view(), true);
        let wts = Array2::from_shape_fn(out.raw_dim(), |_| rng.random_range(-1.0..1.0));
        let (gp, gx) = n.backward(&cache.unwrap(), wts.view());
        let mut theta = Vec::new();
        n.write_params(&mut theta);
        let loss = |n: &ConditionerNetwork, x: &Array2<f64>| (n.forward_batch(x.view(), false).0 * &wts).sum();
        let e = 1e-6;
        for idx in 0..theta.len() {
            let mut t = theta.clone();
            t[idx] += e;
            n.read_params(&t);
            let up = loss(&n, &x);
            t[idx] -= 2.0 * e;
            n.read_params(&t);
            let down = loss(&n, &x);
            let fd = (up - down) / (2.0 * e);
            assert!((gp[idx] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{idx}: {} {fd}", gp[idx]);
        }
        n.read_params(&theta);
        for i in 0..3 {
            for j in 0..3 {
                let mut p = x.clone();
                p[[i, j]] += e;
                let up = loss(&n, &p);
                p[[i, j]] -= 2.0 * e;
                let down = loss(&n, &p);
                assert!((gx[[i, j]] - (up - down) / (2.0 * e)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn coordinate_slice_matches_full_forward() {
        let n = net(3, &[6, 6], 1.0, 7);
        let m = n.shape().num_params();
        let s = [0.1, 0.2, -0.3];
        let full = n.forward_raw(&s);
        for k in 0..3 {
            let part = n.forward_coordinate(&s, k);
            for (a, b) in part.iter().zip(&full[k * m..(k + 1) * m]) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }
}
