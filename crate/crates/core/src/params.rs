//! Flat parameter vectors with a named segment schema, and reverse-mode
//! gradients of scalar losses.
//!
//! Two routes produce gradients. Model objectives (the log-likelihood and its
//! flow/covariance pieces) implement [`Objective`] with hand-derived adjoints.
//! Arbitrary small losses can be written against [`Tape`], a scalar
//! reverse-mode recorder. Both are checked against central finite differences.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Ordered, contiguous, non-overlapping named segments.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterSchema {
    segments: Vec<Segment>,
}

impl ParameterSchema {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a segment; returns its index range in the flat vector.
    pub fn push(&mut self, name: impl Into<String>, len: usize) -> std::ops::Range<usize> {
        let offset = self.len();
        let seg = Segment { name: name.into(), offset, len };
        let r = seg.range();
        self.segments.push(seg);
        r
    }

    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Segment containing flat index `i`.
    pub fn segment_of(&self, i: usize) -> Option<&Segment> {
        let pos = self.segments.partition_point(|s| s.offset + s.len <= i);
        self.segments.get(pos).filter(|s| s.range().contains(&i))
    }

    /// Checks that the segments tile `0..len` with no gaps.
    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for s in &self.segments {
            if s.offset != next {
                return Err(Error::InvalidInput(format!("segment `{}` starts at {} instead of {next}", s.name, s.offset)));
            }
            next += s.len;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    schema: ParameterSchema,
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn new(schema: ParameterSchema, values: Vec<f64>) -> Result<Self> {
        schema.validate()?;
        if values.len() != schema.len() {
            return Err(Error::DimensionMismatch { expected: schema.len(), got: values.len() });
        }
        Ok(Self { schema, values })
    }

    pub fn zeros(schema: ParameterSchema) -> Self {
        let n = schema.len();
        Self { schema, values: vec![0.0; n] }
    }

    /// Concatenate named parts into one vector.
    pub fn pack<I, S>(parts: I) -> Self
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut schema = ParameterSchema::new();
        let mut values = Vec::new();
        for (name, v) in parts {
            schema.push(name, v.len());
            values.extend(v);
        }
        Self { schema, values }
    }

    /// Inverse of [`ParameterVector::pack`].
    pub fn unpack(&self) -> Vec<(String, Vec<f64>)> {
        self.schema
            .segments
            .iter()
            .map(|s| (s.name.clone(), self.values[s.range()].to_vec()))
            .collect()
    }

    pub fn schema(&self) -> &ParameterSchema {
        &self.schema
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.schema.segment(name).map(|s| &self.values[s.range()])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.schema.segment(name)?.range();
        Some(&mut self.values[r])
    }
}

/// A scalar loss over a flat parameter vector with an analytic gradient.
pub trait Objective {
    fn schema(&self) -> &ParameterSchema;

    /// Value and gradient at `params` (laid out per `schema`).
    fn evaluate(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Value only; objectives override this when it is cheaper than the gradient.
    fn value(&self, params: &[f64]) -> Result<f64> {
        self.evaluate(params).map(|(v, _)| v)
    }
}

/// Value and gradient of `objective` at `at`, rejecting non-finite results.
pub fn value_and_gradient<O: Objective + ?Sized>(objective: &O, at: &ParameterVector) -> Result<(f64, Vec<f64>)> {
    if at.schema() != objective.schema() {
        return Err(Error::InvalidInput("parameter schema does not match the objective".into()));
    }
    let (value, grad) = objective.evaluate(at.values())?;
    check_finite(at, value, &grad)?;
    Ok((value, grad))
}

/// Value and reverse-mode gradient of a loss recorded on a [`Tape`].
pub fn value_and_gradient_fn<F>(loss: F, at: &ParameterVector) -> Result<(f64, Vec<f64>)>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let inputs: Vec<Var<'_>> = at.values().iter().map(|&v| tape.var(v)).collect();
    let out = loss(&tape, &inputs);
    let grad_all = tape.gradient(out);
    let grad: Vec<f64> = inputs.iter().map(|v| grad_all[v.index]).collect();
    check_finite(at, out.value, &grad)?;
    Ok((out.value, grad))
}

fn check_finite(at: &ParameterVector, value: f64, grad: &[f64]) -> Result<()> {
    let offending = |pred: &dyn Fn(usize) -> bool| {
        (0..at.len())
            .find(|&i| pred(i))
            .and_then(|i| at.schema().segment_of(i))
            .map(|s| s.name.clone())
    };
    if !value.is_finite() {
        let segment = offending(&|i| !at.values()[i].is_finite())
            .or_else(|| offending(&|i| !grad[i].is_finite()))
            .unwrap_or_else(|| "<loss>".to_string());
        return Err(Error::NonFinite { segment });
    }
    if let Some(segment) = offending(&|i| !grad[i].is_finite()) {
        return Err(Error::NonFinite { segment });
    }
    Ok(())
}

/// Central differences with a fixed absolute step on every coordinate.
pub fn central_difference<F>(f: F, at: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut x = at.to_vec();
    let mut g = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let x0 = x[i];
        x[i] = x0 + step;
        let fp = f(&x)?;
        x[i] = x0 - step;
        let fm = f(&x)?;
        x[i] = x0;
        g.push((fp - fm) / (2.0 * step));
    }
    Ok(g)
}

/// Derivative of `f` along coordinate `i` by Ridders' extrapolation of
/// central differences, starting from step `h0`. Returns (estimate, error estimate).
pub fn ridders_partial<F>(f: F, at: &[f64], i: usize, h0: f64) -> Result<(f64, f64)>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    const CON: f64 = 1.4;
    const CON2: f64 = CON * CON;
    const NTAB: usize = 10;
    const SAFE: f64 = 2.0;
    let mut x = at.to_vec();
    let mut central = |h: f64| -> Result<f64> {
        x[i] = at[i] + h;
        let up = f(&x)?;
        x[i] = at[i] - h;
        let down = f(&x)?;
        x[i] = at[i];
        Ok((up - down) / (2.0 * h))
    };
    let mut a = [[0.0f64; NTAB]; NTAB];
    let mut h = h0;
    a[0][0] = central(h)?;
    let mut best = (a[0][0], f64::INFINITY);
    for col in 1..NTAB {
        h /= CON;
        a[0][col] = central(h)?;
        let mut fac = CON2;
        for j in 1..=col {
            a[j][col] = (a[j - 1][col] * fac - a[j - 1][col - 1]) / (fac - 1.0);
            fac *= CON2;
            let errt = (a[j][col] - a[j - 1][col]).abs().max((a[j][col] - a[j - 1][col - 1]).abs());
            if errt <= best.1 {
                best = (a[j][col], errt);
            }
        }
        if (a[col][col] - a[col - 1][col - 1]).abs() >= SAFE * best.1 {
            break;
        }
    }
    Ok(best)
}

/// Worst relative disagreement between an analytic and a reference gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
}

/// Compare coordinates whose magnitude (in either gradient) exceeds `floor`.
pub fn compare_gradients(analytic: &[f64], reference: &[f64], floor: f64) -> GradientCheck {
    let mut out = GradientCheck { max_rel_error: 0.0, worst_index: None, checked: 0 };
    for (i, (&a, &r)) in analytic.iter().zip(reference).enumerate() {
        let scale = a.abs().max(r.abs());
        if scale <= floor {
            continue;
        }
        out.checked += 1;
        let e = (a - r).abs() / scale;
        if out.worst_index.is_none() || e > out.max_rel_error {
            out.max_rel_error = e;
            out.worst_index = Some(i);
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct Node {
    parents: [(usize, f64); 2],
    arity: u8,
}

/// Scalar reverse-mode recorder.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
    value: f64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(value, [(0, 0.0); 2], 0)
    }

    pub fn constant(&self, value: f64) -> Var<'_> {
        self.var(value)
    }

    fn push(&self, value: f64, parents: [(usize, f64); 2], arity: u8) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents, arity });
        Var { tape: self, index: nodes.len() - 1, value }
    }

    /// d out / d node for every recorded node.
    pub fn gradient(&self, out: Var<'_>) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        adj[out.index] = 1.0;
        for i in (0..=out.index).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = nodes[i];
            for &(p, w) in &node.parents[..node.arity as usize] {
                adj[p] += a * w;
            }
        }
        adj
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.value
    }

    fn unary(self, value: f64, d: f64) -> Var<'t> {
        self.tape.push(value, [(self.index, d), (0, 0.0)], 1)
    }

    fn binary(self, other: Var<'t>, value: f64, da: f64, db: f64) -> Var<'t> {
        self.tape.push(value, [(self.index, da), (other.index, db)], 2)
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value.exp();
        self.unary(v, v)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(self.value.ln(), 1.0 / self.value)
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.value.sqrt();
        self.unary(v, 0.5 / v)
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.unary(self.value.powf(p), p * self.value.powf(p - 1.0))
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(self.value.sin(), self.value.cos())
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(self.value.cos(), -self.value.sin())
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value.tanh();
        self.unary(v, 1.0 - v * v)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = crate::flow::sigmoid(self.value);
        self.unary(v, v * (1.0 - v))
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(crate::flow::softplus(self.value), crate::flow::sigmoid(self.value))
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, self.value + o.value, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, self.value - o.value, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, self.value * o.value, o.value, self.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, o: Var<'t>) -> Var<'t> {
        let inv = 1.0 / o.value;
        self.binary(o, self.value * inv, inv, -self.value * inv * inv)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(-self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        self.unary(self.value + c, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, c: f64) -> Var<'t> {
        self.unary(self.value - c, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        self.unary(self.value * c, c)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, c: f64) -> Var<'t> {
        self.unary(self.value / c, 1.0 / c)
    }
}

/// Σ of a slice of tape variables (zero for an empty slice).
pub fn sum<'t>(tape: &'t Tape, xs: &[Var<'t>]) -> Var<'t> {
    xs.iter().fold(tape.constant(0.0), |acc, &x| acc + x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_part(a: Vec<f64>, b: Vec<f64>) -> ParameterVector {
        ParameterVector::pack([("weights", a), ("log_range", b)])
    }

    #[test]
    fn pack_unpack_round_trip() {
        let p = two_part(vec![1.0, 2.0, 3.0], vec![-0.5]);
        assert_eq!(p.len(), 4);
        assert_eq!(p.get("log_range"), Some(&[-0.5][..]));
        let parts = p.unpack();
        let q = ParameterVector::pack(parts);
        assert_eq!(p, q);
        assert_eq!(p.schema().segment_of(2).unwrap().name, "weights");
        assert_eq!(p.schema().segment_of(3).unwrap().name, "log_range");
        assert!(p.schema().segment_of(4).is_none());
    }

    #[test]
    fn squared_norm() {
        let at = ParameterVector::pack([("x", vec![1.0, 2.0])]);
        let (v, g) = value_and_gradient_fn(|t, x| sum(t, &x.iter().map(|&xi| xi * xi).collect::<Vec<_>>()), &at).unwrap();
        assert_eq!(v, 5.0);
        assert_eq!(g, vec![2.0, 4.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let at = ParameterVector::pack([("x", vec![0.3, -1.0, 7.0])]);
        let (v, g) = value_and_gradient_fn(|t, _| t.constant(4.5), &at).unwrap();
        assert_eq!(v, 4.5);
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn non_finite_loss_names_segment() {
        let at = two_part(vec![1.0, 2.0], vec![-1.0]);
        let err = value_and_gradient_fn(|_, x| x[0] + x[2].sqrt(), &at).unwrap_err();
        match err {
            Error::NonFinite { segment } => assert_eq!(segment, "log_range"),
            other => panic!("unexpected {other:?}"),
        }
        let at = two_part(vec![f64::NAN, 2.0], vec![1.0]);
        match value_and_gradient_fn(|_, x| x[0] + x[2], &at).unwrap_err() {
            Error::NonFinite { segment } => assert_eq!(segment, "weights"),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn composite<'t>(t: &'t Tape, x: &[Var<'t>]) -> Var<'t> {
        let a = (x[0] * x[1]).sin() + x[2].tanh() * 3.0;
        let b = (x[0] * x[0] + x[2] * x[2] + 1.0).ln() / (x[1].sigmoid() + 0.5);
        let c = x[1].softplus().sqrt() - x[0].cos().exp();
        sum(t, &[a, b, c])
    }

    #[test]
    fn tape_matches_finite_differences() {
        let at = ParameterVector::pack([("x", vec![0.4, -1.3, 0.9])]);
        let (_, g) = value_and_gradient_fn(composite, &at).unwrap();
        let fd = central_difference(
            |x| {
                let p = ParameterVector::pack([("x", x.to_vec())]);
                value_and_gradient_fn(composite, &p).map(|r| r.0)
            },
            at.values(),
            1e-5,
        )
        .unwrap();
        let check = compare_gradients(&g, &fd, 1e-8);
        assert_eq!(check.checked, 3);
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    proptest! {
        #[test]
        fn gradient_is_linear(x in proptest::collection::vec(-2.0f64..2.0, 3), w1 in -3.0f64..3.0, w2 in -3.0f64..3.0) {
            let at = ParameterVector::pack([("x", x)]);
            let (_, g1) = value_and_gradient_fn(composite, &at).unwrap();
            let (_, g2) = value_and_gradient_fn(|t, v| {
                let q: Vec<_> = v.iter().map(|&a| a * a * a).collect();
                sum(t, &q)
            }, &at).unwrap();
            let (_, gsum) = value_and_gradient_fn(|t, v| {
                let q: Vec<_> = v.iter().map(|&a| a * a * a).collect();
                composite(t, v) * w1 + sum(t, &q) * w2
            }, &at).unwrap();
            for i in 0..3 {
                let expect = w1 * g1[i] + w2 * g2[i];
                prop_assert!((gsum[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
            }
        }

        #[test]
        fn deterministic(x in proptest::collection::vec(-2.0f64..2.0, 3)) {
            let at = ParameterVector::pack([("x", x)]);
            let a = value_and_gradient_fn(composite, &at).unwrap();
            let b = value_and_gradient_fn(composite, &at).unwrap();
            prop_assert_eq!(a.0.to_bits(), b.0.to_bits());
            prop_assert!(a.1.iter().zip(&b.1).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
