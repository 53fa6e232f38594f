//! Locations, observation sets, regular grids and min-max standardization.

use std::ops::Deref;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Locations closer than this (in every coordinate) are treated as the same site.
pub const DUPLICATE_TOLERANCE: f64 = 1e-12;

/// A point in D ⊂ ℝᵈ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialLocation(Vec<f64>);

impl SpatialLocation {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidInput("a location needs at least one coordinate".into()));
        }
        if let Some(i) = coords.iter().position(|c| !c.is_finite()) {
            return Err(Error::InvalidInput(format!("coordinate {i} is not finite")));
        }
        Ok(Self(coords))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for SpatialLocation {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// N noisy observations Z_i at distinct sites s_i.
///
/// Locations are stored as an N×d row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialDataset {
    locations: Array2<f64>,
    values: Array1<f64>,
    axis_names: Option<Vec<String>>,
}

impl SpatialDataset {
    pub fn new(locations: Array2<f64>, values: Array1<f64>) -> Result<Self> {
        let (n, d) = locations.dim();
        if n == 0 || d == 0 {
            return Err(Error::InvalidInput("dataset needs at least one location and one axis".into()));
        }
        if values.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: values.len() });
        }
        if locations.iter().chain(values.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("dataset contains non-finite entries".into()));
        }
        if let Some((first, second)) = find_duplicate(locations.view()) {
            return Err(Error::DuplicateLocation { first, second });
        }
        Ok(Self { locations, values, axis_names: None })
    }

    pub fn with_axis_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: names.len() });
        }
        self.axis_names = Some(names);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.locations.ncols()
    }

    pub fn locations(&self) -> ArrayView2<'_, f64> {
        self.locations.view()
    }

    pub fn location(&self, i: usize) -> ArrayView1<'_, f64> {
        self.locations.row(i)
    }

    pub fn values(&self) -> ArrayView1<'_, f64> {
        self.values.view()
    }

    pub fn axis_names(&self) -> Option<&[String]> {
        self.axis_names.as_deref()
    }

    /// Same observations with `values` replaced.
    pub fn with_values(&self, values: Array1<f64>) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got: values.len() });
        }
        Ok(Self { locations: self.locations.clone(), values, axis_names: self.axis_names.clone() })
    }

    /// Rows `idx` of this dataset, in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let locations = self.locations.select(Axis(0), idx);
        let values = self.values.select(Axis(0), idx);
        let mut out = Self::new(locations, values)?;
        out.axis_names = self.axis_names.clone();
        Ok(out)
    }

    /// Length of the diagonal of the bounding box of the locations.
    pub fn bounding_diameter(&self) -> f64 {
        self.locations
            .axis_iter(Axis(1))
            .map(|col| {
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (hi - lo).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// First pair of rows that coincide within [`DUPLICATE_TOLERANCE`], if any.
pub fn find_duplicate(locations: ArrayView2<'_, f64>) -> Option<(usize, usize)> {
    let n = locations.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| locations[[a, 0]].total_cmp(&locations[[b, 0]]));
    for (pos, &i) in order.iter().enumerate() {
        for &j in &order[pos + 1..] {
            if locations[[j, 0]] - locations[[i, 0]] > DUPLICATE_TOLERANCE {
                break;
            }
            let same = locations
                .row(i)
                .iter()
                .zip(locations.row(j))
                .all(|(a, b)| (a - b).abs() <= DUPLICATE_TOLERANCE);
            if same {
                return Some((i.min(j), i.max(j)));
            }
        }
    }
    None
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl GridAxis {
    pub fn new(lo: f64, hi: f64, count: usize) -> Self {
        Self { lo, hi, count }
    }

    fn coordinate(&self, i: usize) -> f64 {
        if i + 1 == self.count {
            self.hi
        } else {
            self.lo + (self.hi - self.lo) * i as f64 / (self.count - 1) as f64
        }
    }
}

/// Tensor-product grid, enumerated row-major (last axis varies fastest).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularGrid {
    axes: Vec<GridAxis>,
}

impl RegularGrid {
    pub fn axes(&self) -> &[GridAxis] {
        &self.axes
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, mut index: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.dim()];
        for (k, axis) in self.axes.iter().enumerate().rev() {
            p[k] = axis.coordinate(index % axis.count);
            index /= axis.count;
        }
        p
    }

    pub fn points(&self) -> Array2<f64> {
        let n = self.len();
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            for (dst, v) in row.iter_mut().zip(self.point(i)) {
                *dst = v;
            }
        }
        out
    }
}

pub fn make_grid(axes: &[GridAxis]) -> Result<RegularGrid> {
    if axes.is_empty() {
        return Err(Error::InvalidInput("grid needs at least one axis".into()));
    }
    for (k, a) in axes.iter().enumerate() {
        if a.count < 2 {
            return Err(Error::InvalidInput(format!("grid axis {k} needs at least 2 points, got {}", a.count)));
        }
        if !(a.lo.is_finite() && a.hi.is_finite() && a.lo < a.hi) {
            return Err(Error::InvalidInput(format!("grid axis {k} needs lo < hi, got [{}, {}]", a.lo, a.hi)));
        }
    }
    Ok(RegularGrid { axes: axes.to_vec() })
}

/// Per-axis min-max rescaling onto [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizationTransform {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl StandardizationTransform {
    pub fn identity(dim: usize) -> Self {
        Self { min: vec![0.0; dim], max: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn apply(&self, raw: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_dim(raw.ncols())?;
        let mut out = raw.to_owned();
        for (k, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (lo, span) = (self.min[k], self.max[k] - self.min[k]);
            col.mapv_inplace(|v| (v - lo) / span);
        }
        Ok(out)
    }

    pub fn invert(&self, standardized: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_dim(standardized.ncols())?;
        let mut out = standardized.to_owned();
        for (k, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (lo, span) = (self.min[k], self.max[k] - self.min[k]);
            col.mapv_inplace(|v| lo + v * span);
        }
        Ok(out)
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: d });
        }
        Ok(())
    }
}

/// Rescale each axis of `raw` (N×d) onto [0, 1].
pub fn standardize(raw: ArrayView2<'_, f64>) -> Result<(Array2<f64>, StandardizationTransform)> {
    standardize_named(raw, None)
}

/// As [`standardize`]; `names` only labels the axis in the degenerate-axis error.
pub fn standardize_named(
    raw: ArrayView2<'_, f64>,
    names: Option<&[String]>,
) -> Result<(Array2<f64>, StandardizationTransform)> {
    if raw.nrows() < 2 {
        return Err(Error::InvalidInput("standardization needs at least two locations".into()));
    }
    let mut min = Vec::with_capacity(raw.ncols());
    let mut max = Vec::with_capacity(raw.ncols());
    for (k, col) in raw.axis_iter(Axis(1)).enumerate() {
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::InvalidInput(format!("axis {k} contains non-finite coordinates")));
        }
        if hi <= lo {
            let name = names
                .and_then(|n| n.get(k).cloned())
                .unwrap_or_else(|| format!("s{}", k + 1));
            return Err(Error::DegenerateAxis { axis: k, name, value: lo });
        }
        min.push(lo);
        max.push(hi);
    }
    let transform = StandardizationTransform { min, max };
    let out = transform.apply(raw)?;
    Ok((out, transform))
}
