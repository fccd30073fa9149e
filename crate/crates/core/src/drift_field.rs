//! Kernel mean shift, the drifting field and KDE scores.
//!
//! All kernels are Gaussian, `k(x, y) = exp(-|x - y|^2 / (2 h^2))`. Kernel
//! weights are normalised in the log domain so bandwidths far below the
//! sample spacing do not underflow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor on the raw kernel denominator `E[k(x, y)]` for strict kernels.
pub const DEFAULT_DEN_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    bandwidth: f64,
    den_floor: Option<f64>,
}

impl Kernel {
    pub fn new(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "kernel bandwidth must be positive, got {bandwidth}"
            )));
        }
        Ok(Self {
            bandwidth,
            den_floor: None,
        })
    }

    /// Reject mean shifts whose raw denominator `E[k(x, y)]` is below `floor`.
    pub fn with_den_floor(self, floor: f64) -> Self {
        Self {
            den_floor: Some(floor),
            ..self
        }
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn log_eval(&self, x: &[f64], y: &[f64]) -> f64 {
        -sq_dist(x, y) / (2.0 * self.bandwidth * self.bandwidth)
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dim("kernel arguments", x.len(), y.len())?;
        Ok(self.log_eval(x, y).exp())
    }
}

#[inline]
pub(crate) fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        });
    }
    Ok(())
}

/// Sorted, deduplicated list of kernel bandwidths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BandwidthSet(Vec<f64>);

impl BandwidthSet {
    pub fn new(mut bandwidths: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() {
            return Err(Error::InvalidConfig("bandwidth set is empty".into()));
        }
        if let Some(h) = bandwidths.iter().find(|h| !(**h > 0.0 && h.is_finite())) {
            return Err(Error::InvalidConfig(format!(
                "bandwidths must be positive, got {h}"
            )));
        }
        bandwidths.sort_by(f64::total_cmp);
        bandwidths.dedup();
        Ok(Self(bandwidths))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn kernels(&self) -> impl Iterator<Item = Kernel> + '_ {
        self.0.iter().map(|&h| Kernel {
            bandwidth: h,
            den_floor: None,
        })
    }
}

impl TryFrom<Vec<f64>> for BandwidthSet {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BandwidthSet> for Vec<f64> {
    fn from(b: BandwidthSet) -> Self {
        b.0
    }
}

/// How per-bandwidth fields are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
}

/// Points in action space, optionally weighted, stored row-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleBatch {
    dim: usize,
    data: Vec<f64>,
    weights: Option<Vec<f64>>,
}

impl SampleBatch {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
            weights: None,
        }
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                context: "flat sample batch",
                expected: dim,
                got: data.len(),
            });
        }
        Ok(Self {
            dim,
            data,
            weights: None,
        })
    }

    pub fn from_points<P: AsRef<[f64]>>(points: &[P]) -> Result<Self> {
        let dim = points.first().map(|p| p.as_ref().len()).unwrap_or(0);
        let mut b = Self::new(dim);
        for p in points {
            b.push(p.as_ref())?;
        }
        Ok(b)
    }

    /// Attach per-point weights; they must be positive with a positive sum.
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        check_dim("sample weights", self.len(), weights.len())?;
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidConfig("sample weights must be positive".into()));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn push(&mut self, point: &[f64]) -> Result<()> {
        if self.weights.is_some() {
            return Err(Error::InvalidConfig(
                "cannot push unweighted point onto weighted batch".into(),
            ));
        }
        if self.dim == 0 {
            self.dim = point.len();
        }
        check_dim("sample point", self.dim, point.len())?;
        self.data.extend_from_slice(point);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// The batch with point `i` removed (weights follow).
    pub fn without(&self, i: usize) -> Self {
        let mut data = self.data.clone();
        data.drain(i * self.dim..(i + 1) * self.dim);
        let weights = self.weights.as_ref().map(|w| {
            let mut w = w.clone();
            w.remove(i);
            w
        });
        Self {
            dim: self.dim,
            data,
            weights,
        }
    }

    /// Keep only the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.point(i));
        }
        let weights = self
            .weights
            .as_ref()
            .map(|w| indices.iter().map(|&i| w[i]).collect());
        Self {
            dim: self.dim,
            data,
            weights,
        }
    }
}

/// Kernel mean shift `E[k(x,y)(y - x)] / E[k(x,y)]` over `batch`.
///
/// An empty batch is an error; so is a denominator that vanishes in the log
/// domain, or falls below the kernel's raw floor when one is set.
pub fn mean_shift(kernel: &Kernel, x: &[f64], batch: &SampleBatch) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_dim("mean shift query", batch.dim(), x.len())?;
    let inv = 1.0 / (2.0 * kernel.bandwidth * kernel.bandwidth);
    let logw: Vec<f64> = match batch.weights() {
        Some(w) => batch
            .points()
            .zip(w)
            .map(|(y, wi)| wi.ln() - sq_dist(x, y) * inv)
            .collect(),
        None => batch.points().map(|y| -sq_dist(x, y) * inv).collect(),
    };
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let underflow = |log_den: f64| Error::DenominatorUnderflow {
        x: x.to_vec(),
        log_den,
    };
    if !max.is_finite() {
        return Err(underflow(max));
    }
    let mut den = 0.0;
    let mut num = vec![0.0; x.len()];
    for (y, lw) in batch.points().zip(&logw) {
        let w = (lw - max).exp();
        den += w;
        for ((n, yi), xi) in num.iter_mut().zip(y).zip(x) {
            *n += w * (yi - xi);
        }
    }
    if let Some(floor) = kernel.den_floor {
        let total_w = batch
            .weights()
            .map(|w| w.iter().sum::<f64>())
            .unwrap_or(batch.len() as f64);
        let log_den = max + den.ln() - total_w.ln();
        if log_den < floor.ln() {
            return Err(underflow(log_den));
        }
    }
    num.iter_mut().for_each(|n| *n /= den);
    Ok(num)
}

/// Attraction toward `positives` minus repulsion from `negatives`.
pub fn drifting_field(
    kernel: &Kernel,
    x: &[f64],
    positives: &SampleBatch,
    negatives: &SampleBatch,
) -> Result<Vec<f64>> {
    let attract = mean_shift(kernel, x, positives)?;
    let repel = mean_shift(kernel, x, negatives)?;
    Ok(attract.iter().zip(&repel).map(|(a, r)| a - r).collect())
}

/// Drifting field combined across a bandwidth set.
pub fn multi_bandwidth_field(
    bandwidths: &BandwidthSet,
    aggregation: Aggregation,
    x: &[f64],
    positives: &SampleBatch,
    negatives: &SampleBatch,
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; x.len()];
    for k in bandwidths.kernels() {
        let v = drifting_field(&k, x, positives, negatives)?;
        acc.iter_mut().zip(&v).for_each(|(a, vi)| *a += vi);
    }
    if aggregation == Aggregation::Mean {
        let n = bandwidths.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
    }
    Ok(acc)
}

/// Score of the Gaussian KDE of `batch`: `mean_shift / h^2`.
pub fn kde_score(kernel: &Kernel, x: &[f64], batch: &SampleBatch) -> Result<Vec<f64>> {
    let h2 = kernel.bandwidth * kernel.bandwidth;
    Ok(mean_shift(kernel, x, batch)?
        .into_iter()
        .map(|m| m / h2)
        .collect())
}
