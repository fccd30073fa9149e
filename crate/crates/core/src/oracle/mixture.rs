use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::drift_field::SampleBatch;
use crate::error::{Error, Result};
use crate::DfpRng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Diagonal of the covariance.
    pub var: Vec<f64>,
}

/// Mixture of diagonal Gaussians with exact density, log-density and score.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<Component>,
    log_weights: Vec<f64>,
    dim: usize,
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let dim = components
            .first()
            .map(|c| c.mean.len())
            .ok_or_else(|| Error::InvalidConfig("mixture needs a component".into()))?;
        if dim == 0 {
            return Err(Error::InvalidConfig("mixture dimension must be positive".into()));
        }
        let mut total = 0.0;
        for c in &components {
            if c.mean.len() != dim || c.var.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: "mixture component",
                    expected: dim,
                    got: c.mean.len().max(c.var.len()),
                });
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "mixture weight must be positive, got {}",
                    c.weight
                )));
            }
            if c.var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidConfig("mixture variances must be positive".into()));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        let log_weights = components.iter().map(|c| c.weight.ln()).collect();
        Ok(Self {
            components,
            log_weights,
            dim,
        })
    }

    pub fn gaussian(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        Self::new(vec![Component {
            weight: 1.0,
            mean,
            var,
        }])
    }

    pub fn standard_normal(dim: usize) -> Result<Self> {
        Self::gaussian(vec![0.0; dim], vec![1.0; dim])
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn component_log_density(c: &Component, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((xi, m), v) in x.iter().zip(&c.mean).zip(&c.var) {
            let d = xi - m;
            acc -= 0.5 * (d * d / v + v.ln() + LN_2PI);
        }
        acc
    }

    fn log_terms(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| lw + Self::component_log_density(c, x))
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.log_terms(x))
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }

    /// `grad log p(x)` through normalised responsibilities, so it stays finite
    /// far in the tails where every component density underflows.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let terms = self.log_terms(x);
        let lse = log_sum_exp(&terms);
        let mut out = vec![0.0; self.dim];
        for (c, t) in self.components.iter().zip(&terms) {
            let r = (t - lse).exp();
            for (((o, xi), m), v) in out.iter_mut().zip(x).zip(&c.mean).zip(&c.var) {
                *o -= r * (xi - m) / v;
            }
        }
        out
    }

    pub fn sample(&self, rng: &mut DfpRng) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                pick = i;
                break;
            }
        }
        let c = &self.components[pick];
        c.mean
            .iter()
            .zip(&c.var)
            .map(|(m, v)| {
                let z: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * z
            })
            .collect()
    }

    pub fn sample_batch(&self, n: usize, rng: &mut DfpRng) -> SampleBatch {
        let mut data = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            data.extend(self.sample(rng));
        }
        SampleBatch::from_flat(self.dim, data).expect("dimension is positive")
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn bimodal() -> GaussianMixture {
        GaussianMixture::new(vec![
            Component {
                weight: 0.3,
                mean: vec![-1.0, 0.5],
                var: vec![0.2, 0.4],
            },
            Component {
                weight: 0.7,
                mean: vec![0.8, -0.2],
                var: vec![0.5, 0.1],
            },
        ])
        .unwrap()
    }

    #[test]
    fn standard_normal_score_is_minus_x() {
        let g = GaussianMixture::standard_normal(3).unwrap();
        assert_eq!(g.score(&[0.5, -2.0, 0.0]), vec![-0.5, 2.0, 0.0]);
    }

    #[test]
    fn shifted_normal_score() {
        let g = GaussianMixture::gaussian(vec![1.0], vec![0.25]).unwrap();
        assert_relative_eq!(g.score(&[2.0])[0], -4.0, epsilon = 1e-15);
    }

    #[test]
    fn mixture_score_matches_finite_differences() {
        let g = bimodal();
        for x in [[0.1, 0.2], [-1.3, 0.9], [2.0, -1.0]] {
            let s = g.score(&x);
            for i in 0..2 {
                let h = 1e-5;
                let mut up = x;
                let mut down = x;
                up[i] += h;
                down[i] -= h;
                let fd = (g.log_density(&up) - g.log_density(&down)) / (2.0 * h);
                assert_relative_eq!(s[i], fd, max_relative = 1e-7);
            }
        }
    }

    #[test]
    fn far_tail_score_stays_finite() {
        let g = bimodal();
        let s = g.score(&[80.0, -60.0]);
        assert!(s.iter().all(|v| v.is_finite()));
        assert!(g.density(&[80.0, -60.0]) == 0.0);
    }

    #[test]
    fn density_matches_closed_form() {
        let g = GaussianMixture::gaussian(vec![0.0], vec![1.0]).unwrap();
        let expected = (-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert_relative_eq!(g.density(&[1.0]), expected, max_relative = 1e-14);
    }

    #[test]
    fn sample_moments() {
        let g = bimodal();
        let mut rng = DfpRng::seed_from_u64(0);
        let n = 100_000;
        let b = g.sample_batch(n, &mut rng);
        let mean0 = b.points().map(|p| p[0]).sum::<f64>() / n as f64;
        let expected = 0.3 * -1.0 + 0.7 * 0.8;
        assert!((mean0 - expected).abs() < 0.02, "{mean0}");
    }

    #[test]
    fn weights_must_sum_to_one() {
        let c = Component {
            weight: 0.5,
            mean: vec![0.0],
            var: vec![1.0],
        };
        assert!(GaussianMixture::new(vec![c]).is_err());
    }
}
