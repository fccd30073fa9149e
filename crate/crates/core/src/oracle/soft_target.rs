use rand::Rng;

use crate::drift_field::{drifting_field, Kernel, SampleBatch};
use crate::error::{Error, Result};
use crate::DfpRng;

use super::quadrature::box_integral;
use super::{default_trend, FieldFn, GaussianMixture, Trend};

/// Minimum acceptance rate of the rejection samplers.
pub const MIN_ACCEPTANCE: f64 = 1e-4;
const QUAD_REL_TOL: f64 = 1e-10;

/// State-independent analytic critics; oracle instances fix a single state.
#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticQ {
    Constant(f64),
    /// `Q(a) = w . a`.
    Linear(Vec<f64>),
    /// `Q(a) = -scale |a - center|^2`.
    Quadratic { center: Vec<f64>, scale: f64 },
}

impl AnalyticQ {
    pub fn value(&self, a: &[f64]) -> f64 {
        match self {
            AnalyticQ::Constant(c) => *c,
            AnalyticQ::Linear(w) => w.iter().zip(a).map(|(w, a)| w * a).sum(),
            AnalyticQ::Quadratic { center, scale } => {
                -scale * a.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum::<f64>()
            }
        }
    }

    pub fn grad(&self, a: &[f64]) -> Vec<f64> {
        match self {
            AnalyticQ::Constant(_) => vec![0.0; a.len()],
            AnalyticQ::Linear(w) => w.clone(),
            AnalyticQ::Quadratic { center, scale } => a
                .iter()
                .zip(center)
                .map(|(a, c)| -2.0 * scale * (a - c))
                .collect(),
        }
    }

    /// Exact `(min, max)` of `Q` over `[-1, 1]^dim`.
    pub fn box_bounds(&self, dim: usize) -> (f64, f64) {
        match self {
            AnalyticQ::Constant(c) => (*c, *c),
            AnalyticQ::Linear(w) => {
                let r: f64 = w.iter().map(|v| v.abs()).sum();
                (-r, r)
            }
            AnalyticQ::Quadratic { center, scale } => {
                let near: f64 = center
                    .iter()
                    .map(|c| {
                        let d = c - c.clamp(-1.0, 1.0);
                        d * d
                    })
                    .sum();
                let far: f64 = center.iter().map(|c| (c.abs() + 1.0).powi(2)).sum();
                debug_assert_eq!(center.len(), dim);
                let (a, b) = (-scale * near, -scale * far);
                (a.min(b), a.max(b))
            }
        }
    }

    fn dim(&self) -> Option<usize> {
        match self {
            AnalyticQ::Constant(_) => None,
            AnalyticQ::Linear(w) => Some(w.len()),
            AnalyticQ::Quadratic { center, .. } => Some(center.len()),
        }
    }
}

/// `pi_old` (the base mixture truncated to `[-1, 1]^d`), a critic and a
/// temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargetSpec {
    pub base: GaussianMixture,
    pub q: AnalyticQ,
    pub alpha: f64,
}

impl SoftTargetSpec {
    pub fn new(base: GaussianMixture, q: AnalyticQ, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha must be positive, got {alpha}")));
        }
        if base.dim() > 2 {
            return Err(Error::InvalidConfig("oracle actions are at most 2-dimensional".into()));
        }
        if let Some(d) = q.dim() {
            if d != base.dim() {
                return Err(Error::DimensionMismatch {
                    context: "critic dimension",
                    expected: base.dim(),
                    got: d,
                });
            }
        }
        Ok(Self { base, q, alpha })
    }
}

fn in_box(a: &[f64]) -> bool {
    a.iter().all(|v| (-1.0..=1.0).contains(v))
}

/// Normalised soft target `pi+ ∝ pi_old exp(Q / alpha)` on the action box.
#[derive(Debug, Clone)]
pub struct SoftTarget {
    spec: SoftTargetSpec,
    q_min: f64,
    q_max: f64,
    /// `int_box base`.
    base_mass: f64,
    /// `int_box base exp((Q - q_max) / alpha)`.
    tilted_mass: f64,
}

impl SoftTarget {
    pub fn new(spec: SoftTargetSpec) -> Result<Self> {
        let d = spec.base.dim();
        let (q_min, q_max) = spec.q.box_bounds(d);
        let base_mass = box_integral(d, |a| spec.base.density(a), QUAD_REL_TOL)?;
        let tilted_mass = box_integral(
            d,
            |a| spec.base.density(a) * ((spec.q.value(a) - q_max) / spec.alpha).exp(),
            QUAD_REL_TOL,
        )?;
        if !(base_mass > 0.0 && tilted_mass > 0.0) {
            return Err(Error::Quadrature {
                estimate: tilted_mass,
                error: f64::NAN,
            });
        }
        Ok(Self {
            spec,
            q_min,
            q_max,
            base_mass,
            tilted_mass,
        })
    }

    pub fn spec(&self) -> &SoftTargetSpec {
        &self.spec
    }

    /// Truncated base density.
    pub fn old_density(&self, a: &[f64]) -> f64 {
        if !in_box(a) {
            return 0.0;
        }
        self.spec.base.density(a) / self.base_mass
    }

    pub fn density(&self, a: &[f64]) -> f64 {
        if !in_box(a) {
            return 0.0;
        }
        let tilt = ((self.spec.q.value(a) - self.q_max) / self.spec.alpha).exp();
        self.spec.base.density(a) * tilt / self.tilted_mass
    }

    /// `grad log pi+ = grad log pi_old + grad Q / alpha` inside the box.
    pub fn score(&self, a: &[f64]) -> Vec<f64> {
        let gq = self.spec.q.grad(a);
        self.spec
            .base
            .score(a)
            .into_iter()
            .zip(gq)
            .map(|(s, g)| s + g / self.spec.alpha)
            .collect()
    }

    /// Exact draws: propose from the base, keep proposals inside the box with
    /// probability `exp((Q - max Q) / alpha)`.
    pub fn sample(&self, n: usize, rng: &mut DfpRng) -> Result<SampleBatch> {
        let d = self.spec.base.dim();
        let mut data = Vec::with_capacity(n * d);
        let mut proposals = 0u64;
        let mut accepted = 0usize;
        while accepted < n {
            let a = self.spec.base.sample(rng);
            proposals += 1;
            if in_box(&a) {
                let p = ((self.spec.q.value(&a) - self.q_max) / self.spec.alpha).exp();
                if rng.random::<f64>() < p {
                    data.extend_from_slice(&a);
                    accepted += 1;
                }
            }
            if proposals >= 10_000 {
                let rate = accepted as f64 / proposals as f64;
                if rate < MIN_ACCEPTANCE {
                    return Err(Error::RejectionRate { rate });
                }
            }
        }
        SampleBatch::from_flat(d, data)
    }

    /// Worst-case proposals per accepted draw inside the box.
    pub fn envelope(&self) -> f64 {
        ((self.q_max - self.q_min) / self.spec.alpha).exp()
    }
}

/// Density of the soft target at `a`; builds the normaliser on every call.
pub fn pi_plus_density(spec: &SoftTargetSpec, a: &[f64]) -> Result<f64> {
    Ok(SoftTarget::new(spec.clone())?.density(a))
}

#[derive(Debug, Clone)]
pub struct DecompositionConfig {
    pub bandwidths: Vec<f64>,
    /// Samples per distribution per bandwidth.
    pub n: usize,
    pub probes: Vec<Vec<f64>>,
    pub field: FieldFn,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        Self {
            bandwidths: vec![0.3, 0.15, 0.05],
            n: 10_000,
            probes: vec![vec![-0.2], vec![0.0], vec![0.15], vec![0.3]],
            field: drifting_field,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionReport {
    pub bandwidths: Vec<f64>,
    /// `sum_probes |V_sampled - V_pred| / sum_probes |V_pred|` per bandwidth;
    /// NaN when the prediction vanishes.
    pub relative_gaps: Vec<f64>,
    /// `max_probes |V_sampled - V_pred|` per bandwidth.
    pub absolute_gaps: Vec<f64>,
    /// Per probe at the last bandwidth: the sampled field projected on the
    /// unit critic gradient (zero where the gradient vanishes).
    pub q_alignment: Vec<f64>,
    pub trend: Option<Trend>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Compares the sampled field `V_{pi+, pi_theta}` with
/// `(h^2 / alpha) grad Q + h^2 (grad log pi_old - grad log pi_theta)`.
pub fn verify_decomposition(
    spec: &SoftTargetSpec,
    theta: &GaussianMixture,
    cfg: &DecompositionConfig,
    rng: &mut DfpRng,
) -> Result<DecompositionReport> {
    if theta.dim() != spec.base.dim() {
        return Err(Error::DimensionMismatch {
            context: "policy mixture",
            expected: spec.base.dim(),
            got: theta.dim(),
        });
    }
    let target = SoftTarget::new(spec.clone())?;
    let mut relative_gaps = Vec::new();
    let mut absolute_gaps = Vec::new();
    let mut q_alignment = Vec::new();
    for &h in &cfg.bandwidths {
        let k = Kernel::new(h)?;
        let plus = target.sample(cfg.n, rng)?;
        let model = theta.sample_batch(cfg.n, rng);
        let (mut diff_sum, mut pred_sum, mut abs_max) = (0.0, 0.0, 0.0f64);
        q_alignment.clear();
        for x in &cfg.probes {
            let v = (cfg.field)(&k, x, &plus, &model)?;
            let gq = spec.q.grad(x);
            let so = spec.base.score(x);
            let st = theta.score(x);
            let pred: Vec<f64> = (0..x.len())
                .map(|i| h * h * (gq[i] / spec.alpha + so[i] - st[i]))
                .collect();
            let d: Vec<f64> = v.iter().zip(&pred).map(|(a, b)| a - b).collect();
            diff_sum += norm(&d);
            pred_sum += norm(&pred);
            abs_max = abs_max.max(norm(&d));
            let gn = norm(&gq);
            q_alignment.push(if gn > 0.0 {
                v.iter().zip(&gq).map(|(a, g)| a * g).sum::<f64>() / gn
            } else {
                0.0
            });
        }
        relative_gaps.push(if pred_sum > 0.0 { diff_sum / pred_sum } else { f64::NAN });
        absolute_gaps.push(abs_max);
    }
    let trend = (cfg.bandwidths.len() >= 2 && relative_gaps.iter().all(|g| g.is_finite()))
        .then(|| default_trend(&relative_gaps));
    Ok(DecompositionReport {
        bandwidths: cfg.bandwidths.clone(),
        relative_gaps,
        absolute_gaps,
        q_alignment,
        trend,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn normal(mean: f64, sd: f64) -> GaussianMixture {
        GaussianMixture::gaussian(vec![mean], vec![sd * sd]).unwrap()
    }

    #[test]
    fn constant_critic_returns_old_policy() {
        let spec = SoftTargetSpec::new(normal(0.2, 0.7), AnalyticQ::Constant(3.0), 0.5).unwrap();
        let t = SoftTarget::new(spec).unwrap();
        for a in [-0.9, -0.1, 0.4, 0.95] {
            assert_relative_eq!(t.density(&[a]) / t.old_density(&[a]), 1.0, max_relative = 1e-6);
        }
    }

    #[test]
    fn hot_temperature_returns_old_policy() {
        let spec = SoftTargetSpec::new(normal(0.0, 0.5), AnalyticQ::Linear(vec![1.0]), 1e6).unwrap();
        let t = SoftTarget::new(spec).unwrap();
        for a in [-0.8, 0.0, 0.6] {
            assert!((t.density(&[a]) - t.old_density(&[a])).abs() < 1e-4);
        }
    }

    #[test]
    fn quadratic_tilt_matches_gaussian_product() {
        // N(0,1) exp(-a^2) = N(0, 1/3) up to a constant, renormalised on the box
        let spec = SoftTargetSpec::new(
            normal(0.0, 1.0),
            AnalyticQ::Quadratic {
                center: vec![0.0],
                scale: 1.0,
            },
            1.0,
        )
        .unwrap();
        let t = SoftTarget::new(spec.clone()).unwrap();
        let sd = (1.0f64 / 3.0).sqrt();
        let mass = statrs::function::erf::erf(1.0 / (sd * 2f64.sqrt()));
        for a in [-0.7, 0.0, 0.3, 0.99] {
            let g = (-a * a / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
            assert_relative_eq!(t.density(&[a]), g / mass, max_relative = 1e-8);
            assert_relative_eq!(pi_plus_density(&spec, &[a]).unwrap(), g / mass, max_relative = 1e-8);
        }
    }

    #[test]
    fn densities_integrate_to_one_in_two_dimensions() {
        let base = GaussianMixture::gaussian(vec![0.1, -0.3], vec![0.3, 0.5]).unwrap();
        let spec = SoftTargetSpec::new(base, AnalyticQ::Linear(vec![0.5, -1.0]), 0.4).unwrap();
        let t = SoftTarget::new(spec).unwrap();
        let total = box_integral(2, |a| t.density(a), 1e-9).unwrap();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
        assert_eq!(t.density(&[1.2, 0.0]), 0.0);
    }

    #[test]
    fn rejection_samples_follow_the_density() {
        let spec = SoftTargetSpec::new(normal(0.0, 0.3), AnalyticQ::Linear(vec![1.0]), 0.3).unwrap();
        let t = SoftTarget::new(spec).unwrap();
        let mut rng = DfpRng::seed_from_u64(0);
        let n = 50_000;
        let s = t.sample(n, &mut rng).unwrap();
        let mean = s.points().map(|p| p[0]).sum::<f64>() / n as f64;
        let exact = box_integral(1, |a| a[0] * t.density(a), 1e-10).unwrap();
        assert!((mean - exact).abs() < 4.0 * 0.3 / (n as f64).sqrt(), "{mean} vs {exact}");
    }

    #[test]
    fn tiny_acceptance_is_an_error() {
        let spec = SoftTargetSpec::new(normal(6.0, 0.5), AnalyticQ::Constant(0.0), 1.0).unwrap();
        let t = SoftTarget::new(spec).unwrap();
        let mut rng = DfpRng::seed_from_u64(1);
        assert!(matches!(t.sample(10, &mut rng), Err(Error::RejectionRate { .. })));
    }

    #[test]
    fn matching_policies_and_flat_critic_give_zero_prediction() {
        let spec = SoftTargetSpec::new(normal(0.0, 0.3), AnalyticQ::Constant(1.0), 0.3).unwrap();
        let cfg = DecompositionConfig {
            bandwidths: vec![0.1],
            n: 5000,
            ..DecompositionConfig::default()
        };
        let mut rng = DfpRng::seed_from_u64(2);
        let rep = verify_decomposition(&spec, &normal(0.0, 0.3), &cfg, &mut rng).unwrap();
        assert!(rep.relative_gaps[0].is_nan());
        assert!(rep.absolute_gaps[0] < 0.01, "{:?}", rep.absolute_gaps);
    }

    #[test]
    fn field_follows_the_critic_gradient() {
        let spec = SoftTargetSpec::new(normal(0.0, 0.3), AnalyticQ::Linear(vec![1.0]), 0.3).unwrap();
        let cfg = DecompositionConfig {
            bandwidths: vec![0.1],
            n: 5000,
            ..DecompositionConfig::default()
        };
        let mut rng = DfpRng::seed_from_u64(3);
        let rep = verify_decomposition(&spec, &normal(0.0, 0.3), &cfg, &mut rng).unwrap();
        assert!(rep.q_alignment.iter().all(|v| *v > 0.0), "{:?}", rep.q_alignment);
    }
}
