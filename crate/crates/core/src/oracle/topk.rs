use rand::Rng;

use crate::drift_field::{mean_shift, sq_dist, Kernel, SampleBatch};
use crate::error::{Error, Result};
use crate::losses::top_k_indices;
use crate::DfpRng;

use super::soft_target::MIN_ACCEPTANCE;
use super::{default_trend, AnalyticQ, GaussianMixture, Trend};

/// `pi_old` restricted to the top `rho` fraction of critic values.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSetSpec {
    pub base: GaussianMixture,
    pub q: AnalyticQ,
    pub rho: f64,
}

/// Normalised density of `Q` at the quantile below which estimation is
/// considered unstable.
const MIN_QUANTILE_DENSITY: f64 = 1e-2;

impl LevelSetSpec {
    pub fn new(base: GaussianMixture, q: AnalyticQ, rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::InvalidConfig(format!("rho must be in (0, 1], got {rho}")));
        }
        Ok(Self { base, q, rho })
    }

    /// `K = round(rho N)`, at least one.
    pub fn k_for(&self, n: usize) -> usize {
        ((self.rho * n as f64).round() as usize).clamp(1, n.max(1))
    }

    /// Level `q^rho` with `P(Q >= q^rho) = rho`, from `samples` base draws.
    /// For `rho = 1` every action qualifies and the level is `-inf`.
    pub fn quantile(&self, samples: usize, rng: &mut DfpRng) -> Result<f64> {
        if self.rho >= 1.0 {
            return Ok(f64::NEG_INFINITY);
        }
        let mut q: Vec<f64> = (0..samples)
            .map(|_| self.q.value(&self.base.sample(rng)))
            .collect();
        q.sort_by(f64::total_cmp);
        let at = |p: f64| q[((p * (samples - 1) as f64).round() as usize).min(samples - 1)];
        let level = at(1.0 - self.rho);
        let spread = at(0.99) - at(0.01);
        let delta = 0.005 * spread;
        let near = q.iter().filter(|v| (*v - level).abs() < delta).count();
        let density = if spread > 0.0 {
            near as f64 / (samples as f64 * 2.0 * delta) * spread
        } else {
            0.0
        };
        if !(density >= MIN_QUANTILE_DENSITY) {
            return Err(Error::QuantileInstability { level, density });
        }
        Ok(level)
    }

    /// Base draws with `Q >= level`.
    pub fn sample_level_set(&self, level: f64, n: usize, rng: &mut DfpRng) -> Result<SampleBatch> {
        let mut data = Vec::with_capacity(n * self.base.dim());
        let (mut proposals, mut accepted) = (0u64, 0usize);
        while accepted < n {
            let a = self.base.sample(rng);
            proposals += 1;
            if self.q.value(&a) >= level {
                data.extend_from_slice(&a);
                accepted += 1;
            }
            if proposals >= 10_000 {
                let rate = accepted as f64 / proposals as f64;
                if rate < MIN_ACCEPTANCE {
                    return Err(Error::RejectionRate { rate });
                }
            }
        }
        SampleBatch::from_flat(self.base.dim(), data)
    }

    fn candidates(&self, n: usize, rng: &mut DfpRng) -> (SampleBatch, Vec<f64>) {
        let c = self.base.sample_batch(n, rng);
        let q = c.points().map(|a| self.q.value(a)).collect();
        (c, q)
    }
}

fn gap(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

#[derive(Debug, Clone)]
pub struct TopKLimitConfig {
    pub n_schedule: Vec<usize>,
    pub probes: Vec<Vec<f64>>,
    pub bandwidth: f64,
    /// Independent candidate draws averaged per `N`.
    pub repeats: usize,
    pub quantile_samples: usize,
    pub level_samples: usize,
}

impl Default for TopKLimitConfig {
    fn default() -> Self {
        Self {
            n_schedule: vec![16, 64, 256, 1024],
            probes: vec![vec![-0.5], vec![0.0], vec![0.5], vec![1.0]],
            bandwidth: 0.3,
            repeats: 50,
            quantile_samples: 1_000_000,
            level_samples: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopKLimitReport {
    pub q_rho: f64,
    pub n_schedule: Vec<usize>,
    pub k_schedule: Vec<usize>,
    /// Mean over repeats and probes of `|V+_topK - V+_levelset|`.
    pub gaps: Vec<f64>,
    pub trend: Trend,
}

/// Attraction field of the top-`K` of `N` candidates against the attraction
/// field of the level-set target, along a growing `N` schedule.
pub fn verify_topk_limit(
    spec: &LevelSetSpec,
    cfg: &TopKLimitConfig,
    rng: &mut DfpRng,
) -> Result<TopKLimitReport> {
    let k = Kernel::new(cfg.bandwidth)?;
    let q_rho = spec.quantile(cfg.quantile_samples, rng)?;
    let level = spec.sample_level_set(q_rho, cfg.level_samples, rng)?;
    let reference = cfg
        .probes
        .iter()
        .map(|x| mean_shift(&k, x, &level))
        .collect::<Result<Vec<_>>>()?;
    let mut gaps = Vec::with_capacity(cfg.n_schedule.len());
    let mut k_schedule = Vec::with_capacity(cfg.n_schedule.len());
    for &n in &cfg.n_schedule {
        let kk = spec.k_for(n);
        k_schedule.push(kk);
        let mut total = 0.0;
        for _ in 0..cfg.repeats {
            let (cand, q) = spec.candidates(n, rng);
            let top = cand.select(&top_k_indices(&q, kk)?);
            for (x, r) in cfg.probes.iter().zip(&reference) {
                total += gap(&mean_shift(&k, x, &top)?, r);
            }
        }
        gaps.push(total / (cfg.repeats * cfg.probes.len()).max(1) as f64);
    }
    let trend = default_trend(&gaps);
    Ok(TopKLimitReport {
        q_rho,
        n_schedule: cfg.n_schedule.clone(),
        k_schedule,
        gaps,
        trend,
    })
}

/// Two weightings of one finite support.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePair {
    pub atoms: Vec<Vec<f64>>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl DiscretePair {
    pub fn new(atoms: Vec<Vec<f64>>, p: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        for w in [&p, &q] {
            if w.len() != atoms.len() {
                return Err(Error::DimensionMismatch {
                    context: "discrete weights",
                    expected: atoms.len(),
                    got: w.len(),
                });
            }
            let total: f64 = w.iter().sum();
            if w.iter().any(|v| !(*v >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(
                    "discrete weights must be non-negative and sum to 1".into(),
                ));
            }
        }
        Ok(Self { atoms, p, q })
    }

    /// Random atoms in `[-1, 1]^dim` with independent Dirichlet(1) weights.
    pub fn random(n_atoms: usize, dim: usize, rng: &mut DfpRng) -> Self {
        let atoms = (0..n_atoms)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut weights = || {
            let e: Vec<f64> = (0..n_atoms)
                .map(|_| -(1.0 - rng.random::<f64>()).ln())
                .collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let p = weights();
        let q = weights();
        Self { atoms, p, q }
    }

    /// `(1/2) sum |p_i - q_i|`.
    pub fn tv(&self) -> f64 {
        0.5 * self.p.iter().zip(&self.q).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    fn batch(&self, w: &[f64]) -> Result<SampleBatch> {
        let keep: Vec<usize> = (0..w.len()).filter(|&i| w[i] > 0.0).collect();
        let pts: Vec<&[f64]> = keep.iter().map(|&i| self.atoms[i].as_slice()).collect();
        SampleBatch::from_points(&pts)?.with_weights(keep.iter().map(|&i| w[i]).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TvLipschitzReport {
    pub checks: usize,
    pub violations: usize,
    /// Largest `|V_p - V_q| / (L_V TV)` seen.
    pub max_ratio: f64,
}

/// `|V+_p(x) - V+_q(x)| <= L_V TV(p, q)` with
/// `L_V = 2 K_max M / k_min + 2 K_max^2 M / k_min^2`, where `M` bounds
/// `|y - x|` on the support and `k_min` is the smaller kernel mass.
pub fn verify_tv_lipschitz(
    kernel: &Kernel,
    probes: &[Vec<f64>],
    pairs: &[DiscretePair],
    k_min_floor: f64,
) -> Result<TvLipschitzReport> {
    const K_MAX: f64 = 1.0;
    let mut rep = TvLipschitzReport {
        checks: 0,
        violations: 0,
        max_ratio: 0.0,
    };
    for pair in pairs {
        let (bp, bq) = (pair.batch(&pair.p)?, pair.batch(&pair.q)?);
        let tv = pair.tv();
        for x in probes {
            let mass = |w: &[f64]| -> f64 {
                pair.atoms
                    .iter()
                    .zip(w)
                    .map(|(y, wi)| wi * kernel.log_eval(x, y).exp())
                    .sum()
            };
            let k_min = mass(&pair.p).min(mass(&pair.q));
            if !(k_min >= k_min_floor) {
                return Err(Error::DenominatorUnderflow {
                    x: x.clone(),
                    log_den: k_min.ln(),
                });
            }
            let m = pair
                .atoms
                .iter()
                .zip(pair.p.iter().zip(&pair.q))
                .filter(|(_, (a, b))| **a > 0.0 || **b > 0.0)
                .map(|(y, _)| sq_dist(x, y).sqrt())
                .fold(0.0, f64::max);
            let l_v = 2.0 * K_MAX * m / k_min + 2.0 * K_MAX * K_MAX * m / (k_min * k_min);
            let lhs = gap(&mean_shift(kernel, x, &bp)?, &mean_shift(kernel, x, &bq)?);
            let rhs = l_v * tv;
            rep.checks += 1;
            if lhs > rhs * (1.0 + 1e-12) + 1e-15 {
                rep.violations += 1;
            }
            if rhs > 0.0 {
                rep.max_ratio = rep.max_ratio.max(lhs / rhs);
            }
        }
    }
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnisReport {
    pub k: usize,
    pub alphas: Vec<f64>,
    /// Mean attraction-field gap per temperature; NaN where the weights were
    /// degenerate in some repeat.
    pub gaps: Vec<f64>,
    pub best_alpha: f64,
    pub best_gap: f64,
}

/// Attraction field under self-normalised `exp(Q / alpha)` weights against
/// the hard top-`K` field on the same candidates, over a temperature grid.
#[allow(clippy::too_many_arguments)]
pub fn snis_vs_topk(
    spec: &LevelSetSpec,
    alphas: &[f64],
    n: usize,
    probes: &[Vec<f64>],
    bandwidth: f64,
    repeats: usize,
    rng: &mut DfpRng,
) -> Result<SnisReport> {
    let k = Kernel::new(bandwidth)?;
    let kk = spec.k_for(n);
    let min_ess = 2f64.min(kk as f64);
    let mut sums = vec![0.0; alphas.len()];
    let mut degenerate = vec![None; alphas.len()];
    for _ in 0..repeats {
        let (cand, q) = spec.candidates(n, rng);
        let top = cand.select(&top_k_indices(&q, kk)?);
        let top_fields = probes
            .iter()
            .map(|x| mean_shift(&k, x, &top))
            .collect::<Result<Vec<_>>>()?;
        let q_max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (ai, &alpha) in alphas.iter().enumerate() {
            let w: Vec<f64> = q.iter().map(|v| ((v - q_max) / alpha).exp()).collect();
            let (s1, s2) = w.iter().fold((0.0, 0.0), |(a, b), v| (a + v, b + v * v));
            let ess = s1 * s1 / s2;
            if ess < min_ess {
                degenerate[ai] = Some(ess);
                continue;
            }
            let keep: Vec<usize> = (0..n).filter(|&i| w[i] > 0.0).collect();
            let weighted = cand
                .select(&keep)
                .with_weights(keep.iter().map(|&i| w[i]).collect())?;
            for (x, t) in probes.iter().zip(&top_fields) {
                sums[ai] += gap(&mean_shift(&k, x, &weighted)?, t);
            }
        }
    }
    let denom = (repeats * probes.len()).max(1) as f64;
    let gaps: Vec<f64> = sums
        .iter()
        .zip(&degenerate)
        .map(|(s, d)| if d.is_some() { f64::NAN } else { s / denom })
        .collect();
    let best = gaps
        .iter()
        .enumerate()
        .filter(|(_, g)| g.is_finite())
        .min_by(|a, b| a.1.total_cmp(b.1));
    match best {
        Some((i, g)) => Ok(SnisReport {
            k: kk,
            alphas: alphas.to_vec(),
            gaps: gaps.clone(),
            best_alpha: alphas[i],
            best_gap: *g,
        }),
        None => Err(Error::DegenerateWeights {
            ess: degenerate.iter().flatten().copied().fold(f64::NAN, f64::max),
            min: min_ess,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn linear_normal(rho: f64) -> LevelSetSpec {
        LevelSetSpec::new(
            GaussianMixture::standard_normal(1).unwrap(),
            AnalyticQ::Linear(vec![1.0]),
            rho,
        )
        .unwrap()
    }

    #[test]
    fn median_level_is_zero() {
        let mut rng = DfpRng::seed_from_u64(0);
        let q = linear_normal(0.5).quantile(1_000_000, &mut rng).unwrap();
        assert!(q.abs() < 5e-3, "{q}");
    }

    #[test]
    fn flat_critic_quantile_is_unstable() {
        let spec = LevelSetSpec::new(
            GaussianMixture::standard_normal(1).unwrap(),
            AnalyticQ::Constant(0.0),
            0.5,
        )
        .unwrap();
        let mut rng = DfpRng::seed_from_u64(1);
        assert!(matches!(
            spec.quantile(10_000, &mut rng),
            Err(Error::QuantileInstability { .. })
        ));
    }

    #[test]
    fn full_candidate_set_gap_shrinks_like_monte_carlo() {
        let cfg = TopKLimitConfig {
            quantile_samples: 1000,
            level_samples: 50_000,
            repeats: 30,
            ..TopKLimitConfig::default()
        };
        let mut rng = DfpRng::seed_from_u64(2);
        let rep = verify_topk_limit(&linear_normal(1.0), &cfg, &mut rng).unwrap();
        assert_eq!(rep.k_schedule, cfg.n_schedule);
        assert!(rep.trend.passed, "{:?}", rep.gaps);
        // 64x more candidates should cut the noise by roughly 8x
        assert!(rep.trend.endpoint_ratio < 0.3, "{:?}", rep.gaps);
    }

    #[test]
    fn identical_weights_have_zero_field_gap() {
        let mut rng = DfpRng::seed_from_u64(3);
        let mut pair = DiscretePair::random(6, 2, &mut rng);
        pair.q = pair.p.clone();
        let k = Kernel::new(0.5).unwrap();
        let rep = verify_tv_lipschitz(&k, &[vec![0.0, 0.0]], &[pair], 1e-12).unwrap();
        assert_eq!(rep.violations, 0);
        assert_eq!(rep.max_ratio, 0.0);
    }

    #[test]
    fn one_atom_shift_has_tv_one_tenth() {
        let atoms = vec![vec![-0.5], vec![0.2], vec![0.9]];
        let pair =
            DiscretePair::new(atoms, vec![0.5, 0.3, 0.2], vec![0.4, 0.3, 0.3]).unwrap();
        assert!((pair.tv() - 0.1).abs() < 1e-15);
        let k = Kernel::new(0.4).unwrap();
        let probes = [vec![-0.3], vec![0.0], vec![0.6]];
        let rep = verify_tv_lipschitz(&k, &probes, &[pair], 1e-12).unwrap();
        assert_eq!(rep.violations, 0);
        assert!(rep.max_ratio > 0.0 && rep.max_ratio <= 1.0);
    }

    #[test]
    fn cold_snis_matches_argmax() {
        let spec = LevelSetSpec::new(
            GaussianMixture::standard_normal(1).unwrap(),
            AnalyticQ::Linear(vec![1.0]),
            1.0 / 64.0,
        )
        .unwrap();
        let mut rng = DfpRng::seed_from_u64(4);
        let rep = snis_vs_topk(&spec, &[1e-6], 64, &[vec![0.0]], 0.3, 10, &mut rng).unwrap();
        assert_eq!(rep.k, 1);
        assert!(rep.best_gap < 1e-12, "{rep:?}");
    }

    #[test]
    fn hot_snis_matches_full_set() {
        let mut rng = DfpRng::seed_from_u64(5);
        let rep =
            snis_vs_topk(&linear_normal(1.0), &[1e9], 64, &[vec![0.3]], 0.3, 10, &mut rng).unwrap();
        assert!(rep.best_gap < 1e-6, "{rep:?}");
    }

    #[test]
    fn all_degenerate_temperatures_error() {
        let mut rng = DfpRng::seed_from_u64(6);
        let r = snis_vs_topk(&linear_normal(0.25), &[1e-9], 64, &[vec![0.0]], 0.3, 2, &mut rng);
        assert!(matches!(r, Err(Error::DegenerateWeights { .. })));
    }
}
