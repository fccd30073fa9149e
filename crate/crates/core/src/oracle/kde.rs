use rand::Rng;

use crate::drift_field::{drifting_field, kde_score, mean_shift, sq_dist, Kernel, SampleBatch};
use crate::error::{Error, Result};
use crate::DfpRng;

use super::mixture::log_sum_exp;
use super::{default_trend, FieldFn, GaussianMixture, Trend};

fn random_batch(rng: &mut DfpRng, n: usize, dim: usize, scale: f64) -> SampleBatch {
    let data = (0..n * dim)
        .map(|_| scale * rng.random_range(-1.0..1.0))
        .collect();
    SampleBatch::from_flat(dim, data).expect("dim > 0")
}

fn random_instance(rng: &mut DfpRng) -> (Kernel, Vec<f64>, SampleBatch, SampleBatch) {
    let dim = rng.random_range(1..=3);
    let scale = rng.random_range(0.2..2.0);
    let (np, nq) = (rng.random_range(1..=12), rng.random_range(1..=12));
    let p = random_batch(rng, np, dim, scale);
    let q = random_batch(rng, nq, dim, scale);
    let x: Vec<f64> = (0..dim).map(|_| scale * rng.random_range(-1.2..1.2)).collect();
    let kernel = Kernel::new(rng.random_range(0.05..1.0)).expect("positive bandwidth");
    (kernel, x, p, q)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgebraReport {
    pub pairs: usize,
    /// `max |V_{p,q} + V_{q,p}|`.
    pub antisymmetry_max: f64,
    /// `max |V_{p,p}|`.
    pub fixed_point_max: f64,
    /// Attraction fields longer than the farthest positive.
    pub bound_violations: usize,
}

impl AlgebraReport {
    pub fn exact(&self) -> bool {
        self.antisymmetry_max == 0.0 && self.fixed_point_max == 0.0 && self.bound_violations == 0
    }
}

/// Anti-symmetry, the `p = q` fixed point and `|V+| <= max |y - x|` over
/// randomised batch pairs.
pub fn check_field_algebra(field: FieldFn, pairs: usize, rng: &mut DfpRng) -> Result<AlgebraReport> {
    let mut rep = AlgebraReport {
        pairs,
        antisymmetry_max: 0.0,
        fixed_point_max: 0.0,
        bound_violations: 0,
    };
    for _ in 0..pairs {
        let (k, x, p, q) = random_instance(rng);
        let pq = field(&k, &x, &p, &q)?;
        let qp = field(&k, &x, &q, &p)?;
        for (a, b) in pq.iter().zip(&qp) {
            rep.antisymmetry_max = rep.antisymmetry_max.max((a + b).abs());
        }
        for v in field(&k, &x, &p, &p)? {
            rep.fixed_point_max = rep.fixed_point_max.max(v.abs());
        }
        let attract = mean_shift(&k, &x, &p)?;
        let radius = p
            .points()
            .map(|y| sq_dist(&x, y).sqrt())
            .fold(0.0, f64::max);
        // a convex combination can only exceed its extreme point by rounding
        if attract.iter().map(|v| v * v).sum::<f64>().sqrt() > radius * (1.0 + 1e-12) {
            rep.bound_violations += 1;
        }
    }
    Ok(rep)
}

/// `log( (1/n) sum_j N(x; y_j, h^2 I) )` summed term by term.
pub fn explicit_kde_log_density(h: f64, x: &[f64], batch: &SampleBatch) -> f64 {
    let terms: Vec<f64> = batch
        .points()
        .map(|y| -sq_dist(x, y) / (2.0 * h * h))
        .collect();
    let d = x.len() as f64;
    log_sum_exp(&terms)
        - (batch.len() as f64).ln()
        - 0.5 * d * (2.0 * std::f64::consts::PI * h * h).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreIdentityReport {
    pub instances: usize,
    /// `max |h^2 (score_p - score_q) - V_{p,q}|` per component.
    pub identity_max_abs: f64,
    /// Largest finite-difference mismatch of the KDE score, relative to the
    /// score's largest component.
    pub fd_max_rel: f64,
}

pub fn check_score_identity(
    field: FieldFn,
    instances: usize,
    rng: &mut DfpRng,
) -> Result<ScoreIdentityReport> {
    let mut rep = ScoreIdentityReport {
        instances,
        identity_max_abs: 0.0,
        fd_max_rel: 0.0,
    };
    for _ in 0..instances {
        let (k, x, p, q) = random_instance(rng);
        let h = k.bandwidth();
        let sp = kde_score(&k, &x, &p)?;
        let sq = kde_score(&k, &x, &q)?;
        let v = field(&k, &x, &p, &q)?;
        for ((a, b), vi) in sp.iter().zip(&sq).zip(&v) {
            rep.identity_max_abs = rep.identity_max_abs.max((h * h * (a - b) - vi).abs());
        }
        let scale = sp.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let step = 1e-5 * h;
        for i in 0..x.len() {
            let mut up = x.clone();
            let mut down = x.clone();
            up[i] += step;
            down[i] -= step;
            let fd = (explicit_kde_log_density(h, &up, &p) - explicit_kde_log_density(h, &down, &p))
                / (2.0 * step);
            rep.fd_max_rel = rep.fd_max_rel.max((sp[i] - fd).abs() / scale);
        }
    }
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdeConvergence {
    pub schedule: Vec<(f64, usize)>,
    /// Per schedule entry: max over probes of the mean absolute score error.
    pub errors: Vec<f64>,
    /// Kernel and exact scores at the first probe of the last entry.
    pub last_kde_score: Vec<f64>,
    pub last_exact_score: Vec<f64>,
    /// `None` when the schedule is too short to judge.
    pub trend: Option<Trend>,
}

/// Compares the KDE score of fresh samples from `gm` with the exact score
/// along a joint `(h, n)` schedule, averaging `repeats` independent draws.
pub fn verify_kde_score_convergence(
    gm: &GaussianMixture,
    schedule: &[(f64, usize)],
    probes: &[Vec<f64>],
    repeats: usize,
    rng: &mut DfpRng,
) -> Result<KdeConvergence> {
    if probes.is_empty() || repeats == 0 {
        return Err(Error::InvalidConfig("need probes and at least one repeat".into()));
    }
    let mut errors = Vec::with_capacity(schedule.len());
    let mut last_kde_score = Vec::new();
    let mut last_exact_score = Vec::new();
    for &(h, n) in schedule {
        let k = Kernel::new(h)?;
        let mut err = vec![0.0; probes.len()];
        for _ in 0..repeats {
            let batch = gm.sample_batch(n, rng);
            for (j, x) in probes.iter().enumerate() {
                let est = kde_score(&k, x, &batch)?;
                let exact = gm.score(x);
                let e = est
                    .iter()
                    .zip(&exact)
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                err[j] += e / repeats as f64;
                if j == 0 {
                    last_kde_score = est;
                    last_exact_score = exact;
                }
            }
        }
        errors.push(err.into_iter().fold(0.0, f64::max));
    }
    let trend = (schedule.len() >= 2).then(|| default_trend(&errors));
    Ok(KdeConvergence {
        schedule: schedule.to_vec(),
        errors,
        last_kde_score,
        last_exact_score,
        trend,
    })
}

#[derive(Debug, Clone)]
pub struct WgfConfig {
    pub bandwidth: f64,
    pub step_size: f64,
    pub n_steps: usize,
    /// Samples drawn from the target mixture.
    pub n_target: usize,
    /// Run the sign-flipped control, which should push the KL up.
    pub ascent: bool,
    pub smooth_window: usize,
    /// Smoothed values before this step are not judged.
    pub burn_in: usize,
    pub field: FieldFn,
}

impl Default for WgfConfig {
    fn default() -> Self {
        Self {
            bandwidth: 0.3,
            step_size: 0.1,
            n_steps: 500,
            n_target: 400,
            ascent: false,
            smooth_window: 5,
            burn_in: 0,
            field: drifting_field,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WgfTrajectory {
    /// KL estimate before the first step and after every step.
    pub kl: Vec<f64>,
    /// Trailing moving average of `kl`.
    pub smoothed: Vec<f64>,
    /// Smoothed trajectory moves in the expected direction after burn-in.
    pub monotone: bool,
    pub final_ratio: f64,
}

/// Plug-in `KL(q || p)` between Gaussian KDEs of the particles and the
/// target samples, both at bandwidth `h`, evaluated at the particles.
fn kde_kl(h: f64, particles: &SampleBatch, target: &SampleBatch) -> f64 {
    let n = particles.len() as f64;
    particles
        .points()
        .map(|x| explicit_kde_log_density(h, x, particles) - explicit_kde_log_density(h, x, target))
        .sum::<f64>()
        / n
}

/// Particle descent on KL towards `target` samples drawn from a mixture.
pub fn wgf_particle_descent(
    target: &GaussianMixture,
    init: &SampleBatch,
    cfg: &WgfConfig,
    rng: &mut DfpRng,
) -> Result<WgfTrajectory> {
    let samples = target.sample_batch(cfg.n_target, rng);
    wgf_descent_on_samples(&samples, init, cfg)
}

/// Moves every particle by `step * V(x; target, particles)` (or minus that
/// in ascent mode), tracking the KDE KL estimate.
pub fn wgf_descent_on_samples(
    target: &SampleBatch,
    init: &SampleBatch,
    cfg: &WgfConfig,
) -> Result<WgfTrajectory> {
    let k = Kernel::new(cfg.bandwidth)?;
    if cfg.smooth_window == 0 {
        return Err(Error::InvalidConfig("smoothing window must be positive".into()));
    }
    let limit = 0.1 * cfg.bandwidth;
    let sign = if cfg.ascent { -1.0 } else { 1.0 };
    let mut particles = init.clone();
    let mut kl = vec![kde_kl(cfg.bandwidth, &particles, target)];
    for step in 0..cfg.n_steps {
        let mut next = Vec::with_capacity(particles.as_flat().len());
        for x in particles.points() {
            let v = (cfg.field)(&k, x, target, &particles)?;
            let displacement = cfg.step_size * v.iter().map(|c| c * c).sum::<f64>().sqrt();
            if !(displacement <= limit) {
                return Err(Error::Stability {
                    step,
                    displacement,
                    limit,
                });
            }
            next.extend(x.iter().zip(&v).map(|(xi, vi)| xi + sign * cfg.step_size * vi));
        }
        particles = SampleBatch::from_flat(particles.dim(), next)?;
        kl.push(kde_kl(cfg.bandwidth, &particles, target));
    }
    let w = cfg.smooth_window;
    let smoothed: Vec<f64> = kl
        .windows(w.min(kl.len()))
        .map(|win| win.iter().sum::<f64>() / win.len() as f64)
        .collect();
    let tol = 1e-12 * smoothed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let judged = &smoothed[cfg.burn_in.min(smoothed.len())..];
    let monotone = judged.windows(2).all(|p| {
        if cfg.ascent {
            p[1] >= p[0] - tol
        } else {
            p[1] <= p[0] + tol
        }
    });
    let final_ratio = kl[kl.len() - 1] / kl[0];
    Ok(WgfTrajectory {
        kl,
        smoothed,
        monotone,
        final_ratio,
    })
}
