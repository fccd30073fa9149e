//! The diagnostic suite: fixed instances of every verifier, each on its own
//! random stream, collected into one [`Report`].

use std::str::FromStr;

use rand::SeedableRng;

use crate::drift_field::{drifting_field, Kernel};
use crate::error::{Error, Result};
use crate::DfpRng;

use super::quadrature::simpson_box;
use super::{
    check_field_algebra, check_score_identity, snis_vs_topk, verify_decomposition,
    verify_kde_score_convergence, verify_topk_limit, verify_tv_lipschitz, wgf_particle_descent,
    AnalyticQ, Check, Component, DecompositionConfig, DiscretePair, FieldFn, GaussianMixture,
    LevelSetSpec, Report, SoftTarget, SoftTargetSpec, TopKLimitConfig, WgfConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selector {
    All,
    /// Exact drifting-field algebra and the KDE score identity.
    Kernel,
    /// KDE score convergence to the exact score.
    Score,
    /// Particle descent of the KL estimate.
    Wgf,
    /// Soft-target normalisation and the field decomposition.
    Decomposition,
    /// Top-K limit, TV-Lipschitz bound and the SNIS comparison.
    TopK,
}

impl Selector {
    pub const NAMES: [&'static str; 6] = ["all", "kernel", "score", "wgf", "decomposition", "topk"];

    fn includes(self, other: Selector) -> bool {
        self == Selector::All || self == other
    }
}

impl FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Selector::All,
            "kernel" => Selector::Kernel,
            "score" => Selector::Score,
            "wgf" => Selector::Wgf,
            "decomposition" => Selector::Decomposition,
            "topk" => Selector::TopK,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown suite `{other}`, expected one of {}",
                    Selector::NAMES.join(", ")
                )))
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub selector: Selector,
    pub seed: u64,
    pub field: FieldFn,
}

impl SuiteConfig {
    pub fn new(selector: Selector, seed: u64) -> Self {
        Self {
            selector,
            seed,
            field: drifting_field,
        }
    }
}

fn stream(seed: u64, id: u64) -> DfpRng {
    let mut rng = DfpRng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal(mean: f64, sd: f64) -> GaussianMixture {
    GaussianMixture::gaussian(vec![mean], vec![sd * sd]).expect("valid normal")
}

fn bimodal_1d() -> GaussianMixture {
    let c = |m: f64| Component {
        weight: 0.5,
        mean: vec![m],
        var: vec![0.25],
    };
    GaussianMixture::new(vec![c(-1.0), c(1.0)]).expect("valid mixture")
}

fn run<F: FnOnce() -> Result<Check>>(name: &str, f: F) -> Check {
    f().unwrap_or_else(|e| Check::errored(name, e))
}

pub fn kernel_checks(field: FieldFn, seed: u64) -> Vec<Check> {
    let mut rng = stream(seed, 1);
    let mut out = Vec::new();
    match check_field_algebra(field, 1000, &mut rng) {
        Ok(r) => {
            out.push(
                Check::new("kernel.antisymmetry")
                    .value("pairs", r.pairs)
                    .value("max_error", r.antisymmetry_max)
                    .verdict(r.antisymmetry_max == 0.0),
            );
            out.push(
                Check::new("kernel.fixed_point")
                    .value("pairs", r.pairs)
                    .value("max_error", r.fixed_point_max)
                    .verdict(r.fixed_point_max == 0.0),
            );
            out.push(
                Check::new("kernel.boundedness")
                    .value("pairs", r.pairs)
                    .value("violations", r.bound_violations)
                    .verdict(r.bound_violations == 0),
            );
        }
        Err(e) => out.push(Check::errored("kernel.algebra", e)),
    }
    let mut rng = stream(seed, 2);
    match check_score_identity(field, 100, &mut rng) {
        Ok(r) => {
            out.push(
                Check::new("kernel.score_identity")
                    .value("instances", r.instances)
                    .value("max_abs_error", r.identity_max_abs)
                    .value("tolerance", 1e-12)
                    .verdict(r.identity_max_abs <= 1e-12),
            );
            out.push(
                Check::new("kernel.score_finite_difference")
                    .value("instances", r.instances)
                    .value("max_rel_error", r.fd_max_rel)
                    .value("tolerance", 1e-5)
                    .verdict(r.fd_max_rel <= 1e-5),
            );
        }
        Err(e) => out.push(Check::errored("kernel.score_identity", e)),
    }
    out
}

/// Joint schedule of the KDE convergence check. The score variance scales
/// like `1 / (n h^3)`, so `n` has to outgrow `h^-3`.
pub const SCORE_SCHEDULE: [(f64, usize); 3] = [(0.3, 100), (0.2, 1_000), (0.1, 100_000)];

pub fn score_checks(seed: u64) -> Vec<Check> {
    let mut rng = stream(seed, 3);
    let probes = vec![vec![-1.0], vec![-0.4], vec![0.0], vec![0.5], vec![1.2]];
    vec![run("score.kde_convergence", || {
        let r = verify_kde_score_convergence(&bimodal_1d(), &SCORE_SCHEDULE, &probes, 20, &mut rng)?;
        let trend = r.trend.expect("schedule has three entries");
        Ok(Check::new("score.kde_convergence")
            .list("errors", &r.errors)
            .value("increases", trend.increases)
            .value("endpoint_ratio", trend.endpoint_ratio)
            .verdict(trend.passed))
    })]
}

/// Particle-descent instance: 200 particles from `N(-1, 0.5^2)` towards
/// 400 samples of `N(1, 0.8^2)`.
pub fn wgf_instance(ascent: bool) -> (GaussianMixture, GaussianMixture, WgfConfig) {
    let cfg = WgfConfig {
        bandwidth: 0.5,
        // ascent accelerates particles away from the target, so the control
        // runs shorter and slower to stay inside the stability guard
        step_size: if ascent { 0.01 } else { 0.02 },
        n_steps: if ascent { 40 } else { 500 },
        n_target: 400,
        ascent,
        smooth_window: 5,
        burn_in: 10,
        field: drifting_field,
    };
    (normal(-1.0, 0.5), normal(1.0, 0.8), cfg)
}

pub fn wgf_checks(field: FieldFn, seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    for ascent in [false, true] {
        let name = if ascent { "wgf.ascent_control" } else { "wgf.descent" };
        let mut rng = stream(seed, if ascent { 5 } else { 4 });
        out.push(run(name, || {
            let (init, target, mut cfg) = wgf_instance(ascent);
            cfg.field = field;
            let particles = init.sample_batch(200, &mut rng);
            let t = wgf_particle_descent(&target, &particles, &cfg, &mut rng)?;
            let first = t.kl[0];
            let last = t.kl[t.kl.len() - 1];
            let ok = if ascent {
                t.monotone && last > first
            } else {
                t.monotone && t.final_ratio < 0.1
            };
            Ok(Check::new(name)
                .value("steps", cfg.n_steps)
                .value("kl_initial", first)
                .value("kl_final", last)
                .value("final_ratio", t.final_ratio)
                .value("smoothed_monotone", t.monotone)
                .verdict(ok))
        }));
    }
    out
}

/// Decomposition instance: `pi_old = N(0, 0.3^2)`, `Q(a) = a`,
/// `alpha = 0.3`, `pi_theta = N(-0.3, 0.3^2)`.
pub fn decomposition_instance() -> (SoftTargetSpec, GaussianMixture) {
    let spec = SoftTargetSpec::new(normal(0.0, 0.3), AnalyticQ::Linear(vec![1.0]), 0.3)
        .expect("valid spec");
    (spec, normal(-0.3, 0.3))
}

pub fn decomposition_checks(field: FieldFn, seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    out.push(run("soft.normalisation", || {
        let specs = [
            decomposition_instance().0,
            SoftTargetSpec::new(
                bimodal_1d(),
                AnalyticQ::Quadratic {
                    center: vec![0.5],
                    scale: 2.0,
                },
                0.5,
            )?,
            SoftTargetSpec::new(
                GaussianMixture::gaussian(vec![0.2, -0.1], vec![0.3, 0.6])?,
                AnalyticQ::Linear(vec![1.0, -0.5]),
                0.4,
            )?,
        ];
        let mut worst = 0.0f64;
        for s in specs {
            let t = SoftTarget::new(s)?;
            let d = t.spec().base.dim();
            let total = simpson_box(d, |a| t.density(a), 2000)?;
            worst = worst.max((total - 1.0).abs());
        }
        Ok(Check::new("soft.normalisation")
            .value("max_abs_error", worst)
            .value("tolerance", 1e-6)
            .verdict(worst <= 1e-6))
    }));
    let mut rng = stream(seed, 6);
    out.push(run("soft.decomposition", || {
        let (spec, theta) = decomposition_instance();
        let cfg = DecompositionConfig {
            field,
            ..DecompositionConfig::default()
        };
        let r = verify_decomposition(&spec, &theta, &cfg, &mut rng)?;
        let trend = r.trend.clone().expect("prediction is non-zero");
        let aligned = r.q_alignment.iter().all(|v| *v > 0.0);
        Ok(Check::new("soft.decomposition")
            .list("bandwidths", &r.bandwidths)
            .list("relative_gaps", &r.relative_gaps)
            .value("increases", trend.increases)
            .value("endpoint_ratio", trend.endpoint_ratio)
            .value("q_aligned", aligned)
            .verdict(trend.passed && aligned))
    }));
    out
}

pub fn topk_limit_instance(rho: f64) -> LevelSetSpec {
    LevelSetSpec::new(normal(0.0, 1.0), AnalyticQ::Linear(vec![1.0]), rho).expect("valid rho")
}

pub fn topk_checks(seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    for (i, rho) in [0.25, 0.5].into_iter().enumerate() {
        let name = format!("topk.limit_rho_{rho}");
        let mut rng = stream(seed, 7 + i as u64);
        out.push(run(&name, || {
            let r = verify_topk_limit(&topk_limit_instance(rho), &TopKLimitConfig::default(), &mut rng)?;
            Ok(Check::new(name.clone())
                .value("q_rho", r.q_rho)
                .value("n_schedule", format!("{:?}", r.n_schedule))
                .value("k_schedule", format!("{:?}", r.k_schedule))
                .list("gaps", &r.gaps)
                .value("increases", r.trend.increases)
                .value("endpoint_ratio", r.trend.endpoint_ratio)
                .verdict(r.trend.passed))
        }));
    }
    let mut rng = stream(seed, 9);
    out.push(run("topk.tv_lipschitz", || {
        let kernel = Kernel::new(0.5)?;
        let pairs: Vec<DiscretePair> = (0..100)
            .map(|i| DiscretePair::random(3 + i % 8, 1 + i % 2, &mut rng))
            .collect();
        let probes_1d = vec![vec![-0.5], vec![0.0], vec![0.7]];
        let probes_2d = vec![vec![0.0, 0.0], vec![-0.6, 0.4], vec![0.8, -0.8]];
        let (mut checks, mut violations, mut max_ratio) = (0, 0, 0.0f64);
        for pair in &pairs {
            let probes = if pair.atoms[0].len() == 1 { &probes_1d } else { &probes_2d };
            let r = verify_tv_lipschitz(&kernel, probes, std::slice::from_ref(pair), 1e-12)?;
            checks += r.checks;
            violations += r.violations;
            max_ratio = max_ratio.max(r.max_ratio);
        }
        Ok(Check::new("topk.tv_lipschitz")
            .value("pairs", pairs.len())
            .value("checks", checks)
            .value("violations", violations)
            .value("max_ratio", max_ratio)
            .verdict(violations == 0))
    }));
    let mut rng = stream(seed, 10);
    out.push(run("topk.snis_matching", || {
        let alphas = [0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 2.0];
        let r = snis_vs_topk(&topk_limit_instance(0.25), &alphas, 256, &[vec![0.0], vec![0.5], vec![1.0]], 0.3, 50, &mut rng)?;
        Ok(Check::new("topk.snis_matching")
            .value("k", r.k)
            .list("alphas", &r.alphas)
            .list("gaps", &r.gaps)
            .value("best_alpha", r.best_alpha)
            .value("best_gap", r.best_gap))
    }));
    out
}

/// Runs the selected verifiers. Hard failures are recorded in the report,
/// never returned as errors.
pub fn run_suite(cfg: &SuiteConfig) -> Report {
    let mut checks = Vec::new();
    let s = cfg.selector;
    if s.includes(Selector::Kernel) {
        checks.extend(kernel_checks(cfg.field, cfg.seed));
    }
    if s.includes(Selector::Score) {
        checks.extend(score_checks(cfg.seed));
    }
    if s.includes(Selector::Wgf) {
        checks.extend(wgf_checks(cfg.field, cfg.seed));
    }
    if s.includes(Selector::Decomposition) {
        checks.extend(decomposition_checks(cfg.field, cfg.seed));
    }
    if s.includes(Selector::TopK) {
        checks.extend(topk_checks(cfg.seed));
    }
    Report {
        seed: cfg.seed,
        checks,
    }
}
