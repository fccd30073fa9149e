//! Brute-force and closed-form verifiers for the drift operators.
//!
//! Everything here is deliberately independent of the training code paths:
//! densities are analytic, normalisers come from quadrature, and identities
//! that only hold in a limit are checked as trends over a schedule.

mod coverage;
mod kde;
mod mixture;
pub mod quadrature;
mod report;
mod soft_target;
pub mod suite;
mod topk;

pub use coverage::{mode_coverage, Coverage};
pub use kde::{
    check_field_algebra, check_score_identity, explicit_kde_log_density,
    verify_kde_score_convergence, wgf_descent_on_samples, wgf_particle_descent, AlgebraReport,
    KdeConvergence, ScoreIdentityReport, WgfConfig, WgfTrajectory,
};
pub use mixture::{Component, GaussianMixture};
pub use report::{Check, Report};
pub use soft_target::{
    pi_plus_density, verify_decomposition, AnalyticQ, DecompositionConfig, DecompositionReport,
    SoftTarget, SoftTargetSpec,
};
pub use suite::{run_suite, Selector, SuiteConfig};
pub use topk::{
    snis_vs_topk, verify_topk_limit, verify_tv_lipschitz, DiscretePair, LevelSetSpec,
    SnisReport, TopKLimitConfig, TopKLimitReport, TvLipschitzReport,
};

use crate::drift_field::{Kernel, SampleBatch};
use crate::error::Result;

/// Drifting-field implementation under test; swappable so the suite can be
/// pointed at a deliberately broken field.
pub type FieldFn = fn(&Kernel, &[f64], &SampleBatch, &SampleBatch) -> Result<Vec<f64>>;

/// Non-monotone steps tolerated in a decreasing trend.
pub const TREND_SLACK: usize = 1;
/// Required `last / first` ratio of a decreasing trend.
pub const TREND_ENDPOINT_RATIO: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Trend {
    pub values: Vec<f64>,
    /// Number of steps where the value went up.
    pub increases: usize,
    pub endpoint_ratio: f64,
    pub passed: bool,
}

/// Decreasing-trend verdict: at most `slack` upward steps and
/// `last <= max_ratio * first`. Fewer than two values never pass.
pub fn decreasing_trend(values: &[f64], slack: usize, max_ratio: f64) -> Trend {
    let increases = values.windows(2).filter(|w| !(w[1] <= w[0])).count();
    let endpoint_ratio = match (values.first(), values.last()) {
        (Some(f), Some(l)) if values.len() >= 2 => l / f,
        _ => f64::NAN,
    };
    Trend {
        values: values.to_vec(),
        increases,
        endpoint_ratio,
        passed: values.len() >= 2 && increases <= slack && endpoint_ratio <= max_ratio,
    }
}

/// [`decreasing_trend`] with the default slack and endpoint ratio.
pub fn default_trend(values: &[f64]) -> Trend {
    decreasing_trend(values, TREND_SLACK, TREND_ENDPOINT_RATIO)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trend_allows_one_bump() {
        assert!(default_trend(&[1.0, 0.8, 0.85, 0.4]).passed);
        assert!(!default_trend(&[1.0, 1.1, 0.9, 0.95, 0.4]).passed);
        assert!(!default_trend(&[1.0, 0.9, 0.8]).passed);
        assert!(!default_trend(&[1.0]).passed);
        assert!(!default_trend(&[1.0, f64::NAN]).passed);
    }
}
