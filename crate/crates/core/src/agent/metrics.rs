use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{EvalResult, StepStats};

pub const CSV_HEADER: &str =
    "step,phase,td_loss,bc_loss,topk_loss,combined_loss,eval_return,success_rate,seed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Offline,
    Online,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Offline => "offline",
            Phase::Online => "online",
        }
    }
}

/// When to emit metric records and run evaluations, in steps of a phase.
/// The last step of a phase always emits and, if evaluation is on, evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub log_interval: usize,
    /// Zero disables evaluation.
    pub eval_interval: usize,
    pub eval_episodes: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            log_interval: 1000,
            eval_interval: 0,
            eval_episodes: 0,
        }
    }
}

impl Schedule {
    pub(crate) fn due(&self, k: usize, total: usize) -> bool {
        k == total || (self.log_interval > 0 && k % self.log_interval == 0)
    }

    pub(crate) fn eval_due(&self, k: usize, total: usize) -> bool {
        self.eval_interval > 0
            && self.eval_episodes > 0
            && (k == total || k % self.eval_interval == 0)
    }
}

/// One CSV row. Losses are means since the previous record. `success_rate`
/// is the evaluation success rate when an evaluation ran, otherwise the
/// success rate of online training episodes finished in the interval.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub step: u64,
    pub phase: Phase,
    pub td_loss: f64,
    pub bc_loss: f64,
    pub topk_loss: f64,
    pub combined_loss: f64,
    pub eval_return: Option<f64>,
    pub success_rate: Option<f64>,
    pub seed: u64,
}

impl MetricRecord {
    pub fn to_csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.phase.as_str(),
            self.td_loss,
            self.bc_loss,
            self.topk_loss,
            self.combined_loss,
            opt(self.eval_return),
            opt(self.success_rate),
            self.seed
        );
        s
    }
}

#[derive(Debug, Default)]
pub(crate) struct Accumulator {
    sum: StepStats,
    n: usize,
}

impl Accumulator {
    pub(crate) fn add(&mut self, s: &StepStats) {
        self.sum.td_loss += s.td_loss;
        self.sum.bc_loss += s.bc_loss;
        self.sum.topk_loss += s.topk_loss;
        self.sum.combined_loss += s.combined_loss;
        self.n += 1;
    }

    pub(crate) fn flush(
        &mut self,
        step: u64,
        phase: Phase,
        eval: Option<&EvalResult>,
        online_success: Option<f64>,
        seed: u64,
    ) -> MetricRecord {
        let n = self.n.max(1) as f64;
        let rec = MetricRecord {
            step,
            phase,
            td_loss: self.sum.td_loss / n,
            bc_loss: self.sum.bc_loss / n,
            topk_loss: self.sum.topk_loss / n,
            combined_loss: self.sum.combined_loss / n,
            eval_return: eval.map(EvalResult::mean_return),
            success_rate: eval.map(EvalResult::success_rate).or(online_success),
            seed,
        };
        *self = Self::default();
        rec
    }
}
