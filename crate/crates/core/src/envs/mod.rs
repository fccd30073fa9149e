//! Toy continuous-control environments, scripted demonstrators, offline
//! datasets and the replay buffer.

mod bandit;
mod buffer;
mod dataset;
mod maze;

pub use bandit::{BanditDemonstrator, MultiGoalBandit, BANDIT_SUCCESS_RADIUS};
pub use buffer::{ReplayBuffer, Transition};
pub use dataset::{generate_offline_dataset, Dataset, MIN_BALANCE_EPISODES};
pub use maze::{MazeDemonstrator, PointMassMaze};

use crate::error::{Error, Result};
use crate::DfpRng;

pub const BANDIT_ID: &str = "bandit2g";
pub const MAZE_ID: &str = "maze2p";

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// Task completed (goal reached); meaningful only when `done`.
    pub success: bool,
}

pub trait Environment: Send {
    fn id(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn reset(&mut self, rng: &mut DfpRng) -> Vec<f64>;
    /// Actions outside `[-1, 1]^d` are clipped.
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;
    /// Centres of the demonstration modes in action space at `state`.
    fn mode_centers(&self, state: &[f64]) -> Vec<Vec<f64>>;
}

pub trait Demonstrator: Send {
    /// Pick the mode for a new episode and return its label.
    fn begin_episode(&mut self, state: &[f64], rng: &mut DfpRng) -> usize;
    fn act(&mut self, state: &[f64], rng: &mut DfpRng) -> Vec<f64>;
    fn n_modes(&self) -> usize;
}

pub fn make_env(id: &str) -> Result<Box<dyn Environment>> {
    match id {
        BANDIT_ID => Ok(Box::new(MultiGoalBandit::default())),
        MAZE_ID => Ok(Box::new(PointMassMaze::default())),
        other => Err(Error::UnknownEnv(other.to_string())),
    }
}

pub fn make_demonstrator(id: &str, noise_scale: f64) -> Result<Box<dyn Demonstrator>> {
    match id {
        BANDIT_ID => Ok(Box::new(BanditDemonstrator::new(
            MultiGoalBandit::default(),
            noise_scale,
        ))),
        MAZE_ID => Ok(Box::new(MazeDemonstrator::new(noise_scale))),
        other => Err(Error::UnknownEnv(other.to_string())),
    }
}

pub(crate) fn clip_action(action: &[f64]) -> Vec<f64> {
    action.iter().map(|a| a.clamp(-1.0, 1.0)).collect()
}

/// Executes a flat chunk of `horizon` consecutive actions open-loop and
/// reports the discounted reward sum as one transition.
pub struct ChunkedEnv<E> {
    inner: E,
    chunk: usize,
    gamma: f64,
}

impl<E: Environment> ChunkedEnv<E> {
    pub fn new(inner: E, chunk: usize, gamma: f64) -> Self {
        assert!(chunk >= 1, "chunk horizon must be >= 1");
        Self {
            inner,
            chunk,
            gamma,
        }
    }

    pub fn into_inner(self) -> E {
        self.inner
    }
}

impl<E: Environment> Environment for ChunkedEnv<E> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.inner.action_dim() * self.chunk
    }

    fn horizon(&self) -> usize {
        self.inner.horizon().div_ceil(self.chunk)
    }

    fn reset(&mut self, rng: &mut DfpRng) -> Vec<f64> {
        self.inner.reset(rng)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let d = self.inner.action_dim();
        if action.len() != d * self.chunk {
            return Err(Error::DimensionMismatch {
                context: "chunked action",
                expected: d * self.chunk,
                got: action.len(),
            });
        }
        let mut total = 0.0;
        let mut discount = 1.0;
        let mut last = None;
        for sub in action.chunks_exact(d) {
            let r = self.inner.step(sub)?;
            total += discount * r.reward;
            discount *= self.gamma;
            let done = r.done;
            last = Some(r);
            if done {
                break;
            }
        }
        let mut r = last.expect("chunk has at least one action");
        r.reward = total;
        Ok(r)
    }

    fn mode_centers(&self, state: &[f64]) -> Vec<Vec<f64>> {
        self.inner
            .mode_centers(state)
            .into_iter()
            .map(|c| c.repeat(self.chunk))
            .collect()
    }
}

impl Environment for Box<dyn Environment> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn action_dim(&self) -> usize {
        (**self).action_dim()
    }
    fn horizon(&self) -> usize {
        (**self).horizon()
    }
    fn reset(&mut self, rng: &mut DfpRng) -> Vec<f64> {
        (**self).reset(rng)
    }
    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        (**self).step(action)
    }
    fn mode_centers(&self, state: &[f64]) -> Vec<Vec<f64>> {
        (**self).mode_centers(state)
    }
}
