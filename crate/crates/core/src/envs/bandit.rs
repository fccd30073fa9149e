use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{clip_action, Demonstrator, Environment, StepResult, BANDIT_ID};
use crate::error::{Error, Result};
use crate::DfpRng;

/// An action within this distance of a goal counts as a success.
pub const BANDIT_SUCCESS_RADIUS: f64 = 0.5;

/// One-step contextual bandit with two goals per context.
///
/// Reward is `-min_i |a - g_i(s)|^2`, so the optimal value `Q*(s, a)` equals
/// the immediate reward and is known in closed form.
#[derive(Debug, Clone)]
pub struct MultiGoalBandit {
    contexts: Vec<[f64; 2]>,
    goal_bases: Vec<[f64; 2]>,
    context_shift: f64,
    state: Option<Vec<f64>>,
}

impl Default for MultiGoalBandit {
    fn default() -> Self {
        Self {
            contexts: vec![[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]],
            goal_bases: vec![[0.5, 0.5], [-0.5, -0.5]],
            context_shift: 0.2,
            state: None,
        }
    }
}

impl MultiGoalBandit {
    pub fn contexts(&self) -> &[[f64; 2]] {
        &self.contexts
    }

    pub fn goals(&self, state: &[f64]) -> Vec<Vec<f64>> {
        self.goal_bases
            .iter()
            .map(|g| {
                g.iter()
                    .zip(state)
                    .map(|(gi, si)| gi + self.context_shift * si)
                    .collect()
            })
            .collect()
    }

    /// Closed-form optimal action value (equal to the reward).
    pub fn q_star(&self, state: &[f64], action: &[f64]) -> f64 {
        -self.nearest_goal(state, action).1
    }

    /// Index of the nearest goal and the squared distance to it.
    pub fn nearest_goal(&self, state: &[f64], action: &[f64]) -> (usize, f64) {
        self.goals(state)
            .iter()
            .map(|g| crate::drift_field::sq_dist(g, action))
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("bandit has goals")
    }
}

impl Environment for MultiGoalBandit {
    fn id(&self) -> &str {
        BANDIT_ID
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        1
    }

    fn reset(&mut self, rng: &mut DfpRng) -> Vec<f64> {
        let s = self.contexts[rng.random_range(0..self.contexts.len())].to_vec();
        self.state = Some(s.clone());
        s
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let state = self.state.take().ok_or(Error::StepAfterDone)?;
        if action.len() != 2 {
            return Err(Error::DimensionMismatch {
                context: "bandit action",
                expected: 2,
                got: action.len(),
            });
        }
        let a = clip_action(action);
        let (_, d2) = self.nearest_goal(&state, &a);
        Ok(StepResult {
            next_state: state,
            reward: -d2,
            done: true,
            success: d2.sqrt() <= BANDIT_SUCCESS_RADIUS,
        })
    }

    fn mode_centers(&self, state: &[f64]) -> Vec<Vec<f64>> {
        self.goals(state)
    }
}

/// Picks a goal uniformly per episode and emits it with Gaussian noise.
#[derive(Debug, Clone)]
pub struct BanditDemonstrator {
    env: MultiGoalBandit,
    noise_scale: f64,
    mode: usize,
}

impl BanditDemonstrator {
    pub fn new(env: MultiGoalBandit, noise_scale: f64) -> Self {
        Self {
            env,
            noise_scale,
            mode: 0,
        }
    }
}

impl Demonstrator for BanditDemonstrator {
    fn begin_episode(&mut self, _state: &[f64], rng: &mut DfpRng) -> usize {
        self.mode = rng.random_range(0..self.env.goal_bases.len());
        self.mode
    }

    fn act(&mut self, state: &[f64], rng: &mut DfpRng) -> Vec<f64> {
        let goal = &self.env.goals(state)[self.mode];
        if self.noise_scale == 0.0 {
            return goal.clone();
        }
        let noise = Normal::new(0.0, self.noise_scale).expect("noise scale is finite");
        let a: Vec<f64> = goal.iter().map(|g| g + noise.sample(rng)).collect();
        clip_action(&a)
    }

    fn n_modes(&self) -> usize {
        self.env.goal_bases.len()
    }
}
