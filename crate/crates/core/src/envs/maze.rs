use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{clip_action, Demonstrator, Environment, StepResult, MAZE_ID};
use crate::error::{Error, Result};
use crate::DfpRng;

const START: [f64; 2] = [-0.8, 0.0];
const GOAL: [f64; 2] = [0.8, 0.0];
const GOAL_RADIUS: f64 = 0.1;
/// Half extents of the central wall.
const WALL: [f64; 2] = [0.3, 0.4];
const SPEED: f64 = 0.08;
const HORIZON: usize = 100;
const START_JITTER: f64 = 0.05;
/// Height of the detour waypoints above/below the wall.
const DETOUR_Y: f64 = 0.6;
const DETOUR_X: f64 = 0.45;

/// Point mass in `[-1, 1]^2` with a wall between start and goal, so the goal
/// is reachable around either side. Reward is `+1` on reaching the goal.
#[derive(Debug, Clone)]
pub struct PointMassMaze {
    pos: [f64; 2],
    t: usize,
    done: bool,
}

impl Default for PointMassMaze {
    fn default() -> Self {
        Self {
            pos: START,
            t: 0,
            done: true,
        }
    }
}

fn in_wall(p: [f64; 2]) -> bool {
    p[0].abs() <= WALL[0] && p[1].abs() <= WALL[1]
}

impl PointMassMaze {
    pub fn position(&self) -> [f64; 2] {
        self.pos
    }

    pub fn goal() -> [f64; 2] {
        GOAL
    }
}

impl Environment for PointMassMaze {
    fn id(&self) -> &str {
        MAZE_ID
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        HORIZON
    }

    fn reset(&mut self, rng: &mut DfpRng) -> Vec<f64> {
        self.pos = [
            START[0] + rng.random_range(-START_JITTER..START_JITTER),
            START[1] + rng.random_range(-START_JITTER..START_JITTER),
        ];
        self.t = 0;
        self.done = false;
        self.pos.to_vec()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.done {
            return Err(Error::StepAfterDone);
        }
        if action.len() != 2 {
            return Err(Error::DimensionMismatch {
                context: "maze action",
                expected: 2,
                got: action.len(),
            });
        }
        let a = clip_action(action);
        let next = [
            (self.pos[0] + SPEED * a[0]).clamp(-1.0, 1.0),
            (self.pos[1] + SPEED * a[1]).clamp(-1.0, 1.0),
        ];
        if !in_wall(next) {
            self.pos = next;
        }
        self.t += 1;
        let reached = crate::drift_field::sq_dist(&self.pos, &GOAL).sqrt() < GOAL_RADIUS;
        self.done = reached || self.t >= HORIZON;
        Ok(StepResult {
            next_state: self.pos.to_vec(),
            reward: if reached { 1.0 } else { 0.0 },
            done: self.done,
            success: reached,
        })
    }

    /// Initial headings of the two detours, as seen from `state`.
    fn mode_centers(&self, state: &[f64]) -> Vec<Vec<f64>> {
        [1.0, -1.0]
            .iter()
            .map(|side| {
                let d = [DETOUR_X * -1.0 - state[0], side * DETOUR_Y - state[1]];
                let n = (d[0] * d[0] + d[1] * d[1]).sqrt().max(1e-12);
                vec![d[0] / n, d[1] / n]
            })
            .collect()
    }
}

/// Follows the upper (mode 0) or lower (mode 1) detour via waypoints.
#[derive(Debug, Clone)]
pub struct MazeDemonstrator {
    noise_scale: f64,
    waypoints: Vec<[f64; 2]>,
    next: usize,
}

impl MazeDemonstrator {
    pub fn new(noise_scale: f64) -> Self {
        Self {
            noise_scale,
            waypoints: Vec::new(),
            next: 0,
        }
    }
}

impl Demonstrator for MazeDemonstrator {
    fn begin_episode(&mut self, _state: &[f64], rng: &mut DfpRng) -> usize {
        let mode = rng.random_range(0..2usize);
        let side = if mode == 0 { 1.0 } else { -1.0 };
        self.waypoints = vec![
            [-DETOUR_X, side * DETOUR_Y],
            [DETOUR_X, side * DETOUR_Y],
            GOAL,
        ];
        self.next = 0;
        mode
    }

    fn act(&mut self, state: &[f64], rng: &mut DfpRng) -> Vec<f64> {
        let pos = [state[0], state[1]];
        while self.next + 1 < self.waypoints.len()
            && crate::drift_field::sq_dist(&pos, &self.waypoints[self.next]).sqrt() < SPEED / 2.0
        {
            self.next += 1;
        }
        let w = self.waypoints[self.next];
        let d = [w[0] - pos[0], w[1] - pos[1]];
        let dist = (d[0] * d[0] + d[1] * d[1]).sqrt();
        let scale = if dist > 0.0 {
            (dist / SPEED).min(1.0) / dist
        } else {
            0.0
        };
        let mut a = vec![d[0] * scale, d[1] * scale];
        if self.noise_scale > 0.0 {
            let noise = Normal::new(0.0, self.noise_scale).expect("noise scale is finite");
            a.iter_mut().for_each(|ai| *ai += noise.sample(rng));
        }
        clip_action(&a)
    }

    fn n_modes(&self) -> usize {
        2
    }
}
