//! Offline datasets and their binary file format.
//!
//! ```text
//! magic "DFPDATA\x01"
//! u32 version | u32 state_dim | u32 action_dim
//! bytes env_id
//! u64 n_transitions | u64 n_episodes
//! per episode: u64 end (exclusive transition index) | u64 mode | u8 success
//! per transition: f64 state[sd] | f64 action[ad] | f64 reward | f64 next_state[sd] | f64 done
//! sha256 of all preceding bytes
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use super::{Demonstrator, Environment, Transition};
use crate::codec::{write_atomic, Reader, Writer};
use crate::error::{Error, Result};
use crate::DfpRng;

const MAGIC: &[u8; 8] = b"DFPDATA\x01";
const VERSION: u32 = 1;

/// Mode balance is only enforced for datasets at least this large.
pub const MIN_BALANCE_EPISODES: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub env_id: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub transitions: Vec<Transition>,
    pub episode_ends: Vec<usize>,
    pub episode_modes: Vec<usize>,
    pub episode_success: Vec<bool>,
}

impl Dataset {
    pub fn n_episodes(&self) -> usize {
        self.episode_ends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Fraction of episodes demonstrating each mode.
    pub fn mode_balance(&self, n_modes: usize) -> Vec<f64> {
        let mut counts = vec![0usize; n_modes];
        for &m in &self.episode_modes {
            counts[m] += 1;
        }
        let n = self.n_episodes().max(1) as f64;
        counts.into_iter().map(|c| c as f64 / n).collect()
    }

    pub fn success_rate(&self) -> f64 {
        if self.episode_success.is_empty() {
            return 0.0;
        }
        self.episode_success.iter().filter(|s| **s).count() as f64
            / self.episode_success.len() as f64
    }

    /// Mean undiscounted episode return.
    pub fn mean_return(&self) -> f64 {
        if self.episode_ends.is_empty() {
            return 0.0;
        }
        let mut start = 0;
        let mut total = 0.0;
        for &end in &self.episode_ends {
            total += self.transitions[start..end]
                .iter()
                .map(|t| t.reward)
                .sum::<f64>();
            start = end;
        }
        total / self.episode_ends.len() as f64
    }

    /// Transitions over action chunks of length `chunk`, one per start step.
    ///
    /// The chunked action concatenates the next `chunk` actions (repeating
    /// the last one past the end of an episode, where the executor stops
    /// anyway), the reward is their `gamma`-discounted sum, and the next
    /// state is the one reached after the chunk or at the episode's end.
    pub fn chunked(&self, chunk: usize, gamma: f64) -> Result<Vec<Transition>> {
        if chunk == 0 {
            return Err(Error::InvalidConfig("chunk horizon must be >= 1".into()));
        }
        if chunk == 1 {
            return Ok(self.transitions.clone());
        }
        let mut out = Vec::with_capacity(self.transitions.len());
        let mut start = 0;
        for &end in &self.episode_ends {
            let episode = &self.transitions[start..end];
            for t in 0..episode.len() {
                let window = &episode[t..(t + chunk).min(episode.len())];
                let mut action = Vec::with_capacity(chunk * self.action_dim);
                let mut reward = 0.0;
                let mut discount = 1.0;
                let mut last = &window[0];
                for step in window {
                    action.extend_from_slice(&step.action);
                    reward += discount * step.reward;
                    discount *= gamma;
                    last = step;
                    if step.done {
                        break;
                    }
                }
                while action.len() < chunk * self.action_dim {
                    action.extend_from_slice(&last.action);
                }
                out.push(Transition {
                    state: episode[t].state.clone(),
                    action,
                    reward,
                    next_state: last.next_state.clone(),
                    done: last.done,
                });
            }
            start = end;
        }
        Ok(out)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut w = Writer::new(MAGIC);
        w.u32(VERSION);
        w.u32(self.state_dim as u32);
        w.u32(self.action_dim as u32);
        w.bytes(self.env_id.as_bytes());
        w.u64(self.transitions.len() as u64);
        w.u64(self.episode_ends.len() as u64);
        for i in 0..self.episode_ends.len() {
            w.u64(self.episode_ends[i] as u64);
            w.u64(self.episode_modes[i] as u64);
            w.u8(self.episode_success[i] as u8);
        }
        for t in &self.transitions {
            t.state.iter().for_each(|&v| w.f64(v));
            t.action.iter().for_each(|&v| w.f64(v));
            w.f64(t.reward);
            t.next_state.iter().for_each(|&v| w.f64(v));
            w.f64(if t.done { 1.0 } else { 0.0 });
        }
        Ok(w.finish())
    }

    pub fn decode(data: &[u8]) -> Result<Self> {
        let mut r = Reader::open(data, MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let state_dim = r.u32()? as usize;
        let action_dim = r.u32()? as usize;
        let env_id = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::Format("env id is not utf-8".into()))?;
        let n = r.u64()? as usize;
        let n_ep = r.u64()? as usize;
        let mut episode_ends = Vec::with_capacity(n_ep.min(1 << 20));
        let mut episode_modes = Vec::with_capacity(n_ep.min(1 << 20));
        let mut episode_success = Vec::with_capacity(n_ep.min(1 << 20));
        for _ in 0..n_ep {
            episode_ends.push(r.u64()? as usize);
            episode_modes.push(r.u64()? as usize);
            episode_success.push(r.u8()? != 0);
        }
        let read_vec = |r: &mut Reader<'_>, d: usize| -> Result<Vec<f64>> {
            (0..d).map(|_| r.f64()).collect()
        };
        let mut transitions = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let state = read_vec(&mut r, state_dim)?;
            let action = read_vec(&mut r, action_dim)?;
            let reward = r.f64()?;
            let next_state = read_vec(&mut r, state_dim)?;
            let done = r.f64()? != 0.0;
            transitions.push(Transition {
                state,
                action,
                reward,
                next_state,
                done,
            });
        }
        r.expect_end()?;
        if episode_ends.last().copied().unwrap_or(0) != n
            || episode_ends.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::Format("inconsistent episode boundaries".into()));
        }
        Ok(Self {
            env_id,
            state_dim,
            action_dim,
            transitions,
            episode_ends,
            episode_modes,
            episode_success,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// Rolls out `demo` for `n_episodes` episodes.
///
/// Fails if more than half the episodes end unsuccessfully, or, for datasets
/// with at least [`MIN_BALANCE_EPISODES`] episodes, if any mode falls outside
/// 30-70% of episodes.
pub fn generate_offline_dataset(
    env: &mut dyn Environment,
    demo: &mut dyn Demonstrator,
    n_episodes: usize,
    rng: &mut DfpRng,
) -> Result<Dataset> {
    let mut ds = Dataset {
        env_id: env.id().to_string(),
        state_dim: env.state_dim(),
        action_dim: env.action_dim(),
        transitions: Vec::new(),
        episode_ends: Vec::with_capacity(n_episodes),
        episode_modes: Vec::with_capacity(n_episodes),
        episode_success: Vec::with_capacity(n_episodes),
    };
    for ep in 0..n_episodes {
        let mut s = env.reset(rng);
        let mode = demo.begin_episode(&s, rng);
        let success = loop {
            let a = demo.act(&s, rng);
            let r = env.step(&a).map_err(|e| Error::Environment {
                step: ep as u64,
                message: e.to_string(),
            })?;
            ds.transitions.push(Transition {
                state: std::mem::replace(&mut s, r.next_state.clone()),
                action: a,
                reward: r.reward,
                next_state: r.next_state,
                done: r.done,
            });
            if r.done {
                break r.success;
            }
        };
        ds.episode_ends.push(ds.transitions.len());
        ds.episode_modes.push(mode);
        ds.episode_success.push(success);
    }
    if n_episodes > 0 {
        let rate = 1.0 - ds.success_rate();
        if rate > 0.5 {
            return Err(Error::DemonstratorFailure { rate });
        }
    }
    if n_episodes >= MIN_BALANCE_EPISODES {
        for (mode, fraction) in ds.mode_balance(demo.n_modes()).into_iter().enumerate() {
            if !(0.3..=0.7).contains(&fraction) {
                return Err(Error::ModeImbalance { mode, fraction });
            }
        }
    }
    Ok(ds)
}
