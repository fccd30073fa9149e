//! The actor-critic agent: pushforward policy, EMA old policy, critic
//! ensemble with target copy, best-of-N' acting and the training loop.

mod checkpoint;
mod metrics;
mod nets;

pub use metrics::{MetricRecord, Phase, Schedule, CSV_HEADER};
pub use nets::{CriticEnsemble, PolicyNet, Squash};

use std::cell::Cell;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::approximator::{AdamState, MlpConfig, ParamStore};
use crate::drift_field::SampleBatch;
use crate::envs::{Environment, ReplayBuffer, Transition};
use crate::error::{Error, Result};
use crate::losses::{
    bc_drift_loss, bc_positive_sets, combined_loss, top_k_indices, topk_drift_loss,
    BatchDriftLoss, CombinedLoss, DriftLossConfig, PositiveSet,
};
use crate::DfpRng;

use metrics::Accumulator;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden_width: usize,
    pub hidden_depth: usize,
    pub policy_layer_norm: bool,
    pub critic_layer_norm: bool,
    pub squash: Squash,
    /// Policy noise dimension; 0 means the (chunked) action dimension.
    pub noise_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden_width: 64,
            hidden_depth: 2,
            policy_layer_norm: false,
            critic_layer_norm: true,
            squash: Squash::Tanh,
            noise_dim: 0,
        }
    }
}

impl NetworkConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.hidden_width == 0 {
            out.push("hidden_width: must be >= 1".to_string());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentParams {
    pub gamma: f64,
    /// Target-critic update rate.
    pub tau: f64,
    /// Old-policy EMA rate. Scaled up from the 1e-4 used over a million
    /// steps so the average spans as many time constants in a desk run.
    pub tau_ema: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Candidates for best-of-N' acting.
    pub n_prime: usize,
    pub chunk_horizon: usize,
    /// Gradient cycles per environment step.
    pub updates_per_step: usize,
    /// Use the best-of-N' action instead of a single policy sample in the
    /// TD target.
    pub best_of_n_target: bool,
}

impl Default for AgentParams {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 5e-3,
            tau_ema: 5e-3,
            lr: 3e-4,
            batch_size: 64,
            n_prime: 16,
            chunk_horizon: 1,
            updates_per_step: 1,
            best_of_n_target: false,
        }
    }
}

impl AgentParams {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(0.0..1.0).contains(&self.gamma) {
            out.push(format!("gamma: must be in [0, 1), got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            out.push(format!("tau: must be in [0, 1], got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.tau_ema) {
            out.push(format!("tau_ema: must be in [0, 1], got {}", self.tau_ema));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            out.push(format!("lr: must be positive, got {}", self.lr));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("n_prime", self.n_prime),
            ("chunk_horizon", self.chunk_horizon),
            ("updates_per_step", self.updates_per_step),
        ] {
            if v == 0 {
                out.push(format!("{name}: must be >= 1"));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AgentConfig {
    pub agent: AgentParams,
    pub network: NetworkConfig,
    pub loss: DriftLossConfig,
}

impl AgentConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.agent.problems();
        out.extend(self.network.problems());
        out.extend(self.loss.problems());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p.join("; ")))
        }
    }
}

/// Random inputs of one actor update, fixed so the loss can be re-evaluated.
#[derive(Debug, Clone)]
pub struct ActorDraw {
    pub states: Vec<Vec<f64>>,
    /// `noise[b][i]` drives generated action `i` of row `b`.
    pub noise: Vec<Vec<Vec<f64>>>,
    pub bc_positives: Vec<PositiveSet>,
    /// Old-policy candidates and their critic values; empty when `lambda = 0`.
    pub candidates: Vec<SampleBatch>,
    pub candidate_q: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ActorEval {
    pub generated: Vec<SampleBatch>,
    pub bc: BatchDriftLoss,
    pub topk: Option<BatchDriftLoss>,
    pub combined: CombinedLoss,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub td_loss: f64,
    pub bc_loss: f64,
    pub topk_loss: f64,
    pub combined_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalResult {
    pub returns: Vec<f64>,
    pub successes: Vec<bool>,
}

impl EvalResult {
    pub fn episodes(&self) -> usize {
        self.returns.len()
    }

    pub fn mean_return(&self) -> f64 {
        if self.returns.is_empty() {
            return 0.0;
        }
        self.returns.iter().sum::<f64>() / self.returns.len() as f64
    }

    pub fn success_rate(&self) -> f64 {
        if self.successes.is_empty() {
            return 0.0;
        }
        self.successes.iter().filter(|s| **s).count() as f64 / self.successes.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct Agent {
    cfg: AgentConfig,
    seed: u64,
    policy: PolicyNet,
    theta: ParamStore,
    theta_old: ParamStore,
    policy_opt: AdamState,
    critic: CriticEnsemble,
    phi: Vec<ParamStore>,
    phi_target: Vec<ParamStore>,
    critic_opts: Vec<AdamState>,
    rng: DfpRng,
    eval_rng: DfpRng,
    actions_generated: Cell<u64>,
    updates: u64,
}

impl Agent {
    pub fn new(cfg: AgentConfig, state_dim: usize, action_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let net = &cfg.network;
        let noise_dim = if net.noise_dim == 0 {
            action_dim
        } else {
            net.noise_dim
        };
        let shape = |input_dim, output_dim, layer_norm| MlpConfig {
            hidden_width: net.hidden_width,
            hidden_depth: net.hidden_depth,
            layer_norm,
            ..MlpConfig::desk(input_dim, output_dim)
        };
        let policy = PolicyNet::new(
            shape(noise_dim + state_dim, action_dim, net.policy_layer_norm),
            state_dim,
            action_dim,
            noise_dim,
            net.squash,
        )?;
        let critic = CriticEnsemble::new(
            shape(state_dim + action_dim, 1, net.critic_layer_norm),
            state_dim,
            action_dim,
        )?;
        let mut rng = DfpRng::seed_from_u64(seed);
        let theta = policy.mlp().init_params(&mut rng);
        let phi = critic.init_members(&mut rng);
        let mut eval_rng = DfpRng::seed_from_u64(seed);
        eval_rng.set_stream(1);
        let lr = cfg.agent.lr;
        Ok(Self {
            theta_old: theta.clone(),
            policy_opt: AdamState::new(theta.len(), lr),
            critic_opts: phi.iter().map(|p| AdamState::new(p.len(), lr)).collect(),
            phi_target: phi.clone(),
            theta,
            phi,
            policy,
            critic,
            cfg,
            seed,
            rng,
            eval_rng,
            actions_generated: Cell::new(0),
            updates: 0,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn policy(&self) -> &PolicyNet {
        &self.policy
    }

    pub fn critic(&self) -> &CriticEnsemble {
        &self.critic
    }

    pub fn theta(&self) -> &ParamStore {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut ParamStore {
        &mut self.theta
    }

    pub fn theta_old(&self) -> &ParamStore {
        &self.theta_old
    }

    pub fn theta_old_mut(&mut self) -> &mut ParamStore {
        &mut self.theta_old
    }

    pub fn critics(&self) -> &[ParamStore] {
        &self.phi
    }

    pub fn critics_mut(&mut self) -> &mut [ParamStore] {
        &mut self.phi
    }

    pub fn target_critics(&self) -> &[ParamStore] {
        &self.phi_target
    }

    pub fn target_critics_mut(&mut self) -> &mut [ParamStore] {
        &mut self.phi_target
    }

    pub fn rng_mut(&mut self) -> &mut DfpRng {
        &mut self.rng
    }

    /// Gradient cycles performed so far.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Actions produced by the current or old policy since construction.
    pub fn actions_generated(&self) -> u64 {
        self.actions_generated.get()
    }

    /// Policy-network forward passes since construction.
    pub fn policy_forward_calls(&self) -> u64 {
        self.policy.forward_calls()
    }

    fn count(&self, n: usize) {
        self.actions_generated
            .set(self.actions_generated.get() + n as u64);
    }

    fn sample_with(
        &self,
        params: &ParamStore,
        state: &[f64],
        n: usize,
        rng: &mut DfpRng,
    ) -> Result<SampleBatch> {
        self.count(n);
        self.policy.sample_actions(params, state, n, rng)
    }

    /// `n` actions from the current policy.
    pub fn sample_actions(&mut self, state: &[f64], n: usize) -> Result<SampleBatch> {
        let mut rng = self.rng.clone();
        let out = self.sample_with(&self.theta, state, n, &mut rng);
        self.rng = rng;
        out
    }

    /// Ensemble value `Q_phi(s, a)`.
    pub fn q_value(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        self.critic.value(&self.phi, state, action)
    }

    fn best_of_n_with(&self, state: &[f64], rng: &mut DfpRng) -> Result<Vec<f64>> {
        let cands = self.sample_with(&self.theta, state, self.cfg.agent.n_prime, rng)?;
        let q = cands
            .points()
            .map(|a| self.q_value(state, a))
            .collect::<Result<Vec<_>>>()?;
        let best = top_k_indices(&q, 1)?[0];
        Ok(cands.point(best).to_vec())
    }

    /// Critic-argmax over `n_prime` policy samples (lowest index on ties).
    pub fn best_of_n(&mut self, state: &[f64]) -> Result<Vec<f64>> {
        let mut rng = self.rng.clone();
        let out = self.best_of_n_with(state, &mut rng);
        self.rng = rng;
        out
    }

    /// Next-state actions for the TD target; `None` where they are unused.
    pub fn draw_next_actions(&mut self, batch: &[&Transition]) -> Result<Vec<Option<Vec<f64>>>> {
        let mut rng = self.rng.clone();
        let mut out = Vec::with_capacity(batch.len());
        for t in batch {
            if t.done || self.cfg.agent.gamma == 0.0 {
                out.push(None);
                continue;
            }
            let a = if self.cfg.agent.best_of_n_target {
                self.best_of_n_with(&t.next_state, &mut rng)?
            } else {
                self.sample_with(&self.theta, &t.next_state, 1, &mut rng)?
                    .as_flat()
                    .to_vec()
            };
            out.push(Some(a));
        }
        self.rng = rng;
        Ok(out)
    }

    /// `y = r + gamma (1 - done) mean_m Q_target_m(s', a')`.
    pub fn td_targets(
        &self,
        batch: &[&Transition],
        next_actions: &[Option<Vec<f64>>],
    ) -> Result<Vec<f64>> {
        batch
            .iter()
            .zip(next_actions)
            .map(|(t, a)| match a {
                Some(a) if !t.done => Ok(t.reward
                    + self.cfg.agent.gamma
                        * self.critic.value(&self.phi_target, &t.next_state, a)?),
                _ => Ok(t.reward),
            })
            .collect()
    }

    /// Mean squared TD error over members and rows; accumulates its gradient
    /// into `members[m].grads`.
    pub fn td_loss_grad(
        &self,
        members: &mut [ParamStore],
        batch: &[&Transition],
        targets: &[f64],
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let scale = 1.0 / (batch.len() * members.len()) as f64;
        let mlp = self.critic.mlp();
        let mut loss = 0.0;
        for p in members.iter_mut() {
            for (t, y) in batch.iter().zip(targets) {
                let tape = mlp.forward_tape(p, &self.critic.input(&t.state, &t.action)?)?;
                let err = tape.output()[0] - y;
                loss += err * err * scale;
                mlp.backward_tape(p, &tape, &[2.0 * err * scale])?;
            }
        }
        Ok(loss)
    }

    /// One TD regression step on every critic member.
    pub fn critic_update(&mut self, batch: &[&Transition]) -> Result<f64> {
        let next = self.draw_next_actions(batch)?;
        let targets = self.td_targets(batch, &next)?;
        let mut phi = std::mem::take(&mut self.phi);
        let res = self.td_loss_grad(&mut phi, batch, &targets);
        let res = res.and_then(|loss| {
            for (p, opt) in phi.iter_mut().zip(&mut self.critic_opts) {
                opt.step(p)?;
            }
            Ok(loss)
        });
        if res.is_err() {
            phi.iter_mut().for_each(ParamStore::zero_grads);
        }
        self.phi = phi;
        res
    }

    /// Samples everything random in an actor update.
    pub fn draw_actor_inputs(&mut self, batch: &[&Transition]) -> Result<ActorDraw> {
        let loss = &self.cfg.loss;
        let mut rng = self.rng.clone();
        let states: Vec<Vec<f64>> = batch.iter().map(|t| t.state.clone()).collect();
        let noise = states
            .iter()
            .map(|_| {
                (0..loss.n_gen)
                    .map(|_| self.policy.sample_noise(&mut rng))
                    .collect()
            })
            .collect();
        let actions: Vec<&[f64]> = batch.iter().map(|t| t.action.as_slice()).collect();
        let bc_positives = bc_positive_sets(&states, &actions, loss.bc_group_by_state)?;
        let mut candidates = Vec::new();
        let mut candidate_q = Vec::new();
        if loss.lambda > 0.0 {
            for s in &states {
                let c = self.sample_with(&self.theta_old, s, loss.n_candidates, &mut rng)?;
                let q = c
                    .points()
                    .map(|a| self.q_value(s, a))
                    .collect::<Result<Vec<_>>>()?;
                candidates.push(c);
                candidate_q.push(q);
            }
        }
        self.rng = rng;
        Ok(ActorDraw {
            states,
            noise,
            bc_positives,
            candidates,
            candidate_q,
        })
    }

    /// Evaluates the combined loss for `params` on a fixed draw and
    /// accumulates its gradient into `params.grads`.
    pub fn actor_loss_grad(&self, params: &mut ParamStore, draw: &ActorDraw) -> Result<ActorEval> {
        let d = self.policy.action_dim();
        let mut generated = Vec::with_capacity(draw.states.len());
        let mut tapes = Vec::with_capacity(draw.states.len());
        for (s, row_noise) in draw.states.iter().zip(&draw.noise) {
            let mut flat = Vec::with_capacity(row_noise.len() * d);
            let mut row_tapes = Vec::with_capacity(row_noise.len());
            for eps in row_noise {
                let (a, tape) = self.policy.act_tape(params, s, eps)?;
                flat.extend(a);
                row_tapes.push(tape);
            }
            self.count(row_noise.len());
            generated.push(SampleBatch::from_flat(d, flat)?);
            tapes.push(row_tapes);
        }
        let bc = bc_drift_loss(&generated, &draw.bc_positives, &self.cfg.loss)?;
        let topk = if draw.candidates.is_empty() {
            None
        } else {
            Some(
                topk_drift_loss(&generated, &draw.candidates, &draw.candidate_q, &self.cfg.loss)?
                    .0,
            )
        };
        let combined = combined_loss(&bc, topk.as_ref(), self.cfg.loss.lambda)?;
        for (row_tapes, grads) in tapes.iter().zip(&combined.action_grads) {
            for (tape, g) in row_tapes.iter().zip(grads.chunks_exact(d)) {
                self.policy.backward(params, tape, g)?;
            }
        }
        Ok(ActorEval {
            generated,
            bc,
            topk,
            combined,
        })
    }

    /// One Adam step on the policy using `L_BC + lambda L_topK`.
    pub fn actor_update(&mut self, batch: &[&Transition]) -> Result<CombinedLoss> {
        let draw = self.draw_actor_inputs(batch)?;
        let mut theta = std::mem::replace(&mut self.theta, ParamStore::zeros(0));
        let res = self
            .actor_loss_grad(&mut theta, &draw)
            .and_then(|eval| self.policy_opt.step(&mut theta).map(|_| eval.combined));
        if res.is_err() {
            theta.zero_grads();
        }
        self.theta = theta;
        res
    }

    /// Old-policy EMA and target-critic soft update.
    pub fn ema_updates(&mut self) {
        self.theta_old
            .blend_towards(&self.theta.values, self.cfg.agent.tau_ema);
        for (t, p) in self.phi_target.iter_mut().zip(&self.phi) {
            t.blend_towards(&p.values, self.cfg.agent.tau);
        }
    }

    /// Copies the current policy into the old policy.
    pub fn sync_old_policy(&mut self) {
        self.theta_old.values.clone_from(&self.theta.values);
    }

    /// `updates_per_step` cycles of actor, critic, EMA on fresh minibatches.
    /// Returns the statistics of the last cycle.
    pub fn train_step(&mut self, buffer: &ReplayBuffer) -> Result<StepStats> {
        let mut stats = StepStats::default();
        for _ in 0..self.cfg.agent.updates_per_step {
            let idx = buffer.sample_indices(self.cfg.agent.batch_size, &mut self.rng)?;
            let batch: Vec<&Transition> = idx.iter().map(|&i| buffer.get(i)).collect();
            let actor = self.actor_update(&batch)?;
            let td = self.critic_update(&batch)?;
            self.ema_updates();
            self.updates += 1;
            stats = StepStats {
                td_loss: td,
                bc_loss: actor.bc,
                topk_loss: actor.topk,
                combined_loss: actor.total,
            };
        }
        Ok(stats)
    }

    /// Best-of-N' rollouts on `env` with a dedicated random stream.
    pub fn evaluate(&mut self, env: &mut (dyn Environment + '_), episodes: usize) -> Result<EvalResult> {
        let mut rng = self.eval_rng.clone();
        let mut out = EvalResult::default();
        for ep in 0..episodes {
            let mut s = env.reset(&mut rng);
            let mut ret = 0.0;
            loop {
                let a = self.best_of_n_with(&s, &mut rng)?;
                let r = env.step(&a).map_err(|e| Error::Environment {
                    step: ep as u64,
                    message: e.to_string(),
                })?;
                ret += r.reward;
                s = r.next_state;
                if r.done {
                    out.returns.push(ret);
                    out.successes.push(r.success);
                    break;
                }
            }
        }
        self.eval_rng = rng;
        Ok(out)
    }

    /// Offline training on a fixed buffer. Steps are numbered from
    /// `step_offset + 1`.
    pub fn run_offline(
        &mut self,
        buffer: &ReplayBuffer,
        steps: usize,
        schedule: &Schedule,
        eval_env: Option<&mut (dyn Environment + '_)>,
        step_offset: u64,
    ) -> Result<Vec<MetricRecord>> {
        self.run_offline_observed(buffer, steps, schedule, eval_env, step_offset, &mut |_, _| Ok(()))
    }

    /// As [`Agent::run_offline`], calling `observe` with every record as soon
    /// as it is emitted.
    pub fn run_offline_observed(
        &mut self,
        buffer: &ReplayBuffer,
        steps: usize,
        schedule: &Schedule,
        mut eval_env: Option<&mut (dyn Environment + '_)>,
        step_offset: u64,
        observe: &mut dyn FnMut(&Agent, &MetricRecord) -> Result<()>,
    ) -> Result<Vec<MetricRecord>> {
        if steps > 0 && buffer.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let mut records = Vec::new();
        let mut acc = Accumulator::default();
        for k in 1..=steps {
            acc.add(&self.train_step(buffer)?);
            if schedule.due(k, steps) {
                let eval = self.maybe_eval(schedule, k, steps, eval_env.as_deref_mut())?;
                let rec = acc.flush(
                    step_offset + k as u64,
                    Phase::Offline,
                    eval.as_ref(),
                    None,
                    self.seed,
                );
                observe(self, &rec)?;
                records.push(rec);
            }
        }
        Ok(records)
    }

    fn maybe_eval(
        &mut self,
        schedule: &Schedule,
        k: usize,
        total: usize,
        env: Option<&mut (dyn Environment + '_)>,
    ) -> Result<Option<EvalResult>> {
        match env {
            Some(env) if schedule.eval_due(k, total) => {
                Ok(Some(self.evaluate(env, schedule.eval_episodes)?))
            }
            _ => Ok(None),
        }
    }

    /// Online fine-tuning: act best-of-N', append to `buffer`, then train.
    pub fn run_online(
        &mut self,
        env: &mut dyn Environment,
        buffer: &mut ReplayBuffer,
        steps: usize,
        schedule: &Schedule,
        eval_env: Option<&mut (dyn Environment + '_)>,
        step_offset: u64,
    ) -> Result<Vec<MetricRecord>> {
        self.run_online_observed(env, buffer, steps, schedule, eval_env, step_offset, &mut |_, _| {
            Ok(())
        })
    }

    /// As [`Agent::run_online`], calling `observe` with every record.
    #[allow(clippy::too_many_arguments)]
    pub fn run_online_observed(
        &mut self,
        env: &mut dyn Environment,
        buffer: &mut ReplayBuffer,
        steps: usize,
        schedule: &Schedule,
        mut eval_env: Option<&mut (dyn Environment + '_)>,
        step_offset: u64,
        observe: &mut dyn FnMut(&Agent, &MetricRecord) -> Result<()>,
    ) -> Result<Vec<MetricRecord>> {
        self.sync_old_policy();
        let mut records = Vec::new();
        let mut acc = Accumulator::default();
        let mut state: Option<Vec<f64>> = None;
        let mut episodes = (0usize, 0usize);
        for k in 1..=steps {
            let global = step_offset + k as u64;
            let s = match state.take() {
                Some(s) => s,
                None => env.reset(&mut self.rng),
            };
            let a = self.best_of_n(&s)?;
            let r = env.step(&a).map_err(|e| Error::Environment {
                step: global,
                message: e.to_string(),
            })?;
            if r.done {
                episodes.0 += 1;
                episodes.1 += r.success as usize;
            } else {
                state = Some(r.next_state.clone());
            }
            buffer.add(Transition {
                state: s,
                action: a,
                reward: r.reward,
                next_state: r.next_state,
                done: r.done,
            })?;
            acc.add(&self.train_step(buffer)?);
            if schedule.due(k, steps) {
                let eval = self.maybe_eval(schedule, k, steps, eval_env.as_deref_mut())?;
                let online_success = (episodes.0 > 0).then(|| episodes.1 as f64 / episodes.0 as f64);
                episodes = (0, 0);
                let rec = acc.flush(global, Phase::Online, eval.as_ref(), online_success, self.seed);
                observe(self, &rec)?;
                records.push(rec);
            }
        }
        Ok(records)
    }
}
