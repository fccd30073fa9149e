use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::approximator::{Mlp, MlpConfig, ParamStore, Tape};
use crate::drift_field::SampleBatch;
use crate::error::{Error, Result};
use crate::DfpRng;

/// How raw network outputs are mapped into `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Squash {
    #[default]
    Tanh,
    Clip,
}

/// One-step pushforward policy `a = squash(f(eps, s))`, `eps ~ N(0, I)`.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    mlp: Mlp,
    state_dim: usize,
    action_dim: usize,
    noise_dim: usize,
    squash: Squash,
}

impl PolicyNet {
    pub fn new(
        mlp_cfg: MlpConfig,
        state_dim: usize,
        action_dim: usize,
        noise_dim: usize,
        squash: Squash,
    ) -> Result<Self> {
        if mlp_cfg.input_dim != noise_dim + state_dim || mlp_cfg.output_dim != action_dim {
            return Err(Error::DimensionMismatch {
                context: "policy network shape",
                expected: noise_dim + state_dim,
                got: mlp_cfg.input_dim,
            });
        }
        Ok(Self {
            mlp: Mlp::new(mlp_cfg)?,
            state_dim,
            action_dim,
            noise_dim,
            squash,
        })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn squash(&self) -> Squash {
        self.squash
    }

    /// Forward passes executed through this policy (any parameter set).
    pub fn forward_calls(&self) -> u64 {
        self.mlp.forward_calls()
    }

    pub fn sample_noise(&self, rng: &mut DfpRng) -> Vec<f64> {
        (0..self.noise_dim)
            .map(|_| StandardNormal.sample(rng))
            .collect()
    }

    fn input(&self, state: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim {
            return Err(Error::DimensionMismatch {
                context: "policy state",
                expected: self.state_dim,
                got: state.len(),
            });
        }
        let mut x = Vec::with_capacity(self.noise_dim + self.state_dim);
        x.extend_from_slice(noise);
        x.extend_from_slice(state);
        Ok(x)
    }

    fn apply_squash(&self, raw: &mut [f64]) {
        match self.squash {
            Squash::Tanh => raw.iter_mut().for_each(|v| *v = v.tanh()),
            Squash::Clip => raw.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0)),
        }
    }

    /// One action from explicit noise: exactly one network forward.
    pub fn act(&self, params: &ParamStore, state: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
        let mut a = self.mlp.forward(params, &self.input(state, noise)?)?;
        self.apply_squash(&mut a);
        Ok(a)
    }

    /// As [`PolicyNet::act`], keeping the tape for [`PolicyNet::backward`].
    pub fn act_tape(
        &self,
        params: &ParamStore,
        state: &[f64],
        noise: &[f64],
    ) -> Result<(Vec<f64>, Tape)> {
        let tape = self.mlp.forward_tape(params, &self.input(state, noise)?)?;
        let mut a = tape.output().to_vec();
        self.apply_squash(&mut a);
        Ok((a, tape))
    }

    /// Back-propagates `dL/da` through the squash and the network.
    pub fn backward(
        &self,
        params: &mut ParamStore,
        tape: &Tape,
        action_grad: &[f64],
    ) -> Result<()> {
        let raw = tape.output();
        let g: Vec<f64> = match self.squash {
            Squash::Tanh => raw
                .iter()
                .zip(action_grad)
                .map(|(r, g)| {
                    let t = r.tanh();
                    g * (1.0 - t * t)
                })
                .collect(),
            Squash::Clip => raw
                .iter()
                .zip(action_grad)
                .map(|(r, g)| if r.abs() < 1.0 { *g } else { 0.0 })
                .collect(),
        };
        self.mlp.backward_tape(params, tape, &g)?;
        Ok(())
    }

    /// `n` i.i.d. actions for `state`.
    pub fn sample_actions(
        &self,
        params: &ParamStore,
        state: &[f64],
        n: usize,
        rng: &mut DfpRng,
    ) -> Result<SampleBatch> {
        let mut data = Vec::with_capacity(n * self.action_dim);
        for _ in 0..n {
            let eps = self.sample_noise(rng);
            data.extend(self.act(params, state, &eps)?);
        }
        SampleBatch::from_flat(self.action_dim, data)
    }
}

/// Critic members sharing one layout; the ensemble value is their mean.
#[derive(Debug, Clone)]
pub struct CriticEnsemble {
    mlp: Mlp,
    state_dim: usize,
    action_dim: usize,
}

impl CriticEnsemble {
    pub const SIZE: usize = 2;

    pub fn new(mlp_cfg: MlpConfig, state_dim: usize, action_dim: usize) -> Result<Self> {
        if mlp_cfg.input_dim != state_dim + action_dim || mlp_cfg.output_dim != 1 {
            return Err(Error::DimensionMismatch {
                context: "critic network shape",
                expected: state_dim + action_dim,
                got: mlp_cfg.input_dim,
            });
        }
        Ok(Self {
            mlp: Mlp::new(mlp_cfg)?,
            state_dim,
            action_dim,
        })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn init_members(&self, rng: &mut DfpRng) -> Vec<ParamStore> {
        (0..Self::SIZE).map(|_| self.mlp.init_params(rng)).collect()
    }

    pub fn input(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim || action.len() != self.action_dim {
            return Err(Error::DimensionMismatch {
                context: "critic input",
                expected: self.state_dim + self.action_dim,
                got: state.len() + action.len(),
            });
        }
        let mut x = Vec::with_capacity(self.state_dim + self.action_dim);
        x.extend_from_slice(state);
        x.extend_from_slice(action);
        Ok(x)
    }

    pub fn member_value(&self, params: &ParamStore, state: &[f64], action: &[f64]) -> Result<f64> {
        Ok(self.mlp.forward(params, &self.input(state, action)?)?[0])
    }

    /// Mean over members.
    pub fn value(&self, members: &[ParamStore], state: &[f64], action: &[f64]) -> Result<f64> {
        let x = self.input(state, action)?;
        let mut total = 0.0;
        for p in members {
            total += self.mlp.forward(p, &x)?[0];
        }
        Ok(total / members.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn zero_policy(squash: Squash) -> (PolicyNet, ParamStore) {
        let cfg = MlpConfig::desk(4, 2);
        let net = PolicyNet::new(cfg, 2, 2, 2, squash).unwrap();
        let mut p = ParamStore::zeros(net.mlp().param_count());
        let n = p.len();
        p.values[n - 2] = 2.5;
        p.values[n - 1] = -0.3;
        (net, p)
    }

    #[test]
    fn zero_weight_policy_emits_clipped_bias() {
        let (net, p) = zero_policy(Squash::Clip);
        let mut rng = DfpRng::seed_from_u64(0);
        let batch = net.sample_actions(&p, &[0.1, 0.2], 5, &mut rng).unwrap();
        for a in batch.points() {
            assert_eq!(a, &[1.0, -0.3]);
        }
        let (net, p) = zero_policy(Squash::Tanh);
        let a = net.act(&p, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(a, vec![2.5f64.tanh(), (-0.3f64).tanh()]);
    }

    #[test]
    fn one_forward_per_action() {
        let (net, p) = zero_policy(Squash::Tanh);
        let mut rng = DfpRng::seed_from_u64(1);
        let before = net.forward_calls();
        net.sample_actions(&p, &[0.0, 0.0], 7, &mut rng).unwrap();
        assert_eq!(net.forward_calls() - before, 7);
    }

    #[test]
    fn linear_pushforward_has_zero_mean() {
        // f(eps, s) = W eps, no squash effect for small outputs
        let cfg = MlpConfig {
            hidden_depth: 0,
            ..MlpConfig::desk(3, 2)
        };
        let net = PolicyNet::new(cfg, 1, 2, 2, Squash::Clip).unwrap();
        let mut p = ParamStore::zeros(net.mlp().param_count());
        // rows: [w_eps1, w_eps2, w_s]
        p.values[..6].copy_from_slice(&[0.1, 0.05, 0.0, -0.02, 0.08, 0.0]);
        let mut rng = DfpRng::seed_from_u64(2);
        let n = 10_000;
        let batch = net.sample_actions(&p, &[0.7], n, &mut rng).unwrap();
        for c in 0..2 {
            let mean: f64 = batch.points().map(|a| a[c]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "{mean}");
        }
    }

    #[test]
    fn squash_backward_matches_finite_differences() {
        for squash in [Squash::Tanh, Squash::Clip] {
            let cfg = MlpConfig {
                hidden_width: 5,
                ..MlpConfig::desk(3, 2)
            };
            let net = PolicyNet::new(cfg, 1, 2, 2, squash).unwrap();
            let mut rng = DfpRng::seed_from_u64(3);
            let mut p = net.mlp().init_params(&mut rng);
            let (s, eps, w) = ([0.3], [0.2, -0.4], [0.7, -1.3]);
            let (_, tape) = net.act_tape(&p, &s, &eps).unwrap();
            net.backward(&mut p, &tape, &w).unwrap();
            let f = |p: &ParamStore| -> f64 {
                let a = net.act(p, &s, &eps).unwrap();
                a[0] * w[0] + a[1] * w[1]
            };
            for i in 0..p.len() {
                let mut q = p.clone();
                q.values[i] += 1e-5;
                let up = f(&q);
                q.values[i] -= 2e-5;
                let down = f(&q);
                let fd = (up - down) / 2e-5;
                let g = p.grads[i];
                assert!((g - fd).abs() <= 1e-7 + 1e-4 * fd.abs(), "{squash:?} {i}: {g} vs {fd}");
            }
        }
    }

    #[test]
    fn ensemble_value_is_member_mean() {
        let cfg = MlpConfig::desk(4, 1).with_layer_norm(true);
        let critic = CriticEnsemble::new(cfg, 2, 2).unwrap();
        let mut rng = DfpRng::seed_from_u64(4);
        let members = critic.init_members(&mut rng);
        let (s, a) = ([0.1, 0.2], [0.3, -0.4]);
        let q0 = critic.member_value(&members[0], &s, &a).unwrap();
        let q1 = critic.member_value(&members[1], &s, &a).unwrap();
        let q = critic.value(&members, &s, &a).unwrap();
        assert!((q - 0.5 * (q0 + q1)).abs() < 1e-15);
    }
}
