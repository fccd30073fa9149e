//! Agent checkpoint container.
//!
//! ```text
//! magic "DFPAGNT\x01" | u32 version | u64 seed | u64 updates
//! u32 state_dim | u32 action_dim
//! bytes policy network checkpoint (theta)
//! f64s theta_old | adam(policy)
//! u32 members, then per member: bytes critic checkpoint | f64s target | adam
//! rng(train) | rng(eval)          rng = 32-byte seed, u64 stream, u128 word position
//! sha256 of all preceding bytes
//! ```

use std::path::Path;

use crate::approximator::{AdamState, Mlp, ParamStore};
use crate::codec::{write_atomic, Reader, Writer};
use crate::error::{Error, Result};
use crate::DfpRng;

use super::{Agent, AgentConfig};

const MAGIC: &[u8; 8] = b"DFPAGNT\x01";
const VERSION: u32 = 1;

fn write_rng(w: &mut Writer, rng: &DfpRng) {
    w.bytes(&rng.get_seed());
    w.u64(rng.get_stream());
    w.u128(rng.get_word_pos());
}

fn read_rng(r: &mut Reader<'_>) -> Result<DfpRng> {
    use rand::SeedableRng;
    let seed: [u8; 32] = r
        .bytes()?
        .try_into()
        .map_err(|_| Error::Format("rng seed must be 32 bytes".into()))?;
    let mut rng = DfpRng::from_seed(seed);
    rng.set_stream(r.u64()?);
    rng.set_word_pos(r.u128()?);
    Ok(rng)
}

fn expect_same(context: &'static str, expected: &Mlp, got: &Mlp) -> Result<()> {
    if expected.config() != got.config() {
        return Err(Error::DimensionMismatch {
            context,
            expected: expected.param_count(),
            got: got.param_count(),
        });
    }
    Ok(())
}

fn expect_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        });
    }
    Ok(())
}

impl Agent {
    pub fn encode_checkpoint(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(MAGIC);
        w.u32(VERSION);
        w.u64(self.seed);
        w.u64(self.updates);
        w.u32(self.policy.state_dim() as u32);
        w.u32(self.policy.action_dim() as u32);
        w.bytes(&self.policy.mlp().encode_checkpoint(&self.theta)?);
        w.f64s(&self.theta_old.values);
        self.policy_opt.encode(&mut w);
        w.u32(self.phi.len() as u32);
        for ((p, t), opt) in self.phi.iter().zip(&self.phi_target).zip(&self.critic_opts) {
            w.bytes(&self.critic.mlp().encode_checkpoint(p)?);
            w.f64s(&t.values);
            opt.encode(&mut w);
        }
        write_rng(&mut w, &self.rng);
        write_rng(&mut w, &self.eval_rng);
        Ok(w.finish())
    }

    /// Restores an agent; `cfg` must describe the same network shapes.
    pub fn decode_checkpoint(data: &[u8], cfg: AgentConfig) -> Result<Self> {
        let mut r = Reader::open(data, MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported agent checkpoint version {version}"
            )));
        }
        let seed = r.u64()?;
        let updates = r.u64()?;
        let state_dim = r.u32()? as usize;
        let action_dim = r.u32()? as usize;
        let mut agent = Agent::new(cfg, state_dim, action_dim, seed)?;
        agent.updates = updates;

        let (mlp, theta) = Mlp::decode_checkpoint(r.bytes()?)?;
        expect_same("policy checkpoint", agent.policy.mlp(), &mlp)?;
        let theta_old = r.f64s()?;
        expect_len("old policy parameters", theta.len(), theta_old.len())?;
        let policy_opt = AdamState::decode(&mut r)?;
        expect_len("policy optimiser", theta.len(), policy_opt.first_moment.len())?;
        agent.theta = theta;
        agent.theta_old = ParamStore::from_values(theta_old);
        agent.policy_opt = policy_opt;

        let members = r.u32()? as usize;
        expect_len("critic members", agent.phi.len(), members)?;
        for m in 0..members {
            let (mlp, phi) = Mlp::decode_checkpoint(r.bytes()?)?;
            expect_same("critic checkpoint", agent.critic.mlp(), &mlp)?;
            let target = r.f64s()?;
            expect_len("target critic parameters", phi.len(), target.len())?;
            let opt = AdamState::decode(&mut r)?;
            expect_len("critic optimiser", phi.len(), opt.first_moment.len())?;
            agent.phi[m] = phi;
            agent.phi_target[m] = ParamStore::from_values(target);
            agent.critic_opts[m] = opt;
        }
        agent.rng = read_rng(&mut r)?;
        agent.eval_rng = read_rng(&mut r)?;
        r.expect_end()?;
        Ok(agent)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode_checkpoint()?)
    }

    pub fn load(path: &Path, cfg: AgentConfig) -> Result<Self> {
        Self::decode_checkpoint(&std::fs::read(path)?, cfg)
    }
}
