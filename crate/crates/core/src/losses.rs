//! Stop-gradient drift losses and top-K positive selection.
//!
//! Everything here works in action space: a loss takes generated actions
//! (already produced by some policy) and returns its value together with
//! `dL/dx` for each generated action. The target `x + V(x)` is treated as a
//! constant, so `dL/dx = -2 V(x) / n`. Back-propagating through the policy is
//! the caller's job.

use serde::{Deserialize, Serialize};

use crate::drift_field::{multi_bandwidth_field, Aggregation, BandwidthSet, SampleBatch};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositiveSource {
    ReplayBuffer,
    TopK,
    Oracle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositiveSet {
    pub actions: SampleBatch,
    pub source: PositiveSource,
}

impl PositiveSet {
    pub fn new(actions: SampleBatch, source: PositiveSource) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(Self { actions, source })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftLossConfig {
    /// Weight of the top-K term.
    pub lambda: f64,
    pub bandwidths: BandwidthSet,
    pub aggregation: Aggregation,
    /// Candidates drawn from the old policy per state (N).
    pub n_candidates: usize,
    /// Positives kept after ranking by Q (K).
    pub k_positives: usize,
    /// Generated actions per state.
    pub n_gen: usize,
    /// Keep each generated action in its own repulsion batch.
    pub include_self: bool,
    /// BC positives for a row are all minibatch actions taken in the same
    /// state, rather than only the row's own action.
    pub bc_group_by_state: bool,
}

impl Default for DriftLossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            bandwidths: BandwidthSet::new(vec![0.05]).expect("valid default bandwidth"),
            aggregation: Aggregation::Mean,
            n_candidates: 16,
            k_positives: 4,
            n_gen: 8,
            include_self: false,
            bc_group_by_state: true,
        }
    }
}

impl DriftLossConfig {
    /// Every violated constraint, as `field: reason`.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            out.push(format!("lambda: must be finite and >= 0, got {}", self.lambda));
        }
        if self.k_positives == 0 || self.k_positives > self.n_candidates {
            out.push(format!(
                "k_positives: need 1 <= k <= n_candidates ({}), got {}",
                self.n_candidates, self.k_positives
            ));
        }
        let min_gen = if self.include_self { 1 } else { 2 };
        if self.n_gen < min_gen {
            out.push(format!(
                "n_gen: need >= {min_gen} for repulsion, got {}",
                self.n_gen
            ));
        }
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

/// Drift loss on one set of generated actions.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftLoss {
    /// Mean of `|V(x)|^2` over generated actions.
    pub loss: f64,
    /// `V(x_i)`, row-major.
    pub fields: Vec<f64>,
    /// `dL/dx_i`, row-major.
    pub action_grads: Vec<f64>,
}

impl DriftLoss {
    /// The frozen regression targets `x + V(x)`.
    pub fn targets(&self, generated: &SampleBatch) -> Vec<f64> {
        generated
            .as_flat()
            .iter()
            .zip(&self.fields)
            .map(|(x, v)| x + v)
            .collect()
    }

    fn scale_grads(&mut self, s: f64) {
        self.action_grads.iter_mut().for_each(|g| *g *= s);
    }
}

/// `E |x - sg(x + V(x))|^2` with the generated batch as its own repulsion set.
pub fn drift_loss(
    generated: &SampleBatch,
    positives: &PositiveSet,
    cfg: &DriftLossConfig,
) -> Result<DriftLoss> {
    let n = generated.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if !cfg.include_self && n < 2 {
        return Err(Error::InvalidConfig(format!(
            "drift loss needs at least 2 generated actions when excluding self, got {n}"
        )));
    }
    if positives.actions.dim() != generated.dim() {
        return Err(Error::DimensionMismatch {
            context: "positive set",
            expected: generated.dim(),
            got: positives.actions.dim(),
        });
    }
    let mut fields = Vec::with_capacity(generated.as_flat().len());
    let mut loss = 0.0;
    for i in 0..n {
        let x = generated.point(i);
        let v = if cfg.include_self {
            multi_bandwidth_field(&cfg.bandwidths, cfg.aggregation, x, &positives.actions, generated)?
        } else {
            let negatives = generated.without(i);
            multi_bandwidth_field(&cfg.bandwidths, cfg.aggregation, x, &positives.actions, &negatives)?
        };
        loss += v.iter().map(|c| c * c).sum::<f64>();
        fields.extend(v);
    }
    let inv_n = 1.0 / n as f64;
    let action_grads = fields.iter().map(|v| -2.0 * v * inv_n).collect();
    Ok(DriftLoss {
        loss: loss * inv_n,
        fields,
        action_grads,
    })
}

/// Drift losses for a minibatch of states, averaged over rows.
///
/// Each row's `action_grads` already carry the `1/B` factor, so they are the
/// gradients of [`BatchDriftLoss::loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchDriftLoss {
    pub loss: f64,
    pub rows: Vec<DriftLoss>,
}

fn batch_drift_loss(
    generated: &[SampleBatch],
    positives: &[PositiveSet],
    cfg: &DriftLossConfig,
) -> Result<BatchDriftLoss> {
    if generated.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if generated.len() != positives.len() {
        return Err(Error::DimensionMismatch {
            context: "positive sets per row",
            expected: generated.len(),
            got: positives.len(),
        });
    }
    let inv_b = 1.0 / generated.len() as f64;
    let mut rows = Vec::with_capacity(generated.len());
    let mut loss = 0.0;
    for (g, p) in generated.iter().zip(positives) {
        let mut row = drift_loss(g, p, cfg)?;
        loss += row.loss;
        row.scale_grads(inv_b);
        rows.push(row);
    }
    Ok(BatchDriftLoss {
        loss: loss * inv_b,
        rows,
    })
}

/// Replay-buffer positives for each minibatch row.
///
/// With `group_by_state`, row `b` gets every minibatch action whose state is
/// bit-identical to `states[b]` (its own action first); otherwise just its own.
pub fn bc_positive_sets<S: AsRef<[f64]>, A: AsRef<[f64]>>(
    states: &[S],
    actions: &[A],
    group_by_state: bool,
) -> Result<Vec<PositiveSet>> {
    if states.len() != actions.len() {
        return Err(Error::DimensionMismatch {
            context: "bc actions per state",
            expected: states.len(),
            got: actions.len(),
        });
    }
    let mut out = Vec::with_capacity(states.len());
    for (b, (s, a)) in states.iter().zip(actions).enumerate() {
        let mut batch = SampleBatch::new(a.as_ref().len());
        batch.push(a.as_ref())?;
        if group_by_state {
            for (j, (s2, a2)) in states.iter().zip(actions).enumerate() {
                if j != b && s2.as_ref() == s.as_ref() {
                    batch.push(a2.as_ref())?;
                }
            }
        }
        out.push(PositiveSet::new(batch, PositiveSource::ReplayBuffer)?);
    }
    Ok(out)
}

/// Behaviour-cloning drift loss: positives come from the replay buffer.
pub fn bc_drift_loss(
    generated: &[SampleBatch],
    positives: &[PositiveSet],
    cfg: &DriftLossConfig,
) -> Result<BatchDriftLoss> {
    batch_drift_loss(generated, positives, cfg)
}

/// Indices of the `k` largest `q_values`, ties to the lower index, returned
/// in ascending index order.
pub fn top_k_indices(q_values: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = q_values.len();
    if k == 0 || k > n {
        return Err(Error::TopKTooLarge { k, n });
    }
    if let Some(index) = q_values.iter().position(|q| !q.is_finite()) {
        return Err(Error::NonFiniteQ { index });
    }
    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal values keep index order
    order.sort_by(|&a, &b| q_values[b].total_cmp(&q_values[a]));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

pub fn select_top_k(candidates: &SampleBatch, q_values: &[f64], k: usize) -> Result<PositiveSet> {
    if candidates.len() != q_values.len() {
        return Err(Error::DimensionMismatch {
            context: "q values per candidate",
            expected: candidates.len(),
            got: q_values.len(),
        });
    }
    let idx = top_k_indices(q_values, k)?;
    PositiveSet::new(candidates.select(&idx), PositiveSource::TopK)
}

/// Top-K surrogate loss. `candidates[b]` are old-policy samples for row `b`
/// and `q_values[b]` their critic values. Also returns the selected sets.
pub fn topk_drift_loss(
    generated: &[SampleBatch],
    candidates: &[SampleBatch],
    q_values: &[Vec<f64>],
    cfg: &DriftLossConfig,
) -> Result<(BatchDriftLoss, Vec<PositiveSet>)> {
    if candidates.len() != generated.len() || q_values.len() != generated.len() {
        return Err(Error::DimensionMismatch {
            context: "candidate sets per row",
            expected: generated.len(),
            got: candidates.len().min(q_values.len()),
        });
    }
    let positives = candidates
        .iter()
        .zip(q_values)
        .map(|(c, q)| select_top_k(c, q, cfg.k_positives))
        .collect::<Result<Vec<_>>>()?;
    let loss = batch_drift_loss(generated, &positives, cfg)?;
    Ok((loss, positives))
}

/// `L_BC + lambda * L_topK` with per-row action gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub bc: f64,
    pub topk: f64,
    pub total: f64,
    pub action_grads: Vec<Vec<f64>>,
}

/// Combines precomputed terms. A missing top-K term counts as zero.
pub fn combined_loss(
    bc: &BatchDriftLoss,
    topk: Option<&BatchDriftLoss>,
    lambda: f64,
) -> Result<CombinedLoss> {
    let mut action_grads: Vec<Vec<f64>> =
        bc.rows.iter().map(|r| r.action_grads.clone()).collect();
    let (topk_loss, total) = match topk {
        None => (0.0, bc.loss),
        Some(t) => {
            if t.rows.len() != bc.rows.len() {
                return Err(Error::DimensionMismatch {
                    context: "top-k rows",
                    expected: bc.rows.len(),
                    got: t.rows.len(),
                });
            }
            for (acc, row) in action_grads.iter_mut().zip(&t.rows) {
                acc.iter_mut()
                    .zip(&row.action_grads)
                    .for_each(|(a, g)| *a += lambda * g);
            }
            (t.loss, bc.loss + lambda * t.loss)
        }
    };
    Ok(CombinedLoss {
        bc: bc.loss,
        topk: topk_loss,
        total,
        action_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift_field::{drifting_field, Kernel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(h: f64) -> DriftLossConfig {
        DriftLossConfig {
            bandwidths: BandwidthSet::new(vec![h]).unwrap(),
            ..Default::default()
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> SampleBatch {
        SampleBatch::from_flat(d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn positives_equal_to_generated_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = random_batch(&mut rng, 6, 2);
        let mut c = cfg(0.3);
        c.include_self = true;
        let p = PositiveSet::new(g.clone(), PositiveSource::Oracle).unwrap();
        let out = drift_loss(&g, &p, &c).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.action_grads.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_point_self_repulsion_vanishes() {
        let x = [0.1, -0.2];
        let y = [0.4, 0.3];
        let g = SampleBatch::from_points(&[x]).unwrap();
        let p = PositiveSet::new(SampleBatch::from_points(&[y]).unwrap(), PositiveSource::Oracle)
            .unwrap();
        let mut c = cfg(0.05);
        c.include_self = true;
        let out = drift_loss(&g, &p, &c).unwrap();
        let expected = (0.4f64 - 0.1).powi(2) + (0.3f64 + 0.2).powi(2);
        assert!((out.loss - expected).abs() < 1e-15);
        c.include_self = false;
        assert!(drift_loss(&g, &p, &c).is_err());
    }

    #[test]
    fn matches_frozen_target_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_batch(&mut rng, 5, 2);
        let pos = random_batch(&mut rng, 4, 2);
        let c = cfg(0.4);
        let p = PositiveSet::new(pos.clone(), PositiveSource::Oracle).unwrap();
        let out = drift_loss(&g, &p, &c).unwrap();
        let k = Kernel::new(0.4).unwrap();
        let mut expected = 0.0;
        let mut targets = Vec::new();
        for i in 0..5 {
            let x = g.point(i);
            let v = drifting_field(&k, x, &pos, &g.without(i)).unwrap();
            let t: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + b).collect();
            expected += x.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            targets.extend(t);
        }
        expected /= 5.0;
        assert!((out.loss - expected).abs() < 1e-14);
        assert_eq!(out.targets(&g), targets);
        // gradient of the frozen-target loss
        for (j, gj) in out.action_grads.iter().enumerate() {
            let fd = 2.0 * (g.as_flat()[j] - targets[j]) / 5.0;
            assert!((gj - fd).abs() < 1e-14);
        }
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_indices(&[1.0, 3.0, 2.0, 4.0], 2).unwrap(), vec![1, 3]);
        assert_eq!(top_k_indices(&[5.0, 1.0, 3.0], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(top_k_indices(&[2.0; 5], 2).unwrap(), vec![0, 1]);
        assert!(matches!(
            top_k_indices(&[1.0], 2),
            Err(Error::TopKTooLarge { k: 2, n: 1 })
        ));
        assert!(matches!(
            top_k_indices(&[1.0, f64::NAN], 1),
            Err(Error::NonFiniteQ { index: 1 })
        ));
    }

    #[test]
    fn top_k_members_dominate_non_members() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(1..20);
            let k = rng.random_range(1..=n);
            let q: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
            let idx = top_k_indices(&q, k).unwrap();
            let min_in = idx.iter().map(|&i| q[i]).fold(f64::INFINITY, f64::min);
            for j in (0..n).filter(|j| !idx.contains(j)) {
                assert!(q[j] <= min_in);
                if q[j] == min_in {
                    // tie resolved toward lower index
                    assert!(idx.iter().filter(|&&i| q[i] == min_in).all(|&i| i < j));
                }
            }
        }
    }

    #[test]
    fn group_by_state_collects_shared_states() {
        let states = [[0.0, 1.0], [1.0, 1.0], [0.0, 1.0]];
        let actions = [[0.1, 0.1], [0.2, 0.2], [0.3, 0.3]];
        let sets = bc_positive_sets(&states, &actions, true).unwrap();
        assert_eq!(sets[0].actions.as_flat(), &[0.1, 0.1, 0.3, 0.3]);
        assert_eq!(sets[1].actions.as_flat(), &[0.2, 0.2]);
        assert_eq!(sets[2].actions.as_flat(), &[0.3, 0.3, 0.1, 0.1]);
        let single = bc_positive_sets(&states, &actions, false).unwrap();
        assert!(single.iter().all(|s| s.actions.len() == 1));
    }

    #[test]
    fn constant_critic_selects_first_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = vec![random_batch(&mut rng, 4, 2)];
        let cands = vec![random_batch(&mut rng, 6, 2)];
        let c = DriftLossConfig {
            k_positives: 3,
            n_candidates: 6,
            ..cfg(0.3)
        };
        let (loss, pos) = topk_drift_loss(&g, &cands, &[vec![0.5; 6]], &c).unwrap();
        assert_eq!(pos[0].actions, cands[0].select(&[0, 1, 2]));
        let direct = drift_loss(
            &g[0],
            &PositiveSet::new(cands[0].select(&[0, 1, 2]), PositiveSource::ReplayBuffer).unwrap(),
            &c,
        )
        .unwrap();
        assert_eq!(loss.loss, direct.loss);
    }

    #[test]
    fn analytic_critic_picks_smallest_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cands = random_batch(&mut rng, 10, 2);
        let q: Vec<f64> = cands.points().map(|a| -(a[0] * a[0] + a[1] * a[1])).collect();
        let p = select_top_k(&cands, &q, 3).unwrap();
        let mut norms: Vec<(f64, usize)> = cands
            .points()
            .enumerate()
            .map(|(i, a)| (a[0] * a[0] + a[1] * a[1], i))
            .collect();
        norms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut expect: Vec<usize> = norms[..3].iter().map(|x| x.1).collect();
        expect.sort();
        assert_eq!(p.actions, cands.select(&expect));
    }

    #[test]
    fn combined_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g: Vec<SampleBatch> = (0..3).map(|_| random_batch(&mut rng, 4, 2)).collect();
        let pos: Vec<PositiveSet> = (0..3)
            .map(|_| PositiveSet::new(random_batch(&mut rng, 2, 2), PositiveSource::ReplayBuffer).unwrap())
            .collect();
        let cands: Vec<SampleBatch> = (0..3).map(|_| random_batch(&mut rng, 16, 2)).collect();
        let q: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..16).map(|_| rng.random::<f64>()).collect())
            .collect();
        let c = cfg(0.2);
        let bc = bc_drift_loss(&g, &pos, &c).unwrap();
        let (tk, _) = topk_drift_loss(&g, &cands, &q, &c).unwrap();

        let zero = combined_loss(&bc, Some(&tk), 0.0).unwrap();
        assert_eq!(zero.total, bc.loss);
        let one = combined_loss(&bc, Some(&tk), 1.0).unwrap();
        assert!((one.total - (bc.loss + tk.loss)).abs() < 1e-12);
        let half = combined_loss(&bc, Some(&tk), 0.5).unwrap();
        assert!((half.total - (bc.loss + 0.5 * tk.loss)).abs() < 1e-12);
        for b in 0..3 {
            for j in 0..8 {
                let e = bc.rows[b].action_grads[j] + 0.5 * tk.rows[b].action_grads[j];
                assert!((half.action_grads[b][j] - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn config_problems_name_fields() {
        let c = DriftLossConfig {
            lambda: -1.0,
            k_positives: 20,
            n_gen: 1,
            ..Default::default()
        };
        let msg = c.validate().unwrap_err().to_string();
        for field in ["lambda", "k_positives", "n_gen"] {
            assert!(msg.contains(field), "{msg}");
        }
    }
}
