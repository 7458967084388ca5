//! Advantage estimation and policy-gradient objectives.
//!
//! Advantages come from discounted returns-to-go minus a linear-in-features
//! value baseline over `[s, s*s, t, t^2, t^3, 1]`, standardized per batch.
//! Losses are available as graph builders (so they can sit on top of an
//! adapted policy inside the meta-gradient) and as plain helpers that return
//! the loss together with its gradient.

use nalgebra::{DMatrix, DVector};

use crate::autodiff::{Array, Graph, GraphError, NodeId};
use crate::envs::{Rollout, Transition};
use crate::nets::GaussianPolicy;

pub const DEFAULT_RIDGE: f64 = 1e-5;
/// Iterated-Tikhonov refinement passes applied after the ridge solve.
const REFINE_STEPS: usize = 10;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum RlError {
    #[error("no transitions to fit or evaluate")]
    Empty,
    #[error("transition {0} carries no reward")]
    MissingReward(usize),
    #[error("baseline expects state dimension {expected}, got {got}")]
    StateDim { expected: usize, got: usize },
    #[error("clip range {0} outside (0, 1)")]
    BadClip(f64),
    #[error("{transitions} transitions but {advantages} advantages")]
    LengthMismatch { transitions: usize, advantages: usize },
    #[error("ill-conditioned baseline regression")]
    Singular,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Discounted reward-to-go for each step of one episode.
pub fn returns_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for i in (0..rewards.len()).rev() {
        acc = rewards[i] + gamma * acc;
        out[i] = acc;
    }
    out
}

fn rollout_rewards(r: &Rollout) -> Result<Vec<f64>, RlError> {
    r.transitions
        .iter()
        .enumerate()
        .map(|(i, t)| t.reward.map(|v| v.get()).ok_or(RlError::MissingReward(i)))
        .collect()
}

/// Linear value function over polynomial state/time features.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueBaseline {
    pub coef: Vec<f64>,
    pub state_dim: usize,
    /// Timesteps are divided by this before building time features.
    pub horizon: usize,
    pub ridge: f64,
}

impl ValueBaseline {
    pub fn feature_dim(state_dim: usize) -> usize {
        2 * state_dim + 4
    }

    pub fn features(state: &[f64], step: usize, horizon: usize) -> Vec<f64> {
        let t = step as f64 / horizon as f64;
        let mut f = Vec::with_capacity(2 * state.len() + 4);
        f.extend_from_slice(state);
        f.extend(state.iter().map(|v| v * v));
        f.extend([t, t * t, t * t * t, 1.0]);
        f
    }

    /// Least squares of `targets` (one slice per rollout) on the features of
    /// the rollouts' states.
    pub fn fit_targets(rollouts: &[Rollout], targets: &[Vec<f64>], horizon: usize, ridge: f64) -> Result<Self, RlError> {
        let n: usize = rollouts.iter().map(Rollout::len).sum();
        if n == 0 {
            return Err(RlError::Empty);
        }
        let state_dim = rollouts
            .iter()
            .find_map(|r| r.transitions.first())
            .map(|t| t.s.len())
            .ok_or(RlError::Empty)?;
        let k = Self::feature_dim(state_dim);
        let mut x = DMatrix::<f64>::zeros(n, k);
        let mut y = DVector::<f64>::zeros(n);
        let mut row = 0;
        for (r, tgt) in rollouts.iter().zip(targets) {
            for (step, (t, v)) in r.transitions.iter().zip(tgt).enumerate() {
                if t.s.len() != state_dim {
                    return Err(RlError::StateDim {
                        expected: state_dim,
                        got: t.s.len(),
                    });
                }
                for (j, f) in Self::features(&t.s, step, horizon).into_iter().enumerate() {
                    x[(row, j)] = f;
                }
                y[row] = *v;
                row += 1;
            }
        }
        let xtx = x.transpose() * &x;
        let xty = x.transpose() * &y;
        let reg = &xtx + DMatrix::<f64>::identity(k, k) * ridge;
        let chol = reg.cholesky().ok_or(RlError::Singular)?;
        let mut w = chol.solve(&xty);
        // Each pass shrinks the ridge bias geometrically, which makes the
        // fit reproduce its own predictions.
        for _ in 0..REFINE_STEPS {
            let resid = &xty - &xtx * &w;
            w += chol.solve(&resid);
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(RlError::Singular);
        }
        Ok(ValueBaseline {
            coef: w.iter().copied().collect(),
            state_dim,
            horizon,
            ridge,
        })
    }

    /// Fits discounted returns-to-go. Every transition must carry a reward.
    pub fn fit(rollouts: &[Rollout], gamma: f64, horizon: usize) -> Result<Self, RlError> {
        let targets = rollouts
            .iter()
            .map(|r| rollout_rewards(r).map(|rw| returns_to_go(&rw, gamma)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::fit_targets(rollouts, &targets, horizon, DEFAULT_RIDGE)
    }

    pub fn predict(&self, state: &[f64], step: usize) -> f64 {
        Self::features(state, step, self.horizon)
            .iter()
            .zip(&self.coef)
            .map(|(f, c)| f * c)
            .sum()
    }
}

/// Returns-to-go minus baseline for every transition, rollouts concatenated.
pub fn raw_advantages(rollouts: &[Rollout], baseline: &ValueBaseline, gamma: f64) -> Result<Vec<f64>, RlError> {
    let mut out = Vec::new();
    for r in rollouts {
        let rtg = returns_to_go(&rollout_rewards(r)?, gamma);
        for (step, (t, g)) in r.transitions.iter().zip(rtg).enumerate() {
            if t.s.len() != baseline.state_dim {
                return Err(RlError::StateDim {
                    expected: baseline.state_dim,
                    got: t.s.len(),
                });
            }
            out.push(g - baseline.predict(&t.s, step));
        }
    }
    Ok(out)
}

/// Zero mean, unit variance. A constant batch maps to all zeros.
pub fn standardize(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    values.iter().map(|v| (v - mean) / (std + 1e-8)).collect()
}

/// Standardized advantages in transition order.
pub fn compute_advantages(rollouts: &[Rollout], baseline: &ValueBaseline, gamma: f64) -> Result<Vec<f64>, RlError> {
    Ok(standardize(&raw_advantages(rollouts, baseline, gamma)?))
}

/// States and actions of `transitions` as `[n, ds]` and `[n, da]` arrays.
pub fn stack_states_actions(transitions: &[Transition]) -> (Array, Array) {
    let s: Vec<&[f64]> = transitions.iter().map(|t| t.s.as_slice()).collect();
    let a: Vec<&[f64]> = transitions.iter().map(|t| t.a.as_slice()).collect();
    (Array::from_rows(&s), Array::from_rows(&a))
}

/// `-mean(min(rho A, clip(rho, 1-eps, 1+eps) A))` with
/// `rho = exp(new_logp - old_logp)`. `new_logp` is an `[n, 1]` node.
pub fn ppo_surrogate_node(
    g: &mut Graph,
    new_logp: NodeId,
    old_logp: &[f64],
    advantages: &[f64],
    clip: f64,
) -> Result<NodeId, RlError> {
    if !(clip > 0.0 && clip < 1.0) {
        return Err(RlError::BadClip(clip));
    }
    let old = g.constant(Array::column(old_logp))?;
    let adv = g.constant(Array::column(advantages))?;
    let diff = g.sub(new_logp, old)?;
    let ratio = g.exp(diff)?;
    let plain = g.mul(ratio, adv)?;
    let clipped_ratio = g.clamp(ratio, 1.0 - clip, 1.0 + clip)?;
    let clipped = g.mul(clipped_ratio, adv)?;
    let m = g.minimum(plain, clipped)?;
    let mean = g.mean(m)?;
    Ok(g.neg(mean)?)
}

/// `-mean(A * logp)` for an `[n, 1]` log-prob node.
pub fn vpg_loss_node(g: &mut Graph, logp: NodeId, advantages: &[f64]) -> Result<NodeId, RlError> {
    let adv = g.constant(Array::column(advantages))?;
    let weighted = g.mul(logp, adv)?;
    let mean = g.mean(weighted)?;
    Ok(g.neg(mean)?)
}

fn check_lengths(transitions: &[Transition], advantages: &[f64]) -> Result<(), RlError> {
    if transitions.is_empty() {
        return Err(RlError::Empty);
    }
    if transitions.len() != advantages.len() {
        return Err(RlError::LengthMismatch {
            transitions: transitions.len(),
            advantages: advantages.len(),
        });
    }
    Ok(())
}

/// PPO clipped surrogate of `policy_new` against `policy_old`; returns the
/// loss and its gradient w.r.t. `policy_new`'s parameters (in
/// [`GaussianPolicy::arrays`] order).
pub fn ppo_surrogate(
    policy_new: &GaussianPolicy,
    policy_old: &GaussianPolicy,
    transitions: &[Transition],
    advantages: &[f64],
    clip: f64,
) -> Result<(f64, Vec<Array>), RlError> {
    check_lengths(transitions, advantages)?;
    let old: Vec<f64> = transitions.iter().map(|t| policy_old.log_prob(&t.s, &t.a)).collect();
    let (s, a) = stack_states_actions(transitions);
    let mut g = Graph::new();
    let nodes = policy_new.bind(&mut g)?;
    let s = g.constant(s)?;
    let a = g.constant(a)?;
    let logp = nodes.log_prob(&mut g, s, a)?;
    let loss = ppo_surrogate_node(&mut g, logp, &old, advantages, clip)?;
    let grads = g.grad_values(loss, &nodes.ids())?;
    Ok((g.value(loss).item(), grads))
}

/// Vanilla policy-gradient loss and its gradient w.r.t. the policy.
pub fn vpg_loss(policy: &GaussianPolicy, transitions: &[Transition], advantages: &[f64]) -> Result<(f64, Vec<Array>), RlError> {
    check_lengths(transitions, advantages)?;
    let (s, a) = stack_states_actions(transitions);
    let mut g = Graph::new();
    let nodes = policy.bind(&mut g)?;
    let s = g.constant(s)?;
    let a = g.constant(a)?;
    let logp = nodes.log_prob(&mut g, s, a)?;
    let loss = vpg_loss_node(&mut g, logp, advantages)?;
    let grads = g.grad_values(loss, &nodes.ids())?;
    Ok((g.value(loss).item(), grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Origin, Reward};

    fn rollout(states: &[[f64; 2]], rewards: &[f64]) -> Rollout {
        let transitions = states
            .iter()
            .zip(rewards)
            .map(|(s, r)| Transition {
                reward: Some(Reward::new(*r)),
                ..Transition::new(s.to_vec(), vec![0.0, 0.0], s.to_vec())
            })
            .collect();
        Rollout {
            transitions,
            origin: Origin::Real,
            task_id: None,
            sigmas: Vec::new(),
        }
    }

    #[test]
    fn returns_to_go_by_hand() {
        let r = returns_to_go(&[1.0, 2.0, 3.0], 0.9);
        assert!((r[2] - 3.0).abs() < 1e-12);
        assert!((r[1] - (2.0 + 0.9 * 3.0)).abs() < 1e-12);
        assert!((r[0] - (1.0 + 0.9 * 2.0 + 0.81 * 3.0)).abs() < 1e-12);
    }

    #[test]
    fn standardize_constant_is_zero() {
        assert!(standardize(&[2.0; 5]).iter().all(|v| *v == 0.0));
        let z = standardize(&[1.0, 2.0, 3.0, 4.0]);
        assert!(z.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn missing_reward_is_an_error() {
        let mut r = rollout(&[[0.0, 0.0]], &[1.0]);
        r.transitions[0].reward = None;
        assert_eq!(ValueBaseline::fit(&[r], 0.99, 10), Err(RlError::MissingReward(0)));
        assert_eq!(ValueBaseline::fit(&[], 0.99, 10), Err(RlError::Empty));
    }

    #[test]
    fn bad_clip_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Array::column(&[0.0])).unwrap();
        assert!(matches!(ppo_surrogate_node(&mut g, x, &[0.0], &[1.0], 1.0), Err(RlError::BadClip(_))));
    }
}
