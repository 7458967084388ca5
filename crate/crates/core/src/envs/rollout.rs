use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EnvKind, TaskSpec};
use crate::nets::GaussianPolicy;

/// Environment reward attached to a transition.
///
/// Rewards only exist during meta-training. A [`Reward::sentinel`] value
/// panics when read, which lets tests prove that a code path never looks at
/// rewards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reward {
    value: f64,
    sentinel: bool,
}

impl Reward {
    pub fn new(value: f64) -> Self {
        Reward { value, sentinel: false }
    }

    /// A reward that traps on read.
    pub fn sentinel() -> Self {
        Reward {
            value: f64::NAN,
            sentinel: true,
        }
    }

    pub fn get(&self) -> f64 {
        if self.sentinel {
            panic!("reward sentinel read: a reward-free code path consumed a reward");
        }
        self.value
    }
}

/// One `(s, a, s')` step. `a` is the sampled action before clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub s_next: Vec<f64>,
    pub reward: Option<Reward>,
    pub advantage: Option<f64>,
}

impl Transition {
    pub fn new(s: Vec<f64>, a: Vec<f64>, s_next: Vec<f64>) -> Self {
        Transition {
            s,
            a,
            s_next,
            reward: None,
            advantage: None,
        }
    }

    /// Copy with reward and advantage removed.
    pub fn reward_free(&self) -> Self {
        Transition {
            reward: None,
            advantage: None,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Generated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub transitions: Vec<Transition>,
    pub origin: Origin,
    pub task_id: Option<usize>,
    /// Predictive standard deviations per generated step (empty for real data).
    pub sigmas: Vec<Vec<f64>>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// True when each transition starts where the previous one ended.
    pub fn is_chained(&self) -> bool {
        self.transitions.windows(2).all(|w| w[0].s_next == w[1].s)
    }

    /// Sum of rewards; `None` if any step has no reward.
    pub fn total_reward(&self) -> Option<f64> {
        self.transitions
            .iter()
            .map(|t| t.reward.map(|r| r.get()))
            .sum()
    }

    /// The first `n` transitions as a new rollout.
    pub fn prefix(&self, n: usize) -> Rollout {
        Rollout {
            transitions: self.transitions.iter().take(n).cloned().collect(),
            origin: self.origin,
            task_id: self.task_id,
            sigmas: self.sigmas.iter().take(n).cloned().collect(),
        }
    }

    pub fn initial_observation(&self) -> Option<&[f64]> {
        self.transitions.first().map(|t| t.s.as_slice())
    }
}

/// Runs `policy` (sampling) on the true dynamics of `task` from a fresh
/// initial state. Stops at `horizon` or on termination.
pub fn collect_rollout<R: Rng + ?Sized>(
    env: EnvKind,
    task: &TaskSpec,
    policy: &GaussianPolicy,
    horizon: usize,
    rng: &mut R,
    record_rewards: bool,
) -> Rollout {
    assert_eq!(policy.action_dim(), env.action_dim(), "policy/env action dims differ");
    assert_eq!(policy.state_dim(), env.state_dim(), "policy/env state dims differ");
    let mut state = env.initial_state(rng);
    let mut obs = env.observe(task, &state);
    let mut transitions = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let a = policy.sample(&obs, rng);
        let next = env.step(task, &state, &a);
        let next_obs = env.observe(task, &next);
        let reward = record_rewards.then(|| Reward::new(env.reward(&next)));
        transitions.push(Transition {
            s: obs,
            a,
            s_next: next_obs.clone(),
            reward,
            advantage: None,
        });
        if env.is_terminal(&next) {
            break;
        }
        state = next;
        obs = next_obs;
    }
    Rollout {
        transitions,
        origin: Origin::Real,
        task_id: None,
        sigmas: Vec::new(),
    }
}

/// Deterministic (mean-action) episode. Returns the episode return and the
/// visited observations, initial one included.
pub fn run_deterministic_episode<R: Rng + ?Sized>(
    env: EnvKind,
    task: &TaskSpec,
    policy: &GaussianPolicy,
    rng: &mut R,
) -> (f64, Vec<Vec<f64>>) {
    let mut state = env.initial_state(rng);
    let mut obs = env.observe(task, &state);
    let mut path = vec![obs.clone()];
    let mut total = 0.0;
    for _ in 0..env.horizon() {
        let a = policy.mean_action(&obs);
        let next = env.step(task, &state, &a);
        total += env.reward(&next);
        obs = env.observe(task, &next);
        path.push(obs.clone());
        if env.is_terminal(&next) {
            break;
        }
        state = next;
    }
    (total, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy(env: EnvKind) -> GaussianPolicy {
        GaussianPolicy::new(env.state_dim(), env.action_dim(), &[8, 8], &mut ChaCha8Rng::seed_from_u64(1))
    }

    #[test]
    fn point_rollout_has_full_horizon_and_chains() {
        let env = EnvKind::Point;
        let task = TaskSpec::point(0.4).unwrap();
        let r = collect_rollout(env, &task, &policy(env), env.horizon(), &mut ChaCha8Rng::seed_from_u64(2), true);
        assert_eq!(r.len(), 10);
        assert!(r.is_chained());
        assert!(r.transitions.iter().all(|t| t.reward.is_some()));
        assert_eq!(r.initial_observation(), Some(&[0.0, 0.0][..]));
    }

    #[test]
    fn rewards_absent_when_not_recorded() {
        let env = EnvKind::Cartpole;
        let task = TaskSpec::cartpole(0.05).unwrap();
        let r = collect_rollout(env, &task, &policy(env), 50, &mut ChaCha8Rng::seed_from_u64(2), false);
        assert!(!r.is_empty());
        assert!(r.transitions.iter().all(|t| t.reward.is_none()));
        assert!(r.is_chained());
    }

    #[test]
    fn same_seed_same_rollout() {
        let env = EnvKind::Point;
        let task = TaskSpec::point(-1.0).unwrap();
        let p = policy(env);
        let a = collect_rollout(env, &task, &p, 10, &mut ChaCha8Rng::seed_from_u64(7), true);
        let b = collect_rollout(env, &task, &p, 10, &mut ChaCha8Rng::seed_from_u64(7), true);
        assert_eq!(a, b);
    }

    #[test]
    fn cartpole_stops_on_termination() {
        let env = EnvKind::Cartpole;
        let task = TaskSpec::cartpole(0.0).unwrap();
        let mut p = policy(env);
        // constant full push topples the pole quickly
        let last = p.mean.layers.last_mut().unwrap();
        last.bias = crate::autodiff::Array::row(&[5.0]);
        p.log_std = crate::autodiff::Array::row(&[-20.0]);
        let r = collect_rollout(env, &task, &p, env.horizon(), &mut ChaCha8Rng::seed_from_u64(3), true);
        assert!(r.len() < 100);
        assert_eq!(r.total_reward(), Some(r.len() as f64));
    }

    #[test]
    #[should_panic(expected = "reward sentinel")]
    fn sentinel_traps() {
        Reward::sentinel().get();
    }
}
