//! The two benchmark environments, task sampling and rollout collection.
//!
//! Environments are plain values: [`EnvKind`] selects the dynamics and a
//! [`TaskSpec`] carries the hidden parameter. The agent only ever sees
//! observations; for cartpole the observed pole angle is shifted by the
//! task's sensor bias while dynamics and termination use the true state.

pub mod cartpole;
pub mod point;
mod rollout;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use rollout::{collect_rollout, run_deterministic_episode, Origin, Reward, Rollout, Transition};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("task index {index} outside [0, {count})")]
    TaskIndex { index: usize, count: usize },
    #[error("rotation {0} outside [-pi, pi]")]
    Omega(f64),
    #[error("sensor bias {0} rad outside [-8, 8] degrees")]
    Bias(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Point,
    Cartpole,
}

/// Hidden task parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskSpec {
    /// Rotation of the action in radians.
    Point { omega: f64 },
    /// Additive pole-angle sensor drift in radians.
    Cartpole { bias: f64 },
}

impl TaskSpec {
    pub fn point(omega: f64) -> Result<Self, EnvError> {
        let pi = std::f64::consts::PI;
        if !(-pi..=pi).contains(&omega) {
            return Err(EnvError::Omega(omega));
        }
        Ok(TaskSpec::Point { omega })
    }

    pub fn cartpole(bias: f64) -> Result<Self, EnvError> {
        // small slack so a bias given in degrees converts cleanly at the edge
        if !(bias.abs() <= cartpole::MAX_BIAS + 1e-12) {
            return Err(EnvError::Bias(bias));
        }
        Ok(TaskSpec::Cartpole { bias })
    }

    pub fn kind(&self) -> EnvKind {
        match self {
            TaskSpec::Point { .. } => EnvKind::Point,
            TaskSpec::Cartpole { .. } => EnvKind::Cartpole,
        }
    }

    /// The hidden scalar (ω or b).
    pub fn parameter(&self) -> f64 {
        match *self {
            TaskSpec::Point { omega } => omega,
            TaskSpec::Cartpole { bias } => bias,
        }
    }
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Point => "point",
            EnvKind::Cartpole => "cartpole",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            EnvKind::Point => 0,
            EnvKind::Cartpole => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(EnvKind::Point),
            1 => Some(EnvKind::Cartpole),
            _ => None,
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            EnvKind::Point => 2,
            EnvKind::Cartpole => 4,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            EnvKind::Point => 2,
            EnvKind::Cartpole => 1,
        }
    }

    pub fn horizon(self) -> usize {
        match self {
            EnvKind::Point => point::HORIZON,
            EnvKind::Cartpole => cartpole::HORIZON,
        }
    }

    /// Fresh true state: the origin for point, uniform in `[-0.05, 0.05]^4`
    /// for cartpole.
    pub fn initial_state<R: Rng + ?Sized>(self, rng: &mut R) -> Vec<f64> {
        match self {
            EnvKind::Point => vec![0.0, 0.0],
            EnvKind::Cartpole => (0..4).map(|_| rng.random_range(-0.05..=0.05)).collect(),
        }
    }

    pub fn observe(self, task: &TaskSpec, state: &[f64]) -> Vec<f64> {
        match (self, task) {
            (EnvKind::Point, _) => state.to_vec(),
            (EnvKind::Cartpole, TaskSpec::Cartpole { bias }) => cartpole::cartpole_observe(*bias, state).to_vec(),
            (EnvKind::Cartpole, _) => panic!("cartpole needs a cartpole task"),
        }
    }

    /// Maps a bias-free observation back to the true state.
    pub fn unobserve(self, task: &TaskSpec, obs: &[f64]) -> Vec<f64> {
        match (self, task) {
            (EnvKind::Cartpole, TaskSpec::Cartpole { bias }) => cartpole::cartpole_observe(-*bias, obs).to_vec(),
            _ => obs.to_vec(),
        }
    }

    /// The action as it acts on the system: clipped to `[-1, 1]` per dimension.
    pub fn clip_action(self, action: &[f64]) -> Vec<f64> {
        action.iter().map(|a| a.clamp(-1.0, 1.0)).collect()
    }

    /// Bounds shared by every observation coordinate, if the environment has them.
    pub fn observation_bounds(self) -> Option<(f64, f64)> {
        match self {
            EnvKind::Point => Some((-point::BOX, point::BOX)),
            EnvKind::Cartpole => None,
        }
    }

    /// True dynamics. The action is clipped to `[-1, 1]` per dimension; the
    /// cartpole force is ten times the clipped action.
    pub fn step(self, task: &TaskSpec, state: &[f64], action: &[f64]) -> Vec<f64> {
        match (self, task) {
            (EnvKind::Point, TaskSpec::Point { omega }) => point::point_step(*omega, state, action).to_vec(),
            (EnvKind::Cartpole, TaskSpec::Cartpole { .. }) => {
                let force = cartpole::FORCE_LIMIT * action[0].clamp(-1.0, 1.0);
                cartpole::cartpole_step(state, force).to_vec()
            }
            _ => panic!("task {task:?} does not belong to {}", self.name()),
        }
    }

    /// Reward for arriving in true state `next`.
    pub fn reward(self, next: &[f64]) -> f64 {
        match self {
            EnvKind::Point => point::point_reward(next),
            EnvKind::Cartpole => 1.0,
        }
    }

    pub fn is_terminal(self, state: &[f64]) -> bool {
        match self {
            EnvKind::Point => false,
            EnvKind::Cartpole => cartpole::is_terminal(state),
        }
    }

    /// Termination judged from an observation, for model-generated rollouts
    /// where only observations exist. Cartpole uses the observed angle since
    /// the bias is unknown to the agent.
    pub fn is_terminal_observation(self, obs: &[f64]) -> bool {
        self.is_terminal(obs)
    }

    /// Draws a meta-training task. Point tasks come from the 5000-index grid
    /// with the evaluation indices held out; cartpole biases are uniform in
    /// `[-8, 8]` degrees.
    pub fn sample_task<R: Rng + ?Sized>(self, rng: &mut R) -> (Option<usize>, TaskSpec) {
        match self {
            EnvKind::Point => loop {
                let i = rng.random_range(0..point::TASK_COUNT);
                if !point::TEST_TASK_INDICES.contains(&i) {
                    let task = point::task_from_index(i).expect("index in range");
                    return (Some(i), task);
                }
            },
            EnvKind::Cartpole => {
                let b = rng.random_range(-cartpole::MAX_BIAS..=cartpole::MAX_BIAS);
                (None, TaskSpec::Cartpole { bias: b })
            }
        }
    }

    /// Evaluation tasks: the six held-out grid indices for point, a fixed
    /// symmetric set of biases for cartpole.
    pub fn test_tasks(self) -> Vec<(usize, TaskSpec)> {
        match self {
            EnvKind::Point => point::TEST_TASK_INDICES
                .iter()
                .map(|&i| (i, point::task_from_index(i).expect("index in range")))
                .collect(),
            EnvKind::Cartpole => cartpole::TEST_BIAS_DEGREES
                .iter()
                .enumerate()
                .map(|(i, d)| (i, TaskSpec::Cartpole { bias: d.to_radians() }))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn task_ranges_are_validated() {
        assert!(TaskSpec::point(3.2).is_err());
        assert!(TaskSpec::point(-std::f64::consts::PI).is_ok());
        assert!(TaskSpec::cartpole(8f64.to_radians()).is_ok());
        assert!(TaskSpec::cartpole(8.1f64.to_radians()).is_err());
        assert!(TaskSpec::cartpole(f64::NAN).is_err());
    }

    #[test]
    fn training_sampler_skips_test_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20_000 {
            let (i, t) = EnvKind::Point.sample_task(&mut rng);
            assert!(!point::TEST_TASK_INDICES.contains(&i.unwrap()));
            assert_eq!(t.kind(), EnvKind::Point);
        }
        for _ in 0..1000 {
            let (_, t) = EnvKind::Cartpole.sample_task(&mut rng);
            assert!(t.parameter().abs() <= cartpole::MAX_BIAS);
        }
    }

    #[test]
    fn cartpole_action_is_scaled_and_clipped() {
        let t = TaskSpec::cartpole(0.0).unwrap();
        let s = [0.0, 0.0, 0.02, 0.0];
        let env = EnvKind::Cartpole;
        assert_eq!(env.step(&t, &s, &[0.5]), cartpole::cartpole_step(&s, 5.0).to_vec());
        assert_eq!(env.step(&t, &s, &[3.0]), cartpole::cartpole_step(&s, 10.0).to_vec());
    }

    #[test]
    fn observe_round_trips() {
        let t = TaskSpec::cartpole(0.1).unwrap();
        let s = [0.1, 0.2, -0.03, 0.4];
        let o = EnvKind::Cartpole.observe(&t, &s);
        let back = EnvKind::Cartpole.unobserve(&t, &o);
        for (a, b) in back.iter().zip(s) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn task_spec_serializes_with_kind_tag() {
        let t = TaskSpec::point(0.5).unwrap();
        let j = serde_json::to_string(&t).unwrap();
        assert_eq!(j, r#"{"kind":"point","omega":0.5}"#);
        assert_eq!(serde_json::from_str::<TaskSpec>(&j).unwrap(), t);
    }
}
