//! Meta-training with a learned pseudo-advantage.
//!
//! The adapted policy for a task is one policy-gradient step taken from the
//! meta-policy, shifted by a learned offset and weighted by a learned
//! pseudo-advantage `A(s, a, s')` instead of rewards:
//!
//! `phi = theta + offset + alpha * sum_i A(s_i, a_i, s'_i) * grad_theta log pi_theta(a_i | s_i)`
//!
//! The outer loop collects fresh rollouts with `phi`, scores them with true
//! advantages and minimizes a PPO surrogate w.r.t. `theta`, `offset` and the
//! pseudo-advantage network jointly, differentiating through the inner step.
//! Every transition seen during training can be staged into an
//! [`OfflineDataset`](dataset::OfflineDataset) for the dynamics model.

pub mod dataset;

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, GraphError, NodeId};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::envs::{collect_rollout, EnvKind, Rollout, Transition};
use crate::nets::{Activation, GaussianPolicy, Mlp, MlpNodes, PolicyNodes};
use crate::optim::Adam;
use crate::rl::{compute_advantages, ppo_surrogate_node, RlError, ValueBaseline};
use crate::seed::derive_rng;

use dataset::DatasetStager;

pub const META_CHECKPOINT_KIND: &str = "meta";

#[derive(Debug, thiserror::Error)]
pub enum NormlError {
    #[error("adaptation data is empty")]
    EmptyData,
    #[error("meta-training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },
    #[error("invalid meta-training config: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Rl(#[from] RlError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormlConfig {
    /// Inner step size.
    pub alpha: f64,
    /// Outer Adam learning rate.
    pub outer_lr: f64,
    pub tasks_per_iteration: usize,
    /// Rollouts per task for the inner step.
    pub train_rollouts: usize,
    /// Rollouts per task for the outer objective.
    pub test_rollouts: usize,
    pub ppo_epochs: usize,
    pub ppo_clip: f64,
    pub gamma: f64,
    pub policy_hidden: Vec<usize>,
    pub advantage_hidden: Vec<usize>,
    /// Initial policy log-std.
    pub init_log_std: f64,
}

impl NormlConfig {
    pub fn point() -> Self {
        NormlConfig {
            alpha: 0.01,
            outer_lr: 3e-4,
            tasks_per_iteration: 10,
            train_rollouts: 25,
            test_rollouts: 25,
            ppo_epochs: 5,
            ppo_clip: 0.2,
            gamma: 0.99,
            policy_hidden: vec![32, 32],
            advantage_hidden: vec![64, 64],
            init_log_std: 0.0,
        }
    }

    pub fn cartpole() -> Self {
        NormlConfig {
            policy_hidden: vec![64, 64],
            ..Self::point()
        }
    }

    pub fn validate(&self) -> Result<(), NormlError> {
        let bad = |m: &str| Err(NormlError::Config(m.to_string()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and non-negative");
        }
        if !(self.outer_lr >= 0.0 && self.outer_lr.is_finite()) {
            return bad("outer_lr must be finite and non-negative");
        }
        if self.tasks_per_iteration == 0 || self.train_rollouts == 0 || self.test_rollouts == 0 {
            return bad("task and rollout counts must be positive");
        }
        if self.ppo_epochs == 0 {
            return bad("ppo_epochs must be positive");
        }
        if !(self.ppo_clip > 0.0 && self.ppo_clip < 1.0) {
            return bad("ppo_clip must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Meta-policy, its offset and the pseudo-advantage network.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaParams {
    pub policy: GaussianPolicy,
    /// Same layout as `policy.arrays()`.
    pub offset: Vec<Array>,
    pub advantage: Mlp,
}

/// Graph handles for [`MetaParams`].
#[derive(Clone, Debug)]
pub struct MetaNodes {
    pub policy: PolicyNodes,
    pub offset: Vec<NodeId>,
    pub advantage: MlpNodes,
}

impl MetaNodes {
    /// In [`MetaParams::arrays`] order.
    pub fn ids(&self) -> Vec<NodeId> {
        let mut v = self.policy.ids();
        v.extend(&self.offset);
        v.extend(self.advantage.ids());
        v
    }
}

impl MetaParams {
    /// Fresh parameters: zero offset and a pseudo-advantage network whose
    /// output layer is zero, so the first inner steps are the identity.
    pub fn new<R: Rng + ?Sized>(env: EnvKind, config: &NormlConfig, rng: &mut R) -> Self {
        let (sd, ad) = (env.state_dim(), env.action_dim());
        let mut policy = GaussianPolicy::new(sd, ad, &config.policy_hidden, rng);
        policy.log_std = Array::full(1, ad, config.init_log_std);
        let offset = policy.arrays().iter().map(|a| Array::zeros(a.rows(), a.cols())).collect();
        let mut sizes = vec![2 * sd + ad];
        sizes.extend(&config.advantage_hidden);
        sizes.push(1);
        let advantage = Mlp::new(&sizes, Activation::Relu, 1.0, rng).with_zero_output();
        MetaParams {
            policy,
            offset,
            advantage,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.policy.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.policy.action_dim()
    }

    /// `theta..., offset..., psi...`
    pub fn arrays(&self) -> Vec<Array> {
        let mut v = self.policy.arrays();
        v.extend(self.offset.iter().cloned());
        v.extend(self.advantage.arrays());
        v
    }

    pub fn with_arrays(&self, arrays: &[Array]) -> Self {
        let np = self.offset.len();
        assert_eq!(arrays.len(), 2 * np + 2 * self.advantage.layers.len(), "parameter count mismatch");
        MetaParams {
            policy: self.policy.with_arrays(&arrays[..np]),
            offset: arrays[np..2 * np].to_vec(),
            advantage: self.advantage.with_arrays(&arrays[2 * np..]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.arrays().iter().map(Array::len).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> Result<MetaNodes, GraphError> {
        let policy = self.policy.bind(g)?;
        let offset = self.offset.iter().map(|a| g.leaf(a.clone())).collect::<Result<_, _>>()?;
        let advantage = self.advantage.bind(g)?;
        Ok(MetaNodes {
            policy,
            offset,
            advantage,
        })
    }

    /// `A(s, a, s')` for one transition.
    pub fn pseudo_advantage(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> f64 {
        let x: Vec<f64> = s.iter().chain(a).chain(s_next).copied().collect();
        self.advantage
            .forward(&Array::row(&x))
            .expect("pseudo-advantage input width")
            .item()
    }

    /// Pseudo-advantages of a batch, in order.
    pub fn pseudo_advantages(&self, transitions: &[Transition]) -> Vec<f64> {
        if transitions.is_empty() {
            return Vec::new();
        }
        self.advantage
            .forward(&advantage_inputs(transitions))
            .expect("pseudo-advantage input width")
            .into_data()
    }

    pub fn to_checkpoint(&self, env: EnvKind, iteration: usize) -> Checkpoint {
        let meta = serde_json::json!({
            "env": env,
            "iteration": iteration,
            "policy_sizes": self.policy.mean.sizes(),
            "advantage_sizes": self.advantage.sizes(),
        });
        let mut c = Checkpoint::new(META_CHECKPOINT_KIND, meta);
        c.insert_list("policy", &self.policy.arrays());
        c.insert_list("offset", &self.offset);
        c.insert_list("advantage", &self.advantage.arrays());
        c
    }

    /// Parameters and environment stored by [`MetaParams::to_checkpoint`].
    pub fn from_checkpoint(c: &Checkpoint) -> Result<(EnvKind, Self), CheckpointError> {
        c.expect_kind(META_CHECKPOINT_KIND)?;
        let field = |name: &str| {
            c.metadata
                .get(name)
                .cloned()
                .ok_or_else(|| CheckpointError::Format(format!("metadata lacks {name}")))
        };
        let env: EnvKind = serde_json::from_value(field("env")?)?;
        let policy_sizes: Vec<usize> = serde_json::from_value(field("policy_sizes")?)?;
        let adv_sizes: Vec<usize> = serde_json::from_value(field("advantage_sizes")?)?;
        if policy_sizes.len() < 2 || adv_sizes.len() < 2 {
            return Err(CheckpointError::Format("network needs at least two sizes".into()));
        }
        let mut rng = derive_rng(0, &[]);
        let n_policy = 2 * (policy_sizes.len() - 1) + 1;
        let template = GaussianPolicy {
            mean: Mlp::new(&policy_sizes, Activation::Tanh, 1.0, &mut rng),
            log_std: Array::zeros(1, *policy_sizes.last().expect("sizes")),
        };
        let advantage = Mlp::new(&adv_sizes, Activation::Relu, 1.0, &mut rng);
        let policy_arrays = c.get_list("policy", n_policy)?;
        let check = |have: &[Array], want: &[Array]| {
            if have.iter().zip(want).any(|(a, b)| a.shape() != b.shape()) {
                return Err(CheckpointError::Format("array shapes disagree with metadata".into()));
            }
            Ok(())
        };
        check(&policy_arrays, &template.arrays())?;
        let offset = c.get_list("offset", n_policy)?;
        check(&offset, &template.arrays())?;
        let adv_arrays = c.get_list("advantage", 2 * (adv_sizes.len() - 1))?;
        check(&adv_arrays, &advantage.arrays())?;
        Ok((
            env,
            MetaParams {
                policy: template.with_arrays(&policy_arrays),
                offset,
                advantage: advantage.with_arrays(&adv_arrays),
            },
        ))
    }

    /// `theta + offset`: the adapted policy when the inner step is zero.
    pub fn offset_policy(&self) -> GaussianPolicy {
        let arrays: Vec<Array> = self
            .policy
            .arrays()
            .iter()
            .zip(&self.offset)
            .map(|(t, o)| t.zip_map(o, |a, b| a + b))
            .collect();
        self.policy.with_arrays(&arrays)
    }
}

/// Rows of `[s, a, s']`.
pub fn advantage_inputs(transitions: &[Transition]) -> Array {
    let rows: Vec<Vec<f64>> = transitions
        .iter()
        .map(|t| t.s.iter().chain(&t.a).chain(&t.s_next).copied().collect())
        .collect();
    Array::from_rows(&rows)
}

fn states_actions(transitions: &[Transition]) -> (Array, Array) {
    crate::rl::stack_states_actions(transitions)
}

/// Records the inner step on `g` and returns the adapted policy's nodes.
pub fn inner_adapt_nodes(
    g: &mut Graph,
    nodes: &MetaNodes,
    data: &[Transition],
    alpha: f64,
) -> Result<PolicyNodes, NormlError> {
    if data.is_empty() {
        return Err(NormlError::EmptyData);
    }
    let (s, a) = states_actions(data);
    let s = g.constant(s)?;
    let a = g.constant(a)?;
    let x = g.constant(advantage_inputs(data))?;
    let adv = nodes.advantage.forward(g, x)?;
    let logp = nodes.policy.log_prob(g, s, a)?;
    let weighted = g.mul(adv, logp)?;
    let objective = g.sum(weighted)?;
    let theta = nodes.policy.ids();
    let grads = g.grad(objective, &theta)?;
    let mut phi = Vec::with_capacity(theta.len());
    for ((&t, &o), &d) in theta.iter().zip(&nodes.offset).zip(&grads) {
        let base = g.add(t, o)?;
        let step = g.scale(d, alpha)?;
        phi.push(g.add(base, step)?);
    }
    Ok(PolicyNodes::from_ids(&phi, nodes.policy.mean.activation))
}

/// The adapted policy for reward-free `data`. Rewards are never read.
pub fn inner_adapt(meta: &MetaParams, data: &[Transition], alpha: f64) -> Result<GaussianPolicy, NormlError> {
    let mut g = Graph::new();
    let nodes = meta.bind(&mut g)?;
    let phi = inner_adapt_nodes(&mut g, &nodes, data, alpha)?;
    let arrays: Vec<Array> = phi.ids().iter().map(|&id| g.value(id).clone()).collect();
    Ok(meta.policy.with_arrays(&arrays))
}

/// PPO surrogate of the adapted policy on `test` data, recorded on `g`
/// on top of the inner step over `train` data.
#[allow(clippy::too_many_arguments)]
pub fn task_outer_loss(
    g: &mut Graph,
    nodes: &MetaNodes,
    train: &[Transition],
    test: &[Transition],
    old_logp: &[f64],
    advantages: &[f64],
    alpha: f64,
    clip: f64,
) -> Result<NodeId, NormlError> {
    if test.is_empty() {
        return Err(NormlError::EmptyData);
    }
    let phi = inner_adapt_nodes(g, nodes, train, alpha)?;
    let (s, a) = states_actions(test);
    let s = g.constant(s)?;
    let a = g.constant(a)?;
    let logp = phi.log_prob(g, s, a)?;
    Ok(ppo_surrogate_node(g, logp, old_logp, advantages, clip)?)
}

/// Everything collected for one task in one iteration.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub task_index: Option<usize>,
    pub task_parameter: f64,
    pub train: Vec<Rollout>,
    pub test: Vec<Rollout>,
    /// `train` flattened with rewards removed.
    pub train_transitions: Vec<Transition>,
    pub test_transitions: Vec<Transition>,
    /// Log-probabilities of the test actions under the collecting policy.
    pub old_logp: Vec<f64>,
    pub test_advantages: Vec<f64>,
}

impl TaskData {
    pub fn pre_return(&self) -> f64 {
        mean_return(&self.train)
    }

    pub fn post_return(&self) -> f64 {
        mean_return(&self.test)
    }
}

fn mean_return(rollouts: &[Rollout]) -> f64 {
    let total: f64 = rollouts.iter().map(|r| r.total_reward().unwrap_or(0.0)).sum();
    total / rollouts.len().max(1) as f64
}

/// Collects one task's inner and outer data.
pub fn collect_task_data<R: Rng + ?Sized>(
    meta: &MetaParams,
    env: EnvKind,
    config: &NormlConfig,
    rng: &mut R,
) -> Result<TaskData, NormlError> {
    let (task_index, task) = env.sample_task(rng);
    let horizon = env.horizon();
    let train: Vec<Rollout> = (0..config.train_rollouts)
        .map(|_| collect_rollout(env, &task, &meta.policy, horizon, rng, true))
        .collect();
    let train_transitions: Vec<Transition> = train
        .iter()
        .flat_map(|r| r.transitions.iter().map(Transition::reward_free))
        .collect();
    let phi = inner_adapt(meta, &train_transitions, config.alpha)?;
    let test: Vec<Rollout> = (0..config.test_rollouts)
        .map(|_| collect_rollout(env, &task, &phi, horizon, rng, true))
        .collect();
    let test_transitions: Vec<Transition> = test.iter().flat_map(|r| r.transitions.iter().cloned()).collect();
    let baseline = ValueBaseline::fit(&test, config.gamma, horizon)?;
    let test_advantages = compute_advantages(&test, &baseline, config.gamma)?;
    let old_logp = test_transitions.iter().map(|t| phi.log_prob(&t.s, &t.a)).collect();
    Ok(TaskData {
        task_index,
        task_parameter: task.parameter(),
        train,
        test,
        train_transitions,
        test_transitions,
        old_logp,
        test_advantages,
    })
}

/// Loss and joint gradient (in [`MetaParams::arrays`] order) for one task.
pub fn task_gradient(meta: &MetaParams, data: &TaskData, config: &NormlConfig) -> Result<(f64, Vec<Array>), NormlError> {
    let mut g = Graph::new();
    let nodes = meta.bind(&mut g)?;
    let loss = task_outer_loss(
        &mut g,
        &nodes,
        &data.train_transitions,
        &data.test_transitions,
        &data.old_logp,
        &data.test_advantages,
        config.alpha,
        config.ppo_clip,
    )?;
    let grads = g.grad_values(loss, &nodes.ids())?;
    Ok((g.value(loss).item(), grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    /// Mean episode return of the meta-policy before adaptation.
    pub pre_return: f64,
    /// Mean episode return of the adapted policies.
    pub post_return: f64,
    /// Outer loss in the first PPO epoch.
    pub outer_loss: f64,
    pub grad_norm: f64,
    pub mean_abs_pseudo_advantage: f64,
    pub mean_log_std: f64,
    pub transitions: usize,
    pub seconds: f64,
}

/// Owns the meta-parameters, the outer optimizer and dataset staging.
const LR_FLOOR_FRACTION: f64 = 0.05;

pub struct MetaTrainer {
    pub env: EnvKind,
    pub config: NormlConfig,
    pub meta: MetaParams,
    pub adam: Adam,
    pub seed: u64,
    /// Number of completed iterations.
    pub iteration: usize,
    pub stager: Option<DatasetStager>,
    /// When set, the outer learning rate decays linearly to a small floor
    /// over this many iterations.
    pub lr_decay_iterations: Option<usize>,
}

impl MetaTrainer {
    pub fn new(env: EnvKind, config: NormlConfig, seed: u64) -> Result<Self, NormlError> {
        config.validate()?;
        let meta = MetaParams::new(env, &config, &mut derive_rng(seed, &[0]));
        let adam = Adam::new(config.outer_lr, &meta.arrays());
        Ok(MetaTrainer {
            env,
            config,
            meta,
            adam,
            seed,
            iteration: 0,
            stager: None,
            lr_decay_iterations: None,
        })
    }

    /// Outer learning rate for the next iteration.
    pub fn current_lr(&self) -> f64 {
        match self.lr_decay_iterations {
            Some(total) if total > 0 => {
                let frac = 1.0 - self.iteration as f64 / total as f64;
                self.config.outer_lr * frac.max(LR_FLOOR_FRACTION)
            }
            _ => self.config.outer_lr,
        }
    }

    /// One outer iteration. On divergence the parameters are left at their
    /// last finite values and an error is returned.
    pub fn step(&mut self) -> Result<IterationMetrics, NormlError> {
        let start = Instant::now();
        let it = self.iteration;
        let meta = &self.meta;
        self.adam.lr = self.current_lr();
        let (env, config, seed) = (self.env, &self.config, self.seed);
        let tasks: Vec<TaskData> = (0..config.tasks_per_iteration)
            .into_par_iter()
            .map(|k| collect_task_data(meta, env, config, &mut derive_rng(seed, &[1, it as u64, k as u64])))
            .collect::<Result<_, _>>()
            .map_err(|e| diverged(it, e))?;

        let mut params = self.meta.arrays();
        let mut first_loss = f64::NAN;
        let mut first_norm = f64::NAN;
        let mut candidate = self.meta.clone();
        for epoch in 0..config.ppo_epochs {
            let per_task: Vec<(f64, Vec<Array>)> = tasks
                .par_iter()
                .map(|d| task_gradient(&candidate, d, config))
                .collect::<Result<_, _>>()
                .map_err(|e| diverged(it, e))?;
            let n = per_task.len() as f64;
            let loss = per_task.iter().map(|(l, _)| l).sum::<f64>() / n;
            let mut grads: Vec<Array> = params.iter().map(|p| Array::zeros(p.rows(), p.cols())).collect();
            for (_, g) in &per_task {
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += b / n;
                    }
                }
            }
            let norm = grads.iter().map(|g| g.l2_norm().powi(2)).sum::<f64>().sqrt();
            if !loss.is_finite() || !norm.is_finite() {
                return Err(NormlError::Diverged {
                    iteration: it,
                    detail: format!("epoch {epoch}: loss {loss}, gradient norm {norm}"),
                });
            }
            if epoch == 0 {
                first_loss = loss;
                first_norm = norm;
            }
            self.adam.step(&mut params, &grads);
            if params.iter().any(|p| !p.is_finite()) {
                return Err(NormlError::Diverged {
                    iteration: it,
                    detail: format!("epoch {epoch}: non-finite parameters after update"),
                });
            }
            candidate = self.meta.with_arrays(&params);
        }

        let mut abs_adv = 0.0;
        let mut count = 0usize;
        for d in &tasks {
            for a in self.meta.pseudo_advantages(&d.train_transitions) {
                abs_adv += a.abs();
                count += 1;
            }
        }
        if let Some(stager) = self.stager.as_mut() {
            for (k, d) in tasks.iter().enumerate() {
                stager.stage(it, k, d, config.gamma, env.horizon())?;
            }
        }
        let metrics = IterationMetrics {
            iteration: it,
            pre_return: tasks.iter().map(TaskData::pre_return).sum::<f64>() / tasks.len() as f64,
            post_return: tasks.iter().map(TaskData::post_return).sum::<f64>() / tasks.len() as f64,
            outer_loss: first_loss,
            grad_norm: first_norm,
            mean_abs_pseudo_advantage: abs_adv / count.max(1) as f64,
            mean_log_std: self.meta.policy.log_std.sum() / self.meta.action_dim() as f64,
            transitions: tasks
                .iter()
                .map(|d| d.train_transitions.len() + d.test_transitions.len())
                .sum(),
            seconds: start.elapsed().as_secs_f64(),
        };
        self.meta = candidate;
        self.iteration += 1;
        Ok(metrics)
    }
}

fn diverged(iteration: usize, e: NormlError) -> NormlError {
    match e {
        NormlError::Graph(GraphError::NonFinite { node, op }) => NormlError::Diverged {
            iteration,
            detail: format!("non-finite value at node {node} ({op})"),
        },
        other => other,
    }
}
