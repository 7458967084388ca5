//! Reward-free adaptation at test time.
//!
//! A small amount of real experience from the test task is encoded into a
//! latent task representation. The dynamics model then stands in for the
//! environment: starting from the real initial state, the meta-policy acts
//! and the model predicts each next state, producing synthetic rollouts.
//! One pseudo-advantage policy-gradient step on real plus synthetic data
//! gives the adapted policy. No code path here reads a reward.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cnp::{CnpError, CnpModel, CnpVariant, PredictiveDist};
use crate::envs::{collect_rollout, run_deterministic_episode, EnvKind, Origin, Rollout, TaskSpec, Transition};
use crate::nets::GaussianPolicy;
use crate::norml::{inner_adapt, MetaParams, NormlError};

#[derive(Debug, thiserror::Error)]
pub enum MetaTestError {
    #[error("no real transitions to adapt from")]
    NoRealData,
    #[error("generated rollout diverged at step {step}: predicted state {state:?}")]
    NonFinitePrediction { step: usize, state: Vec<f64> },
    #[error(transparent)]
    Cnp(#[from] CnpError),
    #[error(transparent)]
    Norml(#[from] NormlError),
}

/// Real experience allowed on the test task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RealBudget {
    /// Whole episodes.
    Rollouts(usize),
    /// The first `n` transitions of a single episode.
    Transitions(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptationBudget {
    pub real: RealBudget,
    pub generated_rollouts: usize,
}

impl AdaptationBudget {
    /// One real episode plus 24 synthetic ones.
    pub fn standard() -> Self {
        AdaptationBudget {
            real: RealBudget::Rollouts(1),
            generated_rollouts: 24,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationOptions {
    /// Sample next states from the predictive Gaussian instead of using its mean.
    pub sample_next_state: bool,
}

/// Diagnostics of one adaptation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub real_rollout_count: usize,
    pub real_transition_count: usize,
    pub generated_rollout_count: usize,
    pub generated_transition_count: usize,
    pub latent_norm: Option<f64>,
    pub mean_abs_pseudo_advantage_real: f64,
    pub mean_abs_pseudo_advantage_generated: Option<f64>,
    pub mean_predicted_sigma: Option<f64>,
    /// Mean model-predicted advantage over generated steps (advantage variant).
    pub mean_predicted_advantage: Option<f64>,
}

/// Collects the real test-task data with the meta-policy, without rewards.
pub fn collect_real<R: Rng + ?Sized>(
    env: EnvKind,
    task: &TaskSpec,
    policy: &GaussianPolicy,
    budget: RealBudget,
    rng: &mut R,
) -> Vec<Rollout> {
    match budget {
        RealBudget::Rollouts(n) => (0..n)
            .map(|_| collect_rollout(env, task, policy, env.horizon(), rng, false))
            .collect(),
        RealBudget::Transitions(n) => vec![collect_rollout(env, task, policy, n.min(env.horizon()), rng, false)],
    }
}

/// Context transitions as the model expects them: the advantage variant's
/// extra channel is filled with pseudo-advantages, since true advantages
/// need rewards.
fn context_for(model: &CnpModel, meta: &MetaParams, real: &[Transition]) -> Vec<Transition> {
    let mut ctx: Vec<Transition> = real.iter().map(Transition::reward_free).collect();
    if model.variant == CnpVariant::Adv {
        for (t, a) in ctx.iter_mut().zip(meta.pseudo_advantages(real)) {
            t.advantage = Some(a);
        }
    }
    ctx
}

/// Latent representation of the task behind `real`.
pub fn infer_latent(model: &CnpModel, real: &[Transition]) -> Result<Vec<f64>, MetaTestError> {
    if real.is_empty() {
        return Err(MetaTestError::NoRealData);
    }
    Ok(model.encode_context(real)?)
}

/// Rolls the policy out inside the model from `initial_obs`. Stops at
/// `horizon` or when the predicted observation is terminal. Also returns the
/// model's per-step advantage predictions (advantage variant only).
#[allow(clippy::too_many_arguments)]
pub fn generate_rollout<R: Rng + ?Sized>(
    env: EnvKind,
    model: &CnpModel,
    latent: &[f64],
    policy: &GaussianPolicy,
    initial_obs: &[f64],
    horizon: usize,
    options: GenerationOptions,
    rng: &mut R,
) -> Result<(Rollout, Vec<Option<f64>>), MetaTestError> {
    generate_with(env, policy, initial_obs, horizon, options, rng, |s, a| {
        Ok(model.decode_query(latent, s, a)?)
    })
}

/// [`generate_rollout`] with an arbitrary one-step predictor.
pub fn generate_with<R, F>(
    env: EnvKind,
    policy: &GaussianPolicy,
    initial_obs: &[f64],
    horizon: usize,
    options: GenerationOptions,
    rng: &mut R,
    mut predict: F,
) -> Result<(Rollout, Vec<Option<f64>>), MetaTestError>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64], &[f64]) -> Result<PredictiveDist, MetaTestError>,
{
    let horizon = horizon.min(env.horizon());
    let mut s = initial_obs.to_vec();
    let mut transitions = Vec::with_capacity(horizon);
    let mut sigmas = Vec::with_capacity(horizon);
    let mut advantages = Vec::with_capacity(horizon);
    for step in 0..horizon {
        let a = policy.sample(&s, rng);
        let p = predict(&s, &a)?;
        let next: Vec<f64> = if options.sample_next_state {
            p.mu
                .iter()
                .zip(&p.sigma)
                .map(|(m, sd)| m + sd * rng.sample::<f64, _>(StandardNormal))
                .collect()
        } else {
            p.mu
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(MetaTestError::NonFinitePrediction { step, state: next });
        }
        transitions.push(Transition::new(s, a, next.clone()));
        sigmas.push(p.sigma);
        advantages.push(p.adv_mu);
        if env.is_terminal_observation(&next) {
            break;
        }
        s = next;
    }
    Ok((
        Rollout {
            transitions,
            origin: Origin::Generated,
            task_id: None,
            sigmas,
        },
        advantages,
    ))
}

fn mean_abs(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64)
}

/// Adapts from already collected real rollouts, adding `generated` model
/// rollouts when a model is given. With no model or zero generated rollouts
/// this is exactly the inner step on the real data.
#[allow(clippy::too_many_arguments)]
pub fn adapt_with_real<R: Rng + ?Sized>(
    env: EnvKind,
    meta: &MetaParams,
    model: Option<&CnpModel>,
    real: &[Rollout],
    generated: usize,
    alpha: f64,
    options: GenerationOptions,
    rng: &mut R,
) -> Result<(GaussianPolicy, AdaptationReport), MetaTestError> {
    let real_ts: Vec<Transition> = real
        .iter()
        .flat_map(|r| r.transitions.iter().map(Transition::reward_free))
        .collect();
    if real_ts.is_empty() {
        return Err(MetaTestError::NoRealData);
    }
    let mut union = real_ts.clone();
    let mut latent_norm = None;
    let mut gen_ts = Vec::new();
    let mut sigma_sum = 0.0;
    let mut sigma_n = 0usize;
    let mut pred_adv = Vec::new();
    if let Some(model) = model.filter(|_| generated > 0) {
        let latent = infer_latent(model, &context_for(model, meta, &real_ts))?;
        latent_norm = Some(latent.iter().map(|v| v * v).sum::<f64>().sqrt());
        let start = real[0]
            .initial_observation()
            .or_else(|| real_ts.first().map(|t| t.s.as_slice()))
            .expect("non-empty real data")
            .to_vec();
        for _ in 0..generated {
            let (r, adv) = generate_rollout(env, model, &latent, &meta.policy, &start, env.horizon(), options, rng)?;
            for s in &r.sigmas {
                sigma_sum += s.iter().sum::<f64>();
                sigma_n += s.len();
            }
            pred_adv.extend(adv.into_iter().flatten());
            gen_ts.extend(r.transitions);
        }
        union.extend(gen_ts.iter().cloned());
    }
    let phi = inner_adapt(meta, &union, alpha)?;
    let report = AdaptationReport {
        real_rollout_count: real.len(),
        real_transition_count: real_ts.len(),
        generated_rollout_count: if gen_ts.is_empty() { 0 } else { generated },
        generated_transition_count: gen_ts.len(),
        latent_norm,
        mean_abs_pseudo_advantage_real: mean_abs(&meta.pseudo_advantages(&real_ts)).unwrap_or(0.0),
        mean_abs_pseudo_advantage_generated: mean_abs(&meta.pseudo_advantages(&gen_ts)),
        mean_predicted_sigma: (sigma_n > 0).then(|| sigma_sum / sigma_n as f64),
        mean_predicted_advantage: (!pred_adv.is_empty()).then(|| pred_adv.iter().sum::<f64>() / pred_adv.len() as f64),
    };
    Ok((phi, report))
}

/// Collects the real budget on `task` and adapts without rewards.
#[allow(clippy::too_many_arguments)]
pub fn adapt_unsupervised<R: Rng + ?Sized>(
    env: EnvKind,
    meta: &MetaParams,
    model: &CnpModel,
    budget: AdaptationBudget,
    task: &TaskSpec,
    alpha: f64,
    options: GenerationOptions,
    rng: &mut R,
) -> Result<(GaussianPolicy, AdaptationReport), MetaTestError> {
    let real = collect_real(env, task, &meta.policy, budget.real, rng);
    adapt_with_real(env, meta, Some(model), &real, budget.generated_rollouts, alpha, options, rng)
}

/// Returns and visited observations of deterministic evaluation episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub paths: Vec<Vec<Vec<f64>>>,
}

/// Runs `n_eval` mean-action episodes on the true environment. Evaluation is
/// the only place rewards are used at test time.
pub fn evaluate_post_update<R: Rng + ?Sized>(
    env: EnvKind,
    policy: &GaussianPolicy,
    task: &TaskSpec,
    n_eval: usize,
    rng: &mut R,
) -> Evaluation {
    let mut returns = Vec::with_capacity(n_eval);
    let mut paths = Vec::with_capacity(n_eval);
    for _ in 0..n_eval {
        let (ret, path) = run_deterministic_episode(env, task, policy, rng);
        returns.push(ret);
        paths.push(path);
    }
    let mean = returns.iter().sum::<f64>() / returns.len().max(1) as f64;
    Evaluation { returns, mean, paths }
}
