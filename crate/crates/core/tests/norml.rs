use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use umcnp::autodiff::{Array, Graph};
use umcnp::envs::{collect_rollout, EnvKind, TaskSpec, Transition};
use umcnp::nets::{Activation, GaussianPolicy, Linear, Mlp};
use umcnp::norml::dataset::{finalize_offline_dataset, retained_from, DatasetStager, OfflineDataset, RolloutSource};
use umcnp::norml::{
    collect_task_data, inner_adapt, task_gradient, task_outer_loss, MetaParams, MetaTrainer, NormlConfig,
};

fn small_config() -> NormlConfig {
    NormlConfig {
        tasks_per_iteration: 2,
        train_rollouts: 2,
        test_rollouts: 2,
        ppo_epochs: 2,
        policy_hidden: vec![8],
        advantage_hidden: vec![8],
        ..NormlConfig::point()
    }
}

fn perturb(a: &Array, scale: f64, rng: &mut ChaCha8Rng) -> Array {
    let mut out = a.clone();
    for v in out.data_mut() {
        *v += scale * rng.random_range(-1.0..1.0);
    }
    out
}

/// Point-env meta-parameters with random offset and non-zero pseudo-advantage.
fn random_meta(seed: u64) -> MetaParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let meta = MetaParams::new(EnvKind::Point, &small_config(), &mut rng);
    let arrays: Vec<Array> = meta.arrays().iter().map(|a| perturb(a, 0.3, &mut rng)).collect();
    meta.with_arrays(&arrays)
}

fn point_transitions(meta: &MetaParams, seed: u64) -> Vec<Transition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = TaskSpec::point(1.3).unwrap();
    collect_rollout(EnvKind::Point, &task, &meta.policy, 10, &mut rng, false).transitions
}

fn assert_close(a: &[Array], b: &[Array], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.shape(), y.shape());
        for (u, v) in x.data().iter().zip(y.data()) {
            assert!((u - v).abs() <= tol * (1.0 + u.abs().max(v.abs())), "{u} vs {v}");
        }
    }
}

#[test]
fn zero_step_size_gives_offset_policy() {
    let meta = random_meta(1);
    let data = point_transitions(&meta, 2);
    let phi = inner_adapt(&meta, &data, 0.0).unwrap();
    assert_eq!(phi, meta.offset_policy());
}

#[test]
fn zero_pseudo_advantage_gives_offset_policy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let meta = MetaParams::new(EnvKind::Point, &small_config(), &mut rng);
    let offset: Vec<Array> = meta.offset.iter().map(|a| perturb(a, 0.2, &mut rng)).collect();
    let meta = MetaParams { offset, ..meta };
    let data = point_transitions(&meta, 4);
    assert!(meta.pseudo_advantages(&data).iter().all(|&a| a == 0.0));
    let phi = inner_adapt(&meta, &data, 0.5).unwrap();
    assert_eq!(phi, meta.offset_policy());
}

/// One-dimensional linear policy and linear pseudo-advantage, where the
/// inner step can be written out by hand.
fn scalar_meta(w: f64, b: f64, log_std: f64, off: [f64; 3], psi: [f64; 4]) -> MetaParams {
    MetaParams {
        policy: GaussianPolicy {
            mean: Mlp {
                layers: vec![Linear {
                    weight: Array::matrix(1, 1, vec![w]),
                    bias: Array::matrix(1, 1, vec![b]),
                }],
                activation: Activation::Tanh,
            },
            log_std: Array::matrix(1, 1, vec![log_std]),
        },
        offset: off.iter().map(|&v| Array::matrix(1, 1, vec![v])).collect(),
        advantage: Mlp {
            layers: vec![Linear {
                weight: Array::matrix(3, 1, psi[..3].to_vec()),
                bias: Array::matrix(1, 1, vec![psi[3]]),
            }],
            activation: Activation::Relu,
        },
    }
}

#[test]
fn inner_step_matches_hand_computation() {
    let (w, b, ls) = (0.7, -0.2, 0.3);
    let off = [0.1, -0.05, 0.02];
    let psi = [0.5, -1.0, 0.25, 0.1];
    let alpha = 0.05;
    let meta = scalar_meta(w, b, ls, off, psi);
    let data = vec![
        Transition::new(vec![0.4], vec![0.9], vec![0.6]),
        Transition::new(vec![-1.1], vec![-0.3], vec![-0.8]),
    ];
    let var = (2.0 * ls).exp();
    let (mut gw, mut gb, mut gls) = (0.0, 0.0, 0.0);
    for t in &data {
        let (s, a, sn) = (t.s[0], t.a[0], t.s_next[0]);
        let adv = psi[0] * s + psi[1] * a + psi[2] * sn + psi[3];
        let r = a - (w * s + b);
        gw += adv * r / var * s;
        gb += adv * r / var;
        gls += adv * (r * r / var - 1.0);
    }
    let expected = [w + off[0] + alpha * gw, b + off[1] + alpha * gb, ls + off[2] + alpha * gls];
    let phi = inner_adapt(&meta, &data, alpha).unwrap();
    let got = [
        phi.mean.layers[0].weight.item(),
        phi.mean.layers[0].bias.item(),
        phi.log_std.item(),
    ];
    for (g, e) in got.iter().zip(expected) {
        assert!((g - e).abs() < 1e-12, "{g} vs {e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn inner_step_equivariant_to_advantage_scaling(seed in 0u64..1000, c in 0.1f64..10.0) {
        let meta = random_meta(seed);
        let data = point_transitions(&meta, seed + 7);
        let alpha = 0.01;
        let mut scaled = meta.clone();
        let last = scaled.advantage.layers.last_mut().unwrap();
        last.weight = last.weight.map(|v| v * c);
        last.bias = last.bias.map(|v| v * c);
        let a = inner_adapt(&meta, &data, alpha).unwrap();
        let b = inner_adapt(&scaled, &data, alpha / c).unwrap();
        assert_close(&a.arrays(), &b.arrays(), 1e-12);
    }
}

fn toy_task(meta: &MetaParams, rng: &mut ChaCha8Rng) -> (Vec<Transition>, Vec<Transition>, Vec<f64>, Vec<f64>) {
    let mk = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Transition> {
        (0..n)
            .map(|_| {
                let s = rng.random_range(-1.0..1.0);
                let a = rng.random_range(-1.5..1.5);
                Transition::new(vec![s], vec![a], vec![s + 0.1 * a])
            })
            .collect()
    };
    let train = mk(rng, 6);
    let test = mk(rng, 8);
    let alpha = 0.1;
    let phi = inner_adapt(meta, &train, alpha).unwrap();
    // Old log-probabilities near the current ones keep every ratio inside
    // the clip band, where the surrogate is smooth.
    let old: Vec<f64> = test
        .iter()
        .map(|t| phi.log_prob(&t.s, &t.a) + rng.random_range(-0.05..0.05))
        .collect();
    let adv: Vec<f64> = (0..test.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    (train, test, old, adv)
}

fn toy_loss(meta: &MetaParams, task: &(Vec<Transition>, Vec<Transition>, Vec<f64>, Vec<f64>)) -> (f64, Vec<Array>) {
    let mut g = Graph::new();
    let nodes = meta.bind(&mut g).unwrap();
    let loss = task_outer_loss(&mut g, &nodes, &task.0, &task.1, &task.2, &task.3, 0.1, 0.2).unwrap();
    let grads = g.grad_values(loss, &nodes.ids()).unwrap();
    (g.value(loss).item(), grads)
}

#[test]
fn joint_meta_gradient_matches_finite_differences() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = || rng.random_range(-0.5..0.5);
        let meta = scalar_meta(p(), p(), p(), [p(), p(), p()], [p(), p(), p(), 0.6]);
        assert_eq!(meta.param_count(), 10);
        let task = toy_task(&meta, &mut ChaCha8Rng::seed_from_u64(seed + 100));
        let (_, analytic) = toy_loss(&meta, &task);
        let params = meta.arrays();
        let eps = 1e-5;
        let mut numeric = Vec::new();
        let mut flat_analytic = Vec::new();
        for (i, arr) in params.iter().enumerate() {
            for j in 0..arr.len() {
                let mut plus = params.clone();
                plus[i].data_mut()[j] += eps;
                let mut minus = params.clone();
                minus[i].data_mut()[j] -= eps;
                let lp = toy_loss(&meta.with_arrays(&plus), &task).0;
                let lm = toy_loss(&meta.with_arrays(&minus), &task).0;
                numeric.push((lp - lm) / (2.0 * eps));
                flat_analytic.push(analytic[i].data()[j]);
            }
        }
        let diff: f64 = numeric.iter().zip(&flat_analytic).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = numeric.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
        assert!(diff / scale < 1e-3, "seed {seed}: relative error {}", diff / scale);
        for (n, a) in numeric.iter().zip(&flat_analytic) {
            assert!((n - a).abs() <= 1e-3 * n.abs().max(a.abs()).max(1e-3), "{n} vs {a}");
        }
    }
}

#[test]
fn offset_and_policy_gradients_coincide_without_inner_step() {
    let meta = random_meta(11);
    let config = NormlConfig {
        alpha: 0.0,
        ..small_config()
    };
    let data = collect_task_data(&meta, EnvKind::Point, &config, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    let (_, grads) = task_gradient(&meta, &data, &config).unwrap();
    let np = meta.offset.len();
    assert_eq!(&grads[..np], &grads[np..2 * np]);
    assert!(grads[2 * np..].iter().all(|g| g.max_abs() == 0.0));
    assert!(grads[..np].iter().any(|g| g.max_abs() > 0.0));
}

#[test]
fn zero_outer_learning_rate_leaves_parameters_unchanged() {
    let config = NormlConfig {
        outer_lr: 0.0,
        ..small_config()
    };
    let mut trainer = MetaTrainer::new(EnvKind::Point, config, 5).unwrap();
    let before = trainer.meta.clone();
    trainer.step().unwrap();
    trainer.step().unwrap();
    assert_eq!(trainer.meta, before);
    assert_eq!(trainer.iteration, 2);
}

#[test]
fn training_changes_all_parameter_groups_and_reports_metrics() {
    let mut trainer = MetaTrainer::new(EnvKind::Point, small_config(), 6).unwrap();
    let before = trainer.meta.clone();
    let m = trainer.step().unwrap();
    let m2 = trainer.step().unwrap();
    assert_eq!((m.iteration, m2.iteration), (0, 1));
    for v in [m.pre_return, m.post_return, m.outer_loss, m.grad_norm, m.mean_log_std, m.seconds] {
        assert!(v.is_finite());
    }
    assert!(m.grad_norm > 0.0);
    assert_eq!(m.transitions, 2 * (2 + 2) * EnvKind::Point.horizon());
    let json = serde_json::to_value(&m).unwrap();
    for key in ["iteration", "pre_return", "post_return", "outer_loss", "grad_norm", "mean_abs_pseudo_advantage"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    assert_ne!(trainer.meta.policy, before.policy);
    assert_ne!(trainer.meta.offset, before.offset);
    assert_ne!(trainer.meta.advantage, before.advantage);
}

#[test]
fn training_is_reproducible_for_a_seed() {
    let run = || {
        let mut t = MetaTrainer::new(EnvKind::Point, small_config(), 9).unwrap();
        let m = t.step().unwrap();
        (t.meta, m.post_return)
    };
    assert_eq!(run(), run());
}

#[test]
fn pseudo_advantage_starts_at_zero_and_batches_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let fresh = MetaParams::new(EnvKind::Cartpole, &NormlConfig::cartpole(), &mut rng);
    assert_eq!(fresh.pseudo_advantage(&[0.1, 0.2, 0.3, 0.4], &[0.5], &[0.2, 0.1, 0.0, -0.1]), 0.0);
    let meta = random_meta(9);
    let data = point_transitions(&meta, 10);
    let batch = meta.pseudo_advantages(&data);
    for (t, a) in data.iter().zip(&batch) {
        assert!((meta.pseudo_advantage(&t.s, &t.a, &t.s_next) - a).abs() < 1e-12);
    }
}

#[test]
fn learning_rate_decays_linearly_to_a_floor() {
    let mut t = MetaTrainer::new(EnvKind::Point, small_config(), 0).unwrap();
    let lr = t.config.outer_lr;
    assert_eq!(t.current_lr(), lr);
    t.lr_decay_iterations = Some(100);
    t.iteration = 50;
    assert!((t.current_lr() - 0.5 * lr).abs() < 1e-15);
    t.iteration = 100;
    assert!(t.current_lr() > 0.0 && t.current_lr() < 0.1 * lr);
}

#[test]
fn retained_window_counts_iterations() {
    assert_eq!(retained_from(1000, 0.1), 900);
    assert_eq!(retained_from(1000, 1.0), 0);
    assert_eq!(retained_from(10, 0.01), 9);
    assert_eq!(retained_from(3, 0.5), 1);
}

fn staged_run(total: usize, fraction: f64) -> DatasetStager {
    let mut trainer = MetaTrainer::new(EnvKind::Point, small_config(), 21).unwrap();
    trainer.stager = Some(DatasetStager::windowed(EnvKind::Point, total, fraction));
    for _ in 0..total {
        trainer.step().unwrap();
    }
    trainer.stager.unwrap()
}

#[test]
fn offline_dataset_window_and_contents() {
    let stager = staged_run(4, 1.0);
    assert_eq!(stager.batches.len(), 4 * 2);
    let full = finalize_offline_dataset(EnvKind::Point, &stager.batches, 4, 1.0, false).unwrap();
    assert_eq!((full.first_iteration, full.last_iteration), (0, 3));
    assert!(!full.has_advantages());
    let last = finalize_offline_dataset(EnvKind::Point, &stager.batches, 4, 0.25, true).unwrap();
    assert_eq!((last.first_iteration, last.last_iteration), (3, 3));
    assert!(last.has_advantages());
    assert_eq!(last.batches.len(), 2);

    for b in &full.batches {
        assert_eq!(b.batch_id, b.iteration * 1_000_000 + b.batch_id % 1_000_000);
        assert!(b.advantages.is_none());
        let ranges = b.rollout_ranges();
        assert_eq!(ranges.len(), 4);
        assert_eq!(b.sources.iter().filter(|s| **s == RolloutSource::Train).count(), 2);
        for r in 0..ranges.len() {
            let rollout = b.rollout(r);
            assert!(rollout.is_chained());
            assert!(rollout.transitions.iter().all(|t| t.reward.is_none()));
        }
    }
    // Each rollout set's advantages are standardized on their own.
    let b = &last.batches[0];
    let adv = b.advantages.as_ref().unwrap();
    let (start, _) = b.rollout_ranges()[2];
    let train = &adv[..start];
    let mean = train.iter().sum::<f64>() / train.len() as f64;
    assert!(mean.abs() < 1e-9);
}

#[test]
fn stager_window_skips_early_iterations() {
    let stager = staged_run(5, 0.4);
    assert_eq!(stager.keep_from, 3);
    assert!(stager.batches.iter().all(|b| b.batch.iteration >= 3));
    assert!(stager.batches.iter().all(|b| b.rewards.iter().all(|r| r.is_finite())));
}

#[test]
fn offline_dataset_round_trips() {
    let stager = staged_run(2, 1.0);
    for with_adv in [false, true] {
        let ds = finalize_offline_dataset(EnvKind::Point, &stager.batches, 2, 1.0, with_adv).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let back = OfflineDataset::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ds);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        ds.save(&path).unwrap();
        assert_eq!(OfflineDataset::load(&path).unwrap(), ds);

        let mut jsonl = Vec::new();
        ds.export_jsonl(&mut jsonl).unwrap();
        let lines: Vec<serde_json::Value> = String::from_utf8(jsonl)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), ds.transition_count());
        assert_eq!(lines[0].get("advantage").is_some(), with_adv);
        assert!(lines[0].get("reward").is_none());
    }
    let mut bad = Vec::new();
    bad.extend_from_slice(b"NOTADATA");
    assert!(OfflineDataset::read_from(&mut bad.as_slice()).is_err());
}

#[test]
fn finalize_rejects_bad_fraction_and_empty_window() {
    let stager = staged_run(1, 1.0);
    assert!(finalize_offline_dataset(EnvKind::Point, &stager.batches, 1, 0.0, false).is_err());
    assert!(finalize_offline_dataset(EnvKind::Point, &stager.batches, 1, 1.5, false).is_err());
    assert!(finalize_offline_dataset(EnvKind::Point, &[], 1, 1.0, false).is_err());
}

#[test]
fn meta_checkpoint_round_trip() {
    let meta = random_meta(30);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("meta.ckpt");
    meta.to_checkpoint(EnvKind::Point, 12).save(&path).unwrap();
    let ckpt = umcnp::checkpoint::Checkpoint::load(&path).unwrap();
    assert_eq!(ckpt.metadata["iteration"], 12);
    let (env, back) = MetaParams::from_checkpoint(&ckpt).unwrap();
    assert_eq!(env, EnvKind::Point);
    assert_eq!(back, meta);
    let wrong = umcnp::checkpoint::Checkpoint::new("cnp", serde_json::json!({}));
    assert!(MetaParams::from_checkpoint(&wrong).is_err());
}
