use std::fs;
use std::path::Path;

use umcnp::checkpoint::Checkpoint;
use umcnp::cnp::{CnpError, CnpVariant, LossRecord};
use umcnp::envs::EnvKind;
use umcnp::harness::config::{ArmKind, ExperimentConfig, Preset};
use umcnp::harness::export::{export_plots, FIG3_HEADER, FIG4_HEADER, FIG7_HEADER};
use umcnp::harness::manifest::{RunManifest, MANIFEST_FILE};
use umcnp::harness::{
    read_jsonl, read_records, run_all, run_cnp_train, run_meta_test, run_meta_train, HarnessError, RunPaths,
    DETERMINISTIC_ENV,
};
use umcnp::norml::MetaParams;

fn smoke(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(EnvKind::Point, Preset::Smoke);
    cfg.out_dir = dir.to_path_buf();
    cfg
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap()).unwrap()
}

#[test]
fn meta_train_writes_checkpoint_dataset_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke(dir.path());
    cfg.meta_train.iterations = 2;
    cfg.norml.tasks_per_iteration = 2;
    let summary = run_meta_train(&cfg).unwrap();
    assert_eq!(summary.len(), 1);
    for rel in [
        RunPaths::meta_ckpt(0),
        RunPaths::metrics(0),
        RunPaths::dataset(0, CnpVariant::Plain),
        RunPaths::dataset(0, CnpVariant::Adv),
    ] {
        assert!(dir.path().join(&rel).exists(), "{} missing", rel.display());
    }
    let lines: Vec<serde_json::Value> = read_jsonl(&dir.path().join(RunPaths::metrics(0))).unwrap();
    assert_eq!(lines.len(), 2);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["iteration"], i);
        assert_eq!(l["seed"], 0);
        for key in ["lr", "pre_return", "post_return", "outer_loss", "grad_norm", "seconds"] {
            assert!(l[key].is_number(), "{key} missing from metrics");
        }
    }
    let (env, _) = MetaParams::from_checkpoint(&Checkpoint::load(&dir.path().join(RunPaths::meta_ckpt(0))).unwrap()).unwrap();
    assert_eq!(env, EnvKind::Point);
    let m = manifest(dir.path());
    assert_eq!(m.config_hash, cfg.hash());
    assert_eq!(m.phases["meta-train"].files.len(), 4);
    assert!(dir.path().join("config.toml").exists());
}

#[test]
fn deterministic_mode_reproduces_every_artifact_bitwise() {
    std::env::set_var(DETERMINISTIC_ENV, "1");
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_all(&smoke(a.path())).unwrap();
    run_all(&smoke(b.path())).unwrap();
    for rel in [
        RunPaths::meta_ckpt(0),
        RunPaths::dataset(0, CnpVariant::Plain),
        RunPaths::dataset(0, CnpVariant::Adv),
        RunPaths::cnp_ckpt(0, CnpVariant::Plain),
        RunPaths::cnp_ckpt(0, CnpVariant::Adv),
        RunPaths::cnp_curve(0, CnpVariant::Plain),
        RunPaths::records(),
        RunPaths::summary_csv(),
    ] {
        let x = fs::read(a.path().join(&rel)).unwrap();
        let y = fs::read(b.path().join(&rel)).unwrap();
        assert!(x == y, "{} differs between runs", rel.display());
    }
}

#[test]
fn adv_training_on_a_dataset_without_advantages_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(dir.path());
    run_meta_train(&cfg).unwrap();
    fs::copy(
        dir.path().join(RunPaths::dataset(0, CnpVariant::Plain)),
        dir.path().join(RunPaths::dataset(0, CnpVariant::Adv)),
    )
    .unwrap();
    let err = run_cnp_train(&cfg, &[CnpVariant::Adv]).unwrap_err();
    assert!(matches!(err, HarnessError::Cnp(CnpError::MissingAdvantage(_))), "{err}");
    assert!(!dir.path().join(RunPaths::cnp_ckpt(0, CnpVariant::Adv)).exists());
}

#[test]
fn dataset_from_another_environment_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    run_meta_train(&smoke(dir.path())).unwrap();
    let mut cartpole = ExperimentConfig::preset(EnvKind::Cartpole, Preset::Smoke);
    cartpole.out_dir = dir.path().to_path_buf();
    let err = run_cnp_train(&cartpole, &[CnpVariant::Plain]).unwrap_err();
    assert!(matches!(err, HarnessError::Incompatible(_)), "{err}");
}

#[test]
fn cnp_training_without_a_dataset_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_cnp_train(&smoke(dir.path()), &[CnpVariant::Plain]).unwrap_err();
    match err {
        HarnessError::MissingArtifact(p) => assert!(p.ends_with("dataset.bin")),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn loss_curve_has_one_record_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke(dir.path());
    cfg.cnp.iterations = 100;
    run_meta_train(&cfg).unwrap();
    let summary = run_cnp_train(&cfg, &[CnpVariant::Plain]).unwrap();
    let curve: Vec<LossRecord> = read_jsonl(&dir.path().join(RunPaths::cnp_curve(0, CnpVariant::Plain))).unwrap();
    assert_eq!(curve.len(), 100);
    assert!(curve.iter().enumerate().all(|(i, r)| r.iteration == i && r.loss.is_finite()));
    assert_eq!(summary[0].final_smoothed, curve[99].smoothed);
}

#[test]
fn meta_test_emits_one_record_per_task_and_arm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(dir.path());
    run_meta_train(&cfg).unwrap();
    run_cnp_train(&cfg, &[CnpVariant::Plain, CnpVariant::Adv]).unwrap();
    let (records, summary) = run_meta_test(&cfg).unwrap();
    let arms = cfg.meta_test.arms.len();
    assert_eq!(records.len(), 6 * arms);
    assert_eq!(summary.len(), arms);
    assert_eq!(read_records(&dir.path().join(RunPaths::records())).unwrap(), records);
    let csv = fs::read_to_string(dir.path().join(RunPaths::summary_csv())).unwrap();
    assert!(csv.starts_with("arm,mean,ci_half_width,median"));
    for r in &records {
        assert!(r.post_return.is_finite());
        assert_eq!(r.returns.len(), cfg.meta_test.eval_episodes);
        assert_eq!(r.report.is_none(), r.kind == ArmKind::Random);
        if let Some(rep) = &r.report {
            let arm = cfg.meta_test.arms.iter().find(|a| a.name == r.arm).unwrap();
            assert_eq!(rep.generated_rollout_count, arm.generated_rollouts);
        }
    }
}

#[test]
fn arms_see_the_same_real_rollout() {
    // With the single real rollout and no generated data, the two NORML
    // budgets of one cell are the same update.
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke(dir.path());
    let mut twin = cfg.meta_test.arms.iter().find(|a| a.kind == ArmKind::Norml).unwrap().clone();
    twin.name = "NORML-TWIN".into();
    twin.real_rollouts = Some(1);
    cfg.meta_test.arms.retain(|a| a.kind == ArmKind::Norml && a.real_rollouts == Some(1));
    cfg.meta_test.arms.push(twin);
    run_meta_train(&cfg).unwrap();
    let (records, _) = run_meta_test(&cfg).unwrap();
    for pair in records.chunks(2) {
        assert_eq!(pair[0].post_return.to_bits(), pair[1].post_return.to_bits());
        assert_eq!(pair[0].path, pair[1].path);
    }
}

#[test]
fn adv_arm_without_its_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(dir.path());
    assert!(cfg.needs_adv_model());
    run_meta_train(&cfg).unwrap();
    run_cnp_train(&cfg, &[CnpVariant::Plain]).unwrap();
    match run_meta_test(&cfg).unwrap_err() {
        HarnessError::MissingArtifact(p) => assert!(p.ends_with("cnp_adv.ckpt")),
        other => panic!("unexpected {other}"),
    }
    assert!(!dir.path().join(RunPaths::records()).exists());
}

#[test]
fn export_of_an_empty_directory_writes_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    let files = export_plots(dir.path()).unwrap();
    let expected = [FIG3_HEADER, FIG4_HEADER, FIG7_HEADER];
    assert_eq!(files.len(), 3);
    for (f, header) in files.iter().zip(expected) {
        assert_eq!(fs::read_to_string(f).unwrap(), format!("{header}\n"));
    }
    assert_eq!(FIG3_HEADER, "task_index,step,x,y,arm");
}

#[test]
fn exported_figures_follow_the_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke(dir.path());
    cfg.meta_test.trials = 2;
    run_all(&cfg).unwrap();
    let records = read_records(&dir.path().join(RunPaths::records())).unwrap();
    let read = |name: &str| fs::read_to_string(dir.path().join("plots").join(name)).unwrap();
    let arms = cfg.meta_test.arms.len();
    // One row per (task, arm, seed), averaged over trials.
    let fig4 = read("fig4.csv");
    assert_eq!(fig4.lines().count(), 1 + 6 * arms);
    let fig7 = read("fig7.csv");
    assert_eq!(fig7.lines().count(), 1 + records.len());
    // Trial 0 paths, one row per visited state.
    let fig3 = read("fig3.csv");
    let expected: usize = records.iter().filter(|r| r.trial == 0).map(|r| r.path.len()).sum();
    assert_eq!(fig3.lines().count(), 1 + expected);
    for line in fig3.lines().skip(1) {
        assert_eq!(line.split(',').count(), 5);
    }
    assert!(manifest(dir.path()).phases.contains_key("export-plots"));
}

#[test]
fn divergent_meta_training_keeps_the_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke(dir.path());
    cfg.norml.outer_lr = 1e300;
    cfg.meta_train.iterations = 20;
    cfg.meta_train.lr_decay = false;
    let err = run_meta_train(&cfg).unwrap_err();
    assert!(matches!(err, HarnessError::MetaTrain { seed: 0, .. }), "{err}");
    let ckpt = Checkpoint::load(&dir.path().join(RunPaths::meta_ckpt(0))).unwrap();
    assert!(ckpt.arrays.values().all(|a| a.is_finite()));
}

#[test]
fn invalid_config_is_rejected_before_running() {
    let err = ExperimentConfig::from_toml_over_preset("[norml]\nouter_lr = -1.0\n", EnvKind::Point, Preset::Smoke);
    assert!(err.is_err());
    let err = ExperimentConfig::from_toml_over_preset("[cnp]\nnot_a_field = 1\n", EnvKind::Point, Preset::Smoke);
    assert!(err.is_err());
}
