//! Experiment orchestration: meta-training, dynamics-model training,
//! meta-testing and figure data export.
//!
//! # Run directory
//!
//! ```text
//! <out>/config.toml                 resolved config
//! <out>/manifest.json               config hash, files and timings per phase
//! <out>/seed-<s>/meta.ckpt          meta-parameters
//! <out>/seed-<s>/metrics.jsonl      one record per meta-training iteration
//! <out>/seed-<s>/dataset.bin        offline dataset without advantages
//! <out>/seed-<s>/dataset_adv.bin    the same transitions with advantages
//! <out>/seed-<s>/cnp_<variant>.ckpt dynamics model
//! <out>/seed-<s>/cnp_<variant>_curve.jsonl
//! <out>/metatest/records.jsonl      one record per (seed, task, trial, arm)
//! <out>/metatest/summary.csv        arm, mean, CI half-width, median
//! <out>/plots/fig{3,4,7}.csv        figure data
//! ```
//!
//! # Metrics schema
//!
//! `metrics.jsonl` lines: `seed`, `iteration`, `lr`, `pre_return`,
//! `post_return`, `outer_loss`, `grad_norm`, `mean_abs_pseudo_advantage`,
//! `mean_log_std`, `transitions`, `seconds`. Returns are mean undiscounted
//! returns of the iteration's inner (pre) and outer (post) rollouts.
//!
//! Curve lines: `iteration`, `loss`, `smoothed` (trailing-window mean).
//!
//! Meta-test lines: `seed`, `arm`, `kind`, `task_index`, `task_parameter`,
//! `trial`, `post_return` (mean over evaluation episodes), `returns`,
//! `report` (adaptation diagnostics, absent for the random arm) and `path`
//! (observations of the first evaluation episode).

pub mod aggregate;
pub mod config;
pub mod export;
pub mod manifest;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::cnp::{train_cnp, CnpError, CnpModel, CnpVariant};
use crate::envs::{collect_rollout, EnvKind, TaskSpec};
use crate::metatest::{
    adapt_with_real, collect_real, evaluate_post_update, AdaptationReport, Evaluation, GenerationOptions, MetaTestError,
    RealBudget,
};
use crate::nets::GaussianPolicy;
use crate::norml::dataset::{finalize_offline_dataset, DatasetError, DatasetStager, OfflineDataset};
use crate::norml::{IterationMetrics, MetaParams, MetaTrainer, NormlError};
use crate::seed::derive_rng;

use aggregate::{summarize, summary_csv, summary_table, ArmSummary};
use config::{ArmKind, ExperimentConfig};
use manifest::RunManifest;

pub const DETERMINISTIC_ENV: &str = "UMCNP_DETERMINISTIC";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error("meta-training seed {seed}: {source}")]
    MetaTrain {
        seed: u64,
        #[source]
        source: NormlError,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Cnp(#[from] CnpError),
    #[error(transparent)]
    MetaTest(#[from] MetaTestError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0} does not exist; run the earlier phase first")]
    MissingArtifact(PathBuf),
    #[error("{0}")]
    Incompatible(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("thread pool: {0}")]
    Pool(String),
}

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    fn rel_seed(seed: u64, file: &str) -> PathBuf {
        PathBuf::from(format!("seed-{seed}")).join(file)
    }

    pub fn abs(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn meta_ckpt(seed: u64) -> PathBuf {
        Self::rel_seed(seed, "meta.ckpt")
    }

    pub fn metrics(seed: u64) -> PathBuf {
        Self::rel_seed(seed, "metrics.jsonl")
    }

    pub fn dataset(seed: u64, variant: CnpVariant) -> PathBuf {
        match variant {
            CnpVariant::Plain => Self::rel_seed(seed, "dataset.bin"),
            CnpVariant::Adv => Self::rel_seed(seed, "dataset_adv.bin"),
        }
    }

    pub fn cnp_ckpt(seed: u64, variant: CnpVariant) -> PathBuf {
        Self::rel_seed(seed, &format!("cnp_{}.ckpt", variant_name(variant)))
    }

    pub fn cnp_curve(seed: u64, variant: CnpVariant) -> PathBuf {
        Self::rel_seed(seed, &format!("cnp_{}_curve.jsonl", variant_name(variant)))
    }

    pub fn records() -> PathBuf {
        PathBuf::from("metatest/records.jsonl")
    }

    pub fn summary_csv() -> PathBuf {
        PathBuf::from("metatest/summary.csv")
    }

    pub fn summary_json() -> PathBuf {
        PathBuf::from("metatest/summary.json")
    }
}

pub fn variant_name(v: CnpVariant) -> &'static str {
    match v {
        CnpVariant::Plain => "plain",
        CnpVariant::Adv => "adv",
    }
}

/// Runs `f` on a pool sized by `threads` (0: default), or on one thread when
/// the determinism variable is set to `1`.
pub fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, HarnessError> {
    let deterministic = std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1");
    let n = if deterministic { 1 } else { threads };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

fn prepare_dir(config: &ExperimentConfig) -> Result<(RunPaths, RunManifest), HarnessError> {
    let paths = RunPaths::new(&config.out_dir);
    fs::create_dir_all(&paths.root)?;
    fs::write(paths.root.join("config.toml"), config.to_toml())?;
    let manifest = RunManifest::load_or_new(&paths.root, config)?;
    Ok((paths, manifest))
}

fn require(path: &Path) -> Result<(), HarnessError> {
    if path.exists() {
        Ok(())
    } else {
        Err(HarnessError::MissingArtifact(path.to_path_buf()))
    }
}

#[derive(Serialize)]
struct MetricLine<'a> {
    seed: u64,
    lr: f64,
    #[serde(flatten)]
    metrics: &'a IterationMetrics,
}

/// Summary of one seed's meta-training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainSummary {
    pub seed: u64,
    pub iterations: usize,
    pub final_post_return: f64,
    pub dataset_transitions: usize,
}

/// Meta-trains every seed; writes checkpoints, metrics and datasets.
pub fn run_meta_train(config: &ExperimentConfig) -> Result<Vec<MetaTrainSummary>, HarnessError> {
    let (paths, mut manifest) = prepare_dir(config)?;
    let start = Instant::now();
    let mut files = Vec::new();
    let mut out = Vec::new();
    for &seed in &config.seeds {
        out.push(with_pool(config.threads, || meta_train_seed(config, &paths, seed))??);
        files.push(RunPaths::meta_ckpt(seed));
        files.push(RunPaths::metrics(seed));
        files.push(RunPaths::dataset(seed, CnpVariant::Plain));
        files.push(RunPaths::dataset(seed, CnpVariant::Adv));
    }
    manifest.record(&paths.root, "meta-train", start.elapsed().as_secs_f64(), files)?;
    Ok(out)
}

fn meta_train_seed(config: &ExperimentConfig, paths: &RunPaths, seed: u64) -> Result<MetaTrainSummary, HarnessError> {
    let env = config.env;
    let mt = &config.meta_train;
    fs::create_dir_all(paths.abs(&PathBuf::from(format!("seed-{seed}"))))?;
    let wrap = |source| HarnessError::MetaTrain { seed, source };
    let mut trainer = MetaTrainer::new(env, config.norml.clone(), seed).map_err(wrap)?;
    trainer.stager = Some(DatasetStager::windowed(env, mt.iterations, mt.retain_fraction));
    if mt.lr_decay {
        trainer.lr_decay_iterations = Some(mt.iterations);
    }
    let ckpt_path = paths.abs(&RunPaths::meta_ckpt(seed));
    let mut metrics = BufWriter::new(File::create(paths.abs(&RunPaths::metrics(seed)))?);
    let mut last_post = f64::NAN;
    for _ in 0..mt.iterations {
        let lr = trainer.current_lr();
        let m = match trainer.step() {
            Ok(m) => m,
            Err(e) => {
                // Parameters are still the last finite ones.
                trainer.meta.to_checkpoint(env, trainer.iteration).save(&ckpt_path)?;
                metrics.flush()?;
                return Err(wrap(e));
            }
        };
        serde_json::to_writer(&mut metrics, &MetricLine { seed, lr, metrics: &m })?;
        metrics.write_all(b"\n")?;
        metrics.flush()?;
        last_post = m.post_return;
        if m.iteration % 10 == 0 {
            log::info!(
                "seed {seed} iteration {} pre {:.3} post {:.3} ({:.2}s)",
                m.iteration,
                m.pre_return,
                m.post_return,
                m.seconds
            );
        }
        if mt.checkpoint_every > 0 && (m.iteration + 1) % mt.checkpoint_every == 0 {
            trainer.meta.to_checkpoint(env, trainer.iteration).save(&ckpt_path)?;
        }
    }
    trainer.meta.to_checkpoint(env, trainer.iteration).save(&ckpt_path)?;
    let staged = trainer.stager.take().expect("stager set above").batches;
    let mut transitions = 0;
    for variant in [CnpVariant::Plain, CnpVariant::Adv] {
        let ds = finalize_offline_dataset(env, &staged, mt.iterations, mt.retain_fraction, variant == CnpVariant::Adv)?;
        transitions = ds.transition_count();
        ds.save(&paths.abs(&RunPaths::dataset(seed, variant)))?;
    }
    Ok(MetaTrainSummary {
        seed,
        iterations: mt.iterations,
        final_post_return: last_post,
        dataset_transitions: transitions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnpTrainSummary {
    pub seed: u64,
    pub variant: CnpVariant,
    pub initial_smoothed: f64,
    pub final_smoothed: f64,
}

/// Trains the requested dynamics-model variants for every seed.
pub fn run_cnp_train(config: &ExperimentConfig, variants: &[CnpVariant]) -> Result<Vec<CnpTrainSummary>, HarnessError> {
    let (paths, mut manifest) = prepare_dir(config)?;
    let start = Instant::now();
    let mut files = Vec::new();
    let mut out = Vec::new();
    for &seed in &config.seeds {
        for &variant in variants {
            let ds_path = paths.abs(&RunPaths::dataset(seed, variant));
            require(&ds_path)?;
            let ds = OfflineDataset::load(&ds_path)?;
            if ds.env != config.env || ds.state_dim != config.env.state_dim() || ds.action_dim != config.env.action_dim() {
                return Err(HarnessError::Incompatible(format!(
                    "{} holds {} data ({}-d states, {}-d actions); the config is for {}",
                    ds_path.display(),
                    ds.env.name(),
                    ds.state_dim,
                    ds.action_dim,
                    config.env.name()
                )));
            }
            let mut curve = BufWriter::new(File::create(paths.abs(&RunPaths::cnp_curve(seed, variant)))?);
            let mut write_err = None;
            let (model, records) = with_pool(config.threads, || {
                train_cnp(&ds, variant, &config.cnp, seed, |r| {
                    if r.iteration % 1000 == 0 {
                        log::info!("seed {seed} {} iteration {} loss {:.4} smoothed {:.4}", variant_name(variant), r.iteration, r.loss, r.smoothed);
                    }
                    if write_err.is_none() {
                        let res = serde_json::to_writer(&mut curve, r)
                            .map_err(std::io::Error::other)
                            .and_then(|_| curve.write_all(b"\n"));
                        write_err = res.err();
                    }
                })
            })??;
            if let Some(e) = write_err {
                return Err(e.into());
            }
            curve.flush()?;
            model.to_checkpoint().save(&paths.abs(&RunPaths::cnp_ckpt(seed, variant)))?;
            files.push(RunPaths::cnp_ckpt(seed, variant));
            files.push(RunPaths::cnp_curve(seed, variant));
            out.push(CnpTrainSummary {
                seed,
                variant,
                initial_smoothed: records.first().map_or(f64::NAN, |r| r.smoothed),
                final_smoothed: records.last().map_or(f64::NAN, |r| r.smoothed),
            });
        }
    }
    let phase = if variants.len() == 1 {
        format!("cnp-train-{}", variant_name(variants[0]))
    } else {
        "cnp-train".to_string()
    };
    manifest.record(&paths.root, &phase, start.elapsed().as_secs_f64(), files)?;
    Ok(out)
}

/// One adapted-and-evaluated policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaTestRecord {
    pub seed: u64,
    pub arm: String,
    pub kind: ArmKind,
    pub task_index: usize,
    pub task_parameter: f64,
    pub trial: usize,
    pub post_return: f64,
    pub returns: Vec<f64>,
    pub report: Option<AdaptationReport>,
    pub path: Vec<Vec<f64>>,
}

struct SeedModels {
    meta: MetaParams,
    plain: Option<CnpModel>,
    adv: Option<CnpModel>,
}

fn load_seed_models(config: &ExperimentConfig, paths: &RunPaths, seed: u64) -> Result<SeedModels, HarnessError> {
    let meta_path = paths.abs(&RunPaths::meta_ckpt(seed));
    require(&meta_path)?;
    let (env, meta) = MetaParams::from_checkpoint(&Checkpoint::load(&meta_path)?)?;
    if env != config.env {
        return Err(HarnessError::Incompatible(format!(
            "{} was trained on {}, the config is for {}",
            meta_path.display(),
            env.name(),
            config.env.name()
        )));
    }
    let load = |variant: CnpVariant, needed: bool| -> Result<Option<CnpModel>, HarnessError> {
        if !needed {
            return Ok(None);
        }
        let p = paths.abs(&RunPaths::cnp_ckpt(seed, variant));
        require(&p)?;
        let m = CnpModel::from_checkpoint(&Checkpoint::load(&p)?)?;
        if m.env != config.env || m.variant != variant {
            return Err(HarnessError::Incompatible(format!("{} does not match the config", p.display())));
        }
        Ok(Some(m))
    };
    let arms = &config.meta_test.arms;
    Ok(SeedModels {
        meta,
        plain: load(CnpVariant::Plain, arms.iter().any(|a| a.kind == ArmKind::Umcnp))?,
        adv: load(CnpVariant::Adv, arms.iter().any(|a| a.kind == ArmKind::UmcnpAdv))?,
    })
}

/// Zero-mean, unit-variance Gaussian actions.
fn random_policy(env: EnvKind) -> GaussianPolicy {
    let mut p = GaussianPolicy::new(env.state_dim(), env.action_dim(), &[], &mut derive_rng(0, &[]));
    p.mean = p.mean.with_zero_output();
    p.log_std = Array::zeros(1, env.action_dim());
    p
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    config: &ExperimentConfig,
    models: &SeedModels,
    seed: u64,
    task_pos: usize,
    task_index: usize,
    task: &TaskSpec,
    trial: usize,
) -> Result<Vec<MetaTestRecord>, HarnessError> {
    let env = config.env;
    let te = &config.meta_test;
    let meta = &models.meta;
    // Every arm draws its real data from the same rollouts.
    let need = te
        .arms
        .iter()
        .map(|a| match a.real_budget() {
            RealBudget::Rollouts(n) => n,
            RealBudget::Transitions(_) => 1,
        })
        .max()
        .unwrap_or(1);
    let cell = [task_pos as u64, trial as u64];
    let real = collect_real(env, task, &meta.policy, RealBudget::Rollouts(need), &mut derive_rng(seed, &[3, cell[0], cell[1]]));
    let opts = GenerationOptions {
        sample_next_state: te.sample_next_state,
    };
    let mut out = Vec::with_capacity(te.arms.len());
    for (ai, arm) in te.arms.iter().enumerate() {
        let mut eval_rng = derive_rng(seed, &[5, cell[0], cell[1]]);
        let (evaluation, report) = if arm.kind == ArmKind::Random {
            let policy = random_policy(env);
            let mut returns = Vec::new();
            let mut path = Vec::new();
            for e in 0..te.eval_episodes {
                let r = collect_rollout(env, task, &policy, env.horizon(), &mut eval_rng, true);
                returns.push(r.total_reward().expect("evaluation records rewards"));
                if e == 0 {
                    path = r.transitions.iter().map(|t| t.s.clone()).collect();
                    if let Some(t) = r.transitions.last() {
                        path.push(t.s_next.clone());
                    }
                }
            }
            let mean = returns.iter().sum::<f64>() / returns.len() as f64;
            (
                Evaluation {
                    returns,
                    mean,
                    paths: vec![path],
                },
                None,
            )
        } else {
            let data = match arm.real_budget() {
                RealBudget::Rollouts(n) => real[..n].to_vec(),
                RealBudget::Transitions(n) => vec![real[0].prefix(n)],
            };
            let model = match arm.kind {
                ArmKind::Umcnp => models.plain.as_ref(),
                ArmKind::UmcnpAdv => models.adv.as_ref(),
                _ => None,
            };
            let generated = if model.is_some() { arm.generated_rollouts } else { 0 };
            let mut gen_rng = derive_rng(seed, &[4, cell[0], cell[1], ai as u64]);
            let (policy, report) = adapt_with_real(env, meta, model, &data, generated, config.norml.alpha, opts, &mut gen_rng)?;
            (evaluate_post_update(env, &policy, task, te.eval_episodes, &mut eval_rng), Some(report))
        };
        out.push(MetaTestRecord {
            seed,
            arm: arm.name.clone(),
            kind: arm.kind,
            task_index,
            task_parameter: task.parameter(),
            trial,
            post_return: evaluation.mean,
            returns: evaluation.returns,
            report,
            path: evaluation.paths.into_iter().next().unwrap_or_default(),
        });
    }
    Ok(out)
}

/// Adapts and evaluates every arm on every test task for every seed.
/// Records are written in (seed, task, trial, arm) order.
pub fn run_meta_test(config: &ExperimentConfig) -> Result<(Vec<MetaTestRecord>, Vec<ArmSummary>), HarnessError> {
    let (paths, mut manifest) = prepare_dir(config)?;
    let start = Instant::now();
    let tasks = config.env.test_tasks();
    let mut records = Vec::new();
    for &seed in &config.seeds {
        let models = load_seed_models(config, &paths, seed)?;
        let cells: Vec<(usize, usize)> = (0..tasks.len())
            .flat_map(|t| (0..config.meta_test.trials).map(move |k| (t, k)))
            .collect();
        let per_cell: Vec<Vec<MetaTestRecord>> = with_pool(config.threads, || {
            cells
                .par_iter()
                .map(|&(t, k)| run_cell(config, &models, seed, t, tasks[t].0, &tasks[t].1, k))
                .collect::<Result<_, _>>()
        })??;
        records.extend(per_cell.into_iter().flatten());
    }
    fs::create_dir_all(paths.root.join("metatest"))?;
    let mut w = BufWriter::new(File::create(paths.abs(&RunPaths::records()))?);
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let summary = summarize(&records);
    fs::write(paths.abs(&RunPaths::summary_csv()), summary_csv(&summary))?;
    fs::write(paths.abs(&RunPaths::summary_json()), serde_json::to_string_pretty(&summary)?)?;
    log::debug!("meta-test summary\n{}", summary_table(&summary));
    manifest.record(
        &paths.root,
        "meta-test",
        start.elapsed().as_secs_f64(),
        vec![RunPaths::records(), RunPaths::summary_csv(), RunPaths::summary_json()],
    )?;
    Ok((records, summary))
}

/// Reads meta-test records; a missing file yields no records.
pub fn read_records(path: &Path) -> Result<Vec<MetaTestRecord>, HarnessError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Reads a JSON-lines file of any record type.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Every phase in order.
pub fn run_all(config: &ExperimentConfig) -> Result<Vec<ArmSummary>, HarnessError> {
    run_meta_train(config)?;
    let mut variants = vec![CnpVariant::Plain];
    if config.needs_adv_model() {
        variants.push(CnpVariant::Adv);
    }
    run_cnp_train(config, &variants)?;
    let (_, summary) = run_meta_test(config)?;
    export::export_plots(&config.out_dir)?;
    Ok(summary)
}
