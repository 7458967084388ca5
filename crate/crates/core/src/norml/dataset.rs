//! Offline transition dataset logged during meta-training.
//!
//! Each batch holds every rollout collected for one task in one iteration,
//! flattened into packed `(s, a, s')` arrays. Batches never carry rewards or
//! the task parameter. The advantage-augmented variant additionally stores
//! one true advantage per transition.
//!
//! # Binary layout (little-endian)
//!
//! ```text
//! magic "UMCNPDAT" | version u32 | env u8 | has_advantage u8 | state_dim u32 | action_dim u32
//! first_iteration u64 | last_iteration u64 | batch_count u64 | transition_count u64
//! stats: state mean/std, action mean/std, next-state mean/std, delta mean/std,
//!        advantage mean/std (only if has_advantage), all f64
//! per batch: batch_id u64 | iteration u64 | rollout_count u32
//!            | per rollout: length u32, source u8
//!            | states f64[n*ds] | actions f64[n*da] | next_states f64[n*ds] | advantages f64[n]?
//! ```
//!
//! # Line-delimited export
//!
//! One JSON object per transition:
//! `{"batch": u64, "iteration": u64, "rollout": usize, "step": usize, "source": "train"|"test",
//!   "s": [f64], "a": [f64], "s_next": [f64], "advantage": f64?}`.

use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TaskData;
use crate::envs::{EnvKind, Rollout, Transition};
use crate::rl::{compute_advantages, RlError, ValueBaseline};

const MAGIC: &[u8; 8] = b"UMCNPDAT";
pub const FORMAT_VERSION: u32 = 1;
const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("no transitions retained")]
    Empty,
    #[error("retain fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Rl(#[from] RlError),
}

/// Which phase of a meta-training iteration produced a rollout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutSource {
    /// Collected by the meta-policy for the inner step.
    Train,
    /// Collected by the adapted policy for the outer objective.
    Test,
}

/// All transitions of one task in one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionBatch {
    pub batch_id: u64,
    pub iteration: u64,
    pub rollout_lengths: Vec<u32>,
    pub sources: Vec<RolloutSource>,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub next_states: Vec<f64>,
    pub advantages: Option<Vec<f64>>,
    state_dim: usize,
    action_dim: usize,
}

impl TransitionBatch {
    pub fn new(batch_id: u64, iteration: u64, state_dim: usize, action_dim: usize) -> Self {
        TransitionBatch {
            batch_id,
            iteration,
            rollout_lengths: Vec::new(),
            sources: Vec::new(),
            states: Vec::new(),
            actions: Vec::new(),
            next_states: Vec::new(),
            advantages: None,
            state_dim,
            action_dim,
        }
    }

    /// Appends a rollout. `advantages`, when given, must have one entry per
    /// transition and must be given for every rollout of the batch.
    pub fn push_rollout(&mut self, rollout: &Rollout, source: RolloutSource, advantages: Option<&[f64]>) {
        for t in &rollout.transitions {
            assert_eq!(t.s.len(), self.state_dim);
            assert_eq!(t.a.len(), self.action_dim);
            self.states.extend(&t.s);
            self.actions.extend(&t.a);
            self.next_states.extend(&t.s_next);
        }
        if let Some(adv) = advantages {
            assert_eq!(adv.len(), rollout.len());
            assert!(self.rollout_lengths.is_empty() || self.advantages.is_some());
            self.advantages.get_or_insert_with(Vec::new).extend(adv);
        } else {
            assert!(self.advantages.is_none(), "advantages missing for one rollout");
        }
        self.rollout_lengths.push(rollout.len() as u32);
        self.sources.push(source);
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.state_dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn next_state(&self, i: usize) -> &[f64] {
        &self.next_states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn advantage(&self, i: usize) -> Option<f64> {
        self.advantages.as_ref().map(|a| a[i])
    }

    pub fn transition(&self, i: usize) -> Transition {
        Transition {
            advantage: self.advantage(i),
            ..Transition::new(self.state(i).to_vec(), self.action(i).to_vec(), self.next_state(i).to_vec())
        }
    }

    /// Start offset and length of each rollout.
    pub fn rollout_ranges(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.rollout_lengths
            .iter()
            .map(|&l| {
                let r = (start, l as usize);
                start += l as usize;
                r
            })
            .collect()
    }

    /// Rollout `r` rebuilt as a reward-free [`Rollout`].
    pub fn rollout(&self, r: usize) -> Rollout {
        let (start, len) = self.rollout_ranges()[r];
        Rollout {
            transitions: (start..start + len).map(|i| self.transition(i)).collect(),
            origin: crate::envs::Origin::Real,
            task_id: Some(self.batch_id as usize),
            sigmas: Vec::new(),
        }
    }
}

/// Per-dimension mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl MeanStd {
    /// Identity normalization of width `dim`.
    pub fn identity(dim: usize) -> Self {
        MeanStd {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Statistics of packed rows of width `dim`, std floored at 1e-6.
    pub fn of_rows<'a>(dim: usize, chunks: impl Iterator<Item = &'a [f64]>) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for row in chunks {
            n += 1;
            for j in 0..dim {
                sum[j] += row[j];
                sq[j] += row[j] * row[j];
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(STD_FLOOR))
            .collect();
        MeanStd { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }
}

/// Normalization statistics frozen when the dataset is finalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub state: MeanStd,
    pub action: MeanStd,
    pub next_state: MeanStd,
    /// Statistics of `s' - s`.
    pub delta: MeanStd,
    pub advantage: Option<MeanStd>,
}

impl DatasetStats {
    pub fn compute(batches: &[TransitionBatch], state_dim: usize, action_dim: usize) -> Self {
        let states = || batches.iter().flat_map(|b| b.states.chunks(state_dim));
        let actions = batches.iter().flat_map(|b| b.actions.chunks(action_dim));
        let nexts = batches.iter().flat_map(|b| b.next_states.chunks(state_dim));
        let deltas: Vec<Vec<f64>> = batches
            .iter()
            .flat_map(|b| {
                b.states
                    .chunks(state_dim)
                    .zip(b.next_states.chunks(state_dim))
                    .map(|(s, n)| n.iter().zip(s).map(|(x, y)| x - y).collect())
            })
            .collect();
        let advantage = if batches.iter().all(|b| b.advantages.is_some()) && !batches.is_empty() {
            Some(MeanStd::of_rows(
                1,
                batches
                    .iter()
                    .flat_map(|b| b.advantages.as_ref().expect("checked").chunks(1)),
            ))
        } else {
            None
        };
        DatasetStats {
            state: MeanStd::of_rows(state_dim, states()),
            action: MeanStd::of_rows(action_dim, actions),
            next_state: MeanStd::of_rows(state_dim, nexts),
            delta: MeanStd::of_rows(state_dim, deltas.iter().map(Vec::as_slice)),
            advantage,
        }
    }
}

/// A staged batch: the packed transitions plus rewards, kept only until
/// finalization.
#[derive(Clone, Debug)]
pub struct StagedBatch {
    pub batch: TransitionBatch,
    pub rewards: Vec<f64>,
}

/// Collects batches during meta-training. Only iterations at or after
/// `keep_from` are held in memory.
#[derive(Clone, Debug)]
pub struct DatasetStager {
    pub env: EnvKind,
    pub total_iterations: usize,
    pub keep_from: usize,
    pub batches: Vec<StagedBatch>,
}

/// First iteration kept when retaining `fraction` of `total` iterations.
pub fn retained_from(total: usize, fraction: f64) -> usize {
    let kept = ((total as f64 * fraction).ceil() as usize).clamp(1, total.max(1));
    total.saturating_sub(kept)
}

impl DatasetStager {
    /// Stages every iteration.
    pub fn new(env: EnvKind, total_iterations: usize) -> Self {
        DatasetStager {
            env,
            total_iterations,
            keep_from: 0,
            batches: Vec::new(),
        }
    }

    /// Stages only the final `fraction` of iterations.
    pub fn windowed(env: EnvKind, total_iterations: usize, fraction: f64) -> Self {
        DatasetStager {
            keep_from: retained_from(total_iterations, fraction),
            ..Self::new(env, total_iterations)
        }
    }

    /// Stages one task's rollouts with their true advantages (fitted
    /// separately for the inner and outer rollout sets).
    pub fn stage(&mut self, iteration: usize, slot: usize, data: &TaskData, gamma: f64, horizon: usize) -> Result<(), RlError> {
        if iteration < self.keep_from {
            return Ok(());
        }
        let train_baseline = ValueBaseline::fit(&data.train, gamma, horizon)?;
        let train_adv = compute_advantages(&data.train, &train_baseline, gamma)?;
        let (sd, ad) = (self.env.state_dim(), self.env.action_dim());
        let id = (iteration * 1_000_000 + slot) as u64;
        let mut batch = TransitionBatch::new(id, iteration as u64, sd, ad);
        let mut rewards = Vec::new();
        for (set, adv, source) in [
            (&data.train, &train_adv, RolloutSource::Train),
            (&data.test, &data.test_advantages, RolloutSource::Test),
        ] {
            let mut offset = 0;
            for r in set {
                batch.push_rollout(r, source, Some(&adv[offset..offset + r.len()]));
                offset += r.len();
                rewards.extend(r.transitions.iter().map(|t| t.reward.map_or(f64::NAN, |v| v.get())));
            }
        }
        self.batches.push(StagedBatch { batch, rewards });
        Ok(())
    }
}

/// The finalized dataset used for dynamics-model training.
#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub env: EnvKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub first_iteration: u64,
    pub last_iteration: u64,
    pub stats: DatasetStats,
    pub batches: Vec<TransitionBatch>,
}

/// Keeps the batches from the final `retain_fraction` of the
/// `total_iterations`, drops rewards, and keeps advantages only when
/// `with_advantages` is set.
pub fn finalize_offline_dataset(
    env: EnvKind,
    staged: &[StagedBatch],
    total_iterations: usize,
    retain_fraction: f64,
    with_advantages: bool,
) -> Result<OfflineDataset, DatasetError> {
    if !(retain_fraction > 0.0 && retain_fraction <= 1.0) {
        return Err(DatasetError::BadFraction(retain_fraction));
    }
    let from = retained_from(total_iterations, retain_fraction) as u64;
    let batches: Vec<TransitionBatch> = staged
        .iter()
        .filter(|b| b.batch.iteration >= from && !b.batch.is_empty())
        .map(|b| {
            let mut batch = b.batch.clone();
            if !with_advantages {
                batch.advantages = None;
            }
            batch
        })
        .collect();
    if batches.is_empty() {
        return Err(DatasetError::Empty);
    }
    if with_advantages && batches.iter().any(|b| b.advantages.is_none()) {
        return Err(DatasetError::Format("staged batches lack advantages".into()));
    }
    let (sd, ad) = (env.state_dim(), env.action_dim());
    let stats = DatasetStats::compute(&batches, sd, ad);
    Ok(OfflineDataset {
        env,
        state_dim: sd,
        action_dim: ad,
        first_iteration: batches.iter().map(|b| b.iteration).min().unwrap_or(0),
        last_iteration: batches.iter().map(|b| b.iteration).max().unwrap_or(0),
        stats,
        batches,
    })
}

impl OfflineDataset {
    /// Builds a dataset from ready-made batches and computes its statistics.
    pub fn from_batches(env: EnvKind, batches: Vec<TransitionBatch>) -> Result<Self, DatasetError> {
        if batches.iter().all(TransitionBatch::is_empty) {
            return Err(DatasetError::Empty);
        }
        let (sd, ad) = (env.state_dim(), env.action_dim());
        let stats = DatasetStats::compute(&batches, sd, ad);
        Ok(OfflineDataset {
            env,
            state_dim: sd,
            action_dim: ad,
            first_iteration: batches.iter().map(|b| b.iteration).min().unwrap_or(0),
            last_iteration: batches.iter().map(|b| b.iteration).max().unwrap_or(0),
            stats,
            batches,
        })
    }

    pub fn has_advantages(&self) -> bool {
        self.stats.advantage.is_some()
    }

    pub fn transition_count(&self) -> usize {
        self.batches.iter().map(TransitionBatch::len).sum()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), DatasetError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&[self.env.code(), self.has_advantages() as u8])?;
        w.write_all(&(self.state_dim as u32).to_le_bytes())?;
        w.write_all(&(self.action_dim as u32).to_le_bytes())?;
        for v in [
            self.first_iteration,
            self.last_iteration,
            self.batches.len() as u64,
            self.transition_count() as u64,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        let s = &self.stats;
        let mut stat_sets = vec![&s.state, &s.action, &s.next_state, &s.delta];
        if let Some(a) = &s.advantage {
            stat_sets.push(a);
        }
        for ms in stat_sets {
            write_f64s(w, &ms.mean)?;
            write_f64s(w, &ms.std)?;
        }
        for b in &self.batches {
            w.write_all(&b.batch_id.to_le_bytes())?;
            w.write_all(&b.iteration.to_le_bytes())?;
            w.write_all(&(b.rollout_lengths.len() as u32).to_le_bytes())?;
            for (len, src) in b.rollout_lengths.iter().zip(&b.sources) {
                w.write_all(&len.to_le_bytes())?;
                w.write_all(&[matches!(src, RolloutSource::Test) as u8])?;
            }
            write_f64s(w, &b.states)?;
            write_f64s(w, &b.actions)?;
            write_f64s(w, &b.next_states)?;
            if self.has_advantages() {
                write_f64s(w, b.advantages.as_ref().expect("advantage flag set"))?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, DatasetError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DatasetError::Format("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(DatasetError::Version(version));
        }
        let mut flags = [0u8; 2];
        r.read_exact(&mut flags)?;
        let env = EnvKind::from_code(flags[0]).ok_or_else(|| DatasetError::Format(format!("env code {}", flags[0])))?;
        let has_adv = flags[1] != 0;
        let sd = read_u32(r)? as usize;
        let ad = read_u32(r)? as usize;
        if sd != env.state_dim() || ad != env.action_dim() {
            return Err(DatasetError::Format(format!(
                "dims {sd}/{ad} do not match {}",
                env.name()
            )));
        }
        let first_iteration = read_u64(r)?;
        let last_iteration = read_u64(r)?;
        let batch_count = read_u64(r)? as usize;
        let transition_count = read_u64(r)? as usize;
        let mut read_ms = |dim: usize| -> Result<MeanStd, DatasetError> {
            Ok(MeanStd {
                mean: read_f64s(r, dim)?,
                std: read_f64s(r, dim)?,
            })
        };
        let state = read_ms(sd)?;
        let action = read_ms(ad)?;
        let next_state = read_ms(sd)?;
        let delta = read_ms(sd)?;
        let advantage = if has_adv { Some(read_ms(1)?) } else { None };
        let mut batches = Vec::with_capacity(batch_count);
        for _ in 0..batch_count {
            let batch_id = read_u64(r)?;
            let iteration = read_u64(r)?;
            let rollouts = read_u32(r)? as usize;
            let mut b = TransitionBatch::new(batch_id, iteration, sd, ad);
            for _ in 0..rollouts {
                b.rollout_lengths.push(read_u32(r)?);
                let mut src = [0u8];
                r.read_exact(&mut src)?;
                b.sources.push(if src[0] == 0 {
                    RolloutSource::Train
                } else {
                    RolloutSource::Test
                });
            }
            let n: usize = b.rollout_lengths.iter().map(|&l| l as usize).sum();
            b.states = read_f64s(r, n * sd)?;
            b.actions = read_f64s(r, n * ad)?;
            b.next_states = read_f64s(r, n * sd)?;
            if has_adv {
                b.advantages = Some(read_f64s(r, n)?);
            }
            batches.push(b);
        }
        let ds = OfflineDataset {
            env,
            state_dim: sd,
            action_dim: ad,
            first_iteration,
            last_iteration,
            stats: DatasetStats {
                state,
                action,
                next_state,
                delta,
                advantage,
            },
            batches,
        };
        if ds.transition_count() != transition_count {
            return Err(DatasetError::Format(format!(
                "header says {transition_count} transitions, found {}",
                ds.transition_count()
            )));
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut w = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::read_from(&mut io::BufReader::new(std::fs::File::open(path)?))
    }

    /// One JSON object per transition (see the module docs for the schema).
    pub fn export_jsonl(&self, w: &mut impl Write) -> Result<(), DatasetError> {
        #[derive(Serialize)]
        struct Line<'a> {
            batch: u64,
            iteration: u64,
            rollout: usize,
            step: usize,
            source: RolloutSource,
            s: &'a [f64],
            a: &'a [f64],
            s_next: &'a [f64],
            #[serde(skip_serializing_if = "Option::is_none")]
            advantage: Option<f64>,
        }
        for b in &self.batches {
            for (ri, (start, len)) in b.rollout_ranges().into_iter().enumerate() {
                for step in 0..len {
                    let i = start + step;
                    let line = Line {
                        batch: b.batch_id,
                        iteration: b.iteration,
                        rollout: ri,
                        step,
                        source: b.sources[ri],
                        s: b.state(i),
                        a: b.action(i),
                        s_next: b.next_state(i),
                        advantage: b.advantage(i),
                    };
                    serde_json::to_writer(&mut *w, &line).map_err(io::Error::other)?;
                    w.write_all(b"\n")?;
                }
            }
        }
        Ok(())
    }
}

fn write_f64s(w: &mut impl Write, v: &[f64]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 8);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_f64s(r: &mut impl Read, n: usize) -> io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retained_window_arithmetic() {
        assert_eq!(retained_from(1000, 0.10), 900);
        assert_eq!(retained_from(1000, 1.0), 0);
        assert_eq!(retained_from(5, 0.10), 4);
        assert_eq!(retained_from(0, 0.5), 0);
    }

    #[test]
    fn mean_std_round_trip() {
        let ms = MeanStd::of_rows(2, [[1.0, 10.0], [3.0, 10.0]].iter().map(|r| &r[..]));
        assert_eq!(ms.mean, vec![2.0, 10.0]);
        assert_eq!(ms.std, vec![1.0, STD_FLOOR]);
        let z = ms.normalize(&[4.0, 10.0]);
        assert_eq!(ms.denormalize(&z), vec![4.0, 10.0]);
    }
}
