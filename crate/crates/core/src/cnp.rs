//! Conditional neural process over transition dynamics.
//!
//! A context set of `(s, a, s')` tuples from one task is encoded tuple by
//! tuple and averaged into a latent `r`. The decoder maps `[s_q, a_q, r]` to
//! a diagonal Gaussian over the next state. The advantage variant also
//! encodes a per-tuple advantage and predicts it as an extra output.
//!
//! Inputs are normalized with the dataset statistics. The decoder predicts
//! the normalized state change, so `mu = s_q + mean_delta + std_delta * out`,
//! and `sigma = softplus(raw) * std_delta + sigma_floor` in environment
//! units. The loss is the Gaussian negative log-likelihood in environment
//! units, averaged over queries. Actions enter clipped to the box the
//! environment applies, and predicted means are projected onto the
//! observation bounds where the environment has them.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Array, Axis, Graph, GraphError, NodeId};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::envs::{EnvKind, Transition};
use crate::nets::{Activation, Mlp, MlpNodes};
use crate::norml::dataset::{DatasetStats, MeanStd, OfflineDataset, TransitionBatch};
use crate::optim::Adam;
use crate::seed::derive_rng;

const CHECKPOINT_KIND: &str = "cnp";

#[derive(Debug, thiserror::Error)]
pub enum CnpError {
    #[error("context set is empty")]
    EmptyContext,
    #[error("the advantage variant needs advantage values, but {0} has none")]
    MissingAdvantage(&'static str),
    #[error("batch {batch_id} has {len} transitions, needs {need} for context plus targets")]
    BatchTooSmall { batch_id: u64, len: usize, need: usize },
    #[error("dataset has no batches")]
    NoBatches,
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("training diverged at iteration {0}")]
    Diverged(usize),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CnpVariant {
    Plain,
    Adv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnpConfig {
    pub latent_dim: usize,
    /// Hidden widths of both the encoder and the decoder.
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    /// The learning rate decays linearly to `learning_rate * final_lr_fraction`
    /// over the run; 1 keeps it constant.
    #[serde(default = "one")]
    pub final_lr_fraction: f64,
    pub iterations: usize,
    /// Task batches per iteration.
    pub batch_tasks: usize,
    pub context_size: usize,
    pub target_size: usize,
    pub sigma_floor: f64,
    /// Window of the smoothed loss curve.
    pub smoothing_window: usize,
}

fn one() -> f64 {
    1.0
}

impl CnpConfig {
    pub fn point() -> Self {
        CnpConfig {
            latent_dim: 128,
            hidden: vec![128, 128],
            learning_rate: 3e-3,
            final_lr_fraction: 0.05,
            iterations: 20_000,
            batch_tasks: 32,
            context_size: 10,
            target_size: 10,
            sigma_floor: 1e-4,
            smoothing_window: 100,
        }
    }

    pub fn cartpole() -> Self {
        CnpConfig {
            context_size: 50,
            target_size: 50,
            ..Self::point()
        }
    }

    pub fn validate(&self) -> Result<(), CnpError> {
        let bad = |m: &str| Err(CnpError::Config(m.to_string()));
        if self.latent_dim == 0 || self.batch_tasks == 0 || self.context_size == 0 || self.target_size == 0 {
            return bad("sizes must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return bad("final_lr_fraction must be in (0, 1]");
        }
        if !(self.sigma_floor > 0.0) {
            return bad("sigma_floor must be positive");
        }
        if self.smoothing_window == 0 {
            return bad("smoothing_window must be positive");
        }
        Ok(())
    }
}

/// Gaussian prediction for one query, in environment units.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveDist {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub adv_mu: Option<f64>,
    pub adv_sigma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnpModel {
    pub env: EnvKind,
    pub variant: CnpVariant,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub stats: DatasetStats,
    pub sigma_floor: f64,
}

/// Graph handles for a [`CnpModel`].
#[derive(Clone, Debug)]
pub struct CnpNodes {
    pub encoder: MlpNodes,
    pub decoder: MlpNodes,
}

impl CnpNodes {
    pub fn ids(&self) -> Vec<NodeId> {
        let mut v = self.encoder.ids();
        v.extend(self.decoder.ids());
        v
    }
}

/// Packed, normalized inputs for a batch of tasks.
#[derive(Clone, Debug)]
pub struct CnpBatch {
    pub tasks: usize,
    /// `[n_context, context_width]`.
    pub context: Array,
    pub context_owner: Vec<usize>,
    /// `[n_query, state_dim + action_dim]`.
    pub query: Array,
    pub query_owner: Vec<usize>,
    /// Normalized targets `[n_query, target_dim]`.
    pub target: Array,
}

/// One point of the training loss curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub smoothed: f64,
}

impl CnpModel {
    pub fn new<R: Rng + ?Sized>(
        env: EnvKind,
        variant: CnpVariant,
        stats: DatasetStats,
        config: &CnpConfig,
        rng: &mut R,
    ) -> Result<Self, CnpError> {
        config.validate()?;
        if variant == CnpVariant::Adv && stats.advantage.is_none() {
            return Err(CnpError::MissingAdvantage("the dataset statistics"));
        }
        let (sd, ad) = (env.state_dim(), env.action_dim());
        let extra = (variant == CnpVariant::Adv) as usize;
        let mut enc = vec![2 * sd + ad + extra];
        enc.extend(&config.hidden);
        enc.push(config.latent_dim);
        let mut dec = vec![sd + ad + config.latent_dim];
        dec.extend(&config.hidden);
        dec.push(2 * (sd + extra));
        Ok(CnpModel {
            env,
            variant,
            encoder: Mlp::new(&enc, Activation::Relu, 1.0, rng),
            decoder: Mlp::new(&dec, Activation::Relu, 1.0, rng),
            stats,
            sigma_floor: config.sigma_floor,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.env.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.env.action_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Width of the predicted vector: the state, plus one for the advantage.
    pub fn target_dim(&self) -> usize {
        self.state_dim() + self.has_adv() as usize
    }

    fn has_adv(&self) -> bool {
        self.variant == CnpVariant::Adv
    }

    fn adv_stats(&self) -> &MeanStd {
        self.stats.advantage.as_ref().expect("advantage variant carries advantage stats")
    }

    /// Per-dimension output scales (delta std, then advantage std).
    fn output_scale(&self) -> Vec<f64> {
        let mut s = self.stats.delta.std.clone();
        if self.has_adv() {
            s.push(self.adv_stats().std[0]);
        }
        s
    }

    fn context_row_into(&self, s: &[f64], a: &[f64], s_next: &[f64], adv: Option<f64>, out: &mut Vec<f64>) -> Result<(), CnpError> {
        let st = &self.stats;
        out.extend(st.state.normalize(s));
        out.extend(st.action.normalize(&self.env.clip_action(a)));
        let delta: Vec<f64> = s_next.iter().zip(s).map(|(n, c)| n - c).collect();
        out.extend(st.delta.normalize(&delta));
        if self.has_adv() {
            let v = adv.ok_or(CnpError::MissingAdvantage("a context transition"))?;
            out.extend(self.adv_stats().normalize(&[v]));
        }
        Ok(())
    }

    fn query_row_into(&self, s: &[f64], a: &[f64], out: &mut Vec<f64>) {
        out.extend(self.stats.state.normalize(s));
        out.extend(self.stats.action.normalize(&self.env.clip_action(a)));
    }

    fn target_row_into(&self, s: &[f64], s_next: &[f64], adv: Option<f64>, out: &mut Vec<f64>) -> Result<(), CnpError> {
        let delta: Vec<f64> = s_next.iter().zip(s).map(|(n, c)| n - c).collect();
        out.extend(self.stats.delta.normalize(&delta));
        if self.has_adv() {
            let v = adv.ok_or(CnpError::MissingAdvantage("a target transition"))?;
            out.extend(self.adv_stats().normalize(&[v]));
        }
        Ok(())
    }

    fn check_dims(&self, t: &Transition) -> Result<(), CnpError> {
        if t.s.len() != self.state_dim() || t.s_next.len() != self.state_dim() || t.a.len() != self.action_dim() {
            return Err(CnpError::Dim(format!(
                "transition dims {}/{}/{} vs model {}/{}",
                t.s.len(),
                t.a.len(),
                t.s_next.len(),
                self.state_dim(),
                self.action_dim()
            )));
        }
        Ok(())
    }

    /// Per-tuple encodings `[k, latent]`.
    pub fn encode_tuples(&self, context: &[Transition]) -> Result<Array, CnpError> {
        if context.is_empty() {
            return Err(CnpError::EmptyContext);
        }
        let mut data = Vec::new();
        for t in context {
            self.check_dims(t)?;
            self.context_row_into(&t.s, &t.a, &t.s_next, t.advantage, &mut data)?;
        }
        let width = data.len() / context.len();
        Ok(self.encoder.forward(&Array::matrix(context.len(), width, data))?)
    }

    /// Mean of the per-tuple encodings. Only `s`, `a`, `s'` (and the
    /// advantage for the advantage variant) are read.
    pub fn encode_context(&self, context: &[Transition]) -> Result<Vec<f64>, CnpError> {
        let e = self.encode_tuples(context)?;
        let (k, l) = (e.rows(), e.cols());
        let mut r = vec![0.0; l];
        for i in 0..k {
            for (acc, v) in r.iter_mut().zip(e.row_slice(i)) {
                *acc += v;
            }
        }
        Ok(r.into_iter().map(|v| v / k as f64).collect())
    }

    /// Predictions for several `(s, a)` queries under latent `r`. Means are
    /// projected onto the environment's observation bounds.
    pub fn decode_queries(&self, r: &[f64], queries: &[(&[f64], &[f64])]) -> Result<Vec<PredictiveDist>, CnpError> {
        let mut preds = self.decode_raw(r, queries)?;
        if let Some((lo, hi)) = self.env.observation_bounds() {
            for p in &mut preds {
                p.mu.iter_mut().for_each(|m| *m = m.clamp(lo, hi));
            }
        }
        Ok(preds)
    }

    /// Decoder output before projection; the training loss uses this.
    fn decode_raw(&self, r: &[f64], queries: &[(&[f64], &[f64])]) -> Result<Vec<PredictiveDist>, CnpError> {
        if r.len() != self.latent_dim() {
            return Err(CnpError::Dim(format!("latent has {} entries, model uses {}", r.len(), self.latent_dim())));
        }
        let mut data = Vec::new();
        for (s, a) in queries {
            if s.len() != self.state_dim() || a.len() != self.action_dim() {
                return Err(CnpError::Dim("query shape".into()));
            }
            self.query_row_into(s, a, &mut data);
            data.extend(r);
        }
        let width = self.state_dim() + self.action_dim() + self.latent_dim();
        let out = self.decoder.forward(&Array::matrix(queries.len(), width, data))?;
        let od = self.target_dim();
        let scale = self.output_scale();
        let sd = self.state_dim();
        Ok(queries
            .iter()
            .enumerate()
            .map(|(i, (s, _))| {
                let row = out.row_slice(i);
                let sigma: Vec<f64> = (0..od).map(|j| softplus(row[od + j]) * scale[j] + self.sigma_floor).collect();
                let delta = self.stats.delta.denormalize(&row[..sd]);
                let mu = s.iter().zip(&delta).map(|(a, b)| a + b).collect();
                let (adv_mu, adv_sigma) = if self.has_adv() {
                    (Some(self.adv_stats().denormalize(&row[sd..sd + 1])[0]), Some(sigma[sd]))
                } else {
                    (None, None)
                };
                PredictiveDist {
                    mu,
                    sigma: sigma[..sd].to_vec(),
                    adv_mu,
                    adv_sigma,
                }
            })
            .collect())
    }

    pub fn decode_query(&self, r: &[f64], s: &[f64], a: &[f64]) -> Result<PredictiveDist, CnpError> {
        Ok(self.decode_queries(r, &[(s, a)])?.remove(0))
    }

    /// Mean negative log-likelihood of the queries' next states (and
    /// advantages for the advantage variant) given the context.
    pub fn loss(&self, context: &[Transition], queries: &[Transition]) -> Result<f64, CnpError> {
        let r = self.encode_context(context)?;
        let q: Vec<(&[f64], &[f64])> = queries.iter().map(|t| (t.s.as_slice(), t.a.as_slice())).collect();
        let preds = self.decode_raw(&r, &q)?;
        let mut total = 0.0;
        for (t, p) in queries.iter().zip(&preds) {
            let mut x = t.s_next.clone();
            let mut mu = p.mu.clone();
            let mut sigma = p.sigma.clone();
            if self.has_adv() {
                x.push(t.advantage.ok_or(CnpError::MissingAdvantage("a target transition"))?);
                mu.push(p.adv_mu.expect("advantage variant"));
                sigma.push(p.adv_sigma.expect("advantage variant"));
            }
            let log_std: Vec<f64> = sigma.iter().map(|s| s.ln()).collect();
            total -= crate::nets::diag_gaussian_log_density(&x, &mu, &log_std);
        }
        Ok(total / queries.len().max(1) as f64)
    }

    /// Packs one task's context and queries for the graph path.
    pub fn batch_from_transitions(&self, tasks: &[(&[Transition], &[Transition])]) -> Result<CnpBatch, CnpError> {
        let mut ctx = Vec::new();
        let mut ctx_owner = Vec::new();
        let mut q = Vec::new();
        let mut q_owner = Vec::new();
        let mut tgt = Vec::new();
        for (i, (context, queries)) in tasks.iter().enumerate() {
            if context.is_empty() {
                return Err(CnpError::EmptyContext);
            }
            for t in *context {
                self.check_dims(t)?;
                self.context_row_into(&t.s, &t.a, &t.s_next, t.advantage, &mut ctx)?;
                ctx_owner.push(i);
            }
            for t in *queries {
                self.check_dims(t)?;
                self.query_row_into(&t.s, &t.a, &mut q);
                self.target_row_into(&t.s, &t.s_next, t.advantage, &mut tgt)?;
                q_owner.push(i);
            }
        }
        Ok(self.pack(tasks.len(), ctx, ctx_owner, q, q_owner, tgt))
    }

    fn pack(&self, tasks: usize, ctx: Vec<f64>, ctx_owner: Vec<usize>, q: Vec<f64>, q_owner: Vec<usize>, tgt: Vec<f64>) -> CnpBatch {
        let (sd, ad) = (self.state_dim(), self.action_dim());
        let cw = 2 * sd + ad + self.has_adv() as usize;
        CnpBatch {
            tasks,
            context: Array::matrix(ctx_owner.len(), cw, ctx),
            query: Array::matrix(q_owner.len(), sd + ad, q),
            target: Array::matrix(q_owner.len(), self.target_dim(), tgt),
            context_owner: ctx_owner,
            query_owner: q_owner,
        }
    }

    /// Samples `context_size + target_size` distinct transitions from each
    /// chosen dataset batch.
    fn sample_batch<R: Rng + ?Sized>(
        &self,
        batches: &[TransitionBatch],
        config: &CnpConfig,
        rng: &mut R,
    ) -> Result<CnpBatch, CnpError> {
        let (k, m) = (config.context_size, config.target_size);
        let mut ctx = Vec::new();
        let mut ctx_owner = Vec::new();
        let mut q = Vec::new();
        let mut q_owner = Vec::new();
        let mut tgt = Vec::new();
        for task in 0..config.batch_tasks {
            let b = &batches[rng.random_range(0..batches.len())];
            let idx = sample(rng, b.len(), k + m);
            for (j, i) in idx.iter().enumerate() {
                if j < k {
                    self.context_row_into(b.state(i), b.action(i), b.next_state(i), b.advantage(i), &mut ctx)?;
                    ctx_owner.push(task);
                } else {
                    self.query_row_into(b.state(i), b.action(i), &mut q);
                    self.target_row_into(b.state(i), b.next_state(i), b.advantage(i), &mut tgt)?;
                    q_owner.push(task);
                }
            }
        }
        Ok(self.pack(config.batch_tasks, ctx, ctx_owner, q, q_owner, tgt))
    }

    pub fn bind(&self, g: &mut Graph) -> Result<CnpNodes, GraphError> {
        Ok(CnpNodes {
            encoder: self.encoder.bind(g)?,
            decoder: self.decoder.bind(g)?,
        })
    }

    /// Mean query NLL (environment units) of a packed batch, recorded on `g`.
    pub fn loss_node(&self, g: &mut Graph, nodes: &CnpNodes, batch: &CnpBatch) -> Result<NodeId, CnpError> {
        let nc = batch.context_owner.len();
        let nq = batch.query_owner.len();
        let mut counts = vec![0usize; batch.tasks];
        for &o in &batch.context_owner {
            counts[o] += 1;
        }
        if counts.contains(&0) {
            return Err(CnpError::EmptyContext);
        }
        let mut avg = Array::zeros(batch.tasks, nc);
        for (i, &o) in batch.context_owner.iter().enumerate() {
            avg.set(o, i, 1.0 / counts[o] as f64);
        }
        let mut pick = Array::zeros(nq, batch.tasks);
        for (i, &o) in batch.query_owner.iter().enumerate() {
            pick.set(i, o, 1.0);
        }
        let ctx = g.constant(batch.context.clone())?;
        let enc = nodes.encoder.forward(g, ctx)?;
        let avg = g.constant(avg)?;
        let r = g.matmul(avg, enc)?;
        let pick = g.constant(pick)?;
        let rq = g.matmul(pick, r)?;
        let q = g.constant(batch.query.clone())?;
        let din = g.concat(&[q, rq], Axis::Cols)?;
        let out = nodes.decoder.forward(g, din)?;
        let od = self.target_dim();
        let mu = g.slice(out, Axis::Cols, 0, od)?;
        let raw = g.slice(out, Axis::Cols, od, od)?;
        let scale = self.output_scale();
        let floor: Vec<f64> = scale.iter().map(|s| self.sigma_floor / s).collect();
        let sp = g.softplus(raw)?;
        let floor = g.constant(Array::row(&floor))?;
        let sigma = g.add_row(sp, floor)?;
        let log_sigma = g.log(sigma)?;
        let target = g.constant(batch.target.clone())?;
        let ld = g.gaussian_log_density(target, mu, log_sigma)?;
        let mean = g.mean(ld)?;
        let log_scale: f64 = scale.iter().map(|s| s.ln()).sum();
        Ok(g.affine(mean, -1.0, log_scale)?)
    }

    pub fn arrays(&self) -> Vec<Array> {
        let mut v = self.encoder.arrays();
        v.extend(self.decoder.arrays());
        v
    }

    pub fn with_arrays(&self, arrays: &[Array]) -> Self {
        let ne = 2 * self.encoder.layers.len();
        CnpModel {
            encoder: self.encoder.with_arrays(&arrays[..ne]),
            decoder: self.decoder.with_arrays(&arrays[ne..]),
            ..self.clone()
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "env": self.env,
            "variant": self.variant,
            "encoder_sizes": self.encoder.sizes(),
            "decoder_sizes": self.decoder.sizes(),
            "sigma_floor": self.sigma_floor,
            "stats": self.stats,
        });
        let mut c = Checkpoint::new(CHECKPOINT_KIND, meta);
        c.insert_list("encoder", &self.encoder.arrays());
        c.insert_list("decoder", &self.decoder.arrays());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, CnpError> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let field = |name: &str| -> Result<serde_json::Value, CnpError> {
            c.metadata
                .get(name)
                .cloned()
                .ok_or_else(|| CheckpointError::Format(format!("metadata lacks {name}")).into())
        };
        let env: EnvKind = serde_json::from_value(field("env")?).map_err(CheckpointError::from)?;
        let variant: CnpVariant = serde_json::from_value(field("variant")?).map_err(CheckpointError::from)?;
        let enc: Vec<usize> = serde_json::from_value(field("encoder_sizes")?).map_err(CheckpointError::from)?;
        let dec: Vec<usize> = serde_json::from_value(field("decoder_sizes")?).map_err(CheckpointError::from)?;
        let sigma_floor: f64 = serde_json::from_value(field("sigma_floor")?).map_err(CheckpointError::from)?;
        let stats: DatasetStats = serde_json::from_value(field("stats")?).map_err(CheckpointError::from)?;
        let mut rng = derive_rng(0, &[]);
        let encoder = Mlp::new(&enc, Activation::Relu, 1.0, &mut rng);
        let decoder = Mlp::new(&dec, Activation::Relu, 1.0, &mut rng);
        let encoder = encoder.with_arrays(&c.get_list("encoder", 2 * (enc.len() - 1))?);
        let decoder = decoder.with_arrays(&c.get_list("decoder", 2 * (dec.len() - 1))?);
        Ok(CnpModel {
            env,
            variant,
            encoder,
            decoder,
            stats,
            sigma_floor,
        })
    }
}

/// Trailing-window means of `losses`.
pub fn smooth(losses: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(losses.len());
    let mut acc = 0.0;
    for i in 0..losses.len() {
        acc += losses[i];
        if i >= window {
            acc -= losses[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Trains a fresh model on `dataset`. `on_record` sees every loss record as
/// it is produced.
pub fn train_cnp(
    dataset: &OfflineDataset,
    variant: CnpVariant,
    config: &CnpConfig,
    seed: u64,
    mut on_record: impl FnMut(&LossRecord),
) -> Result<(CnpModel, Vec<LossRecord>), CnpError> {
    config.validate()?;
    if variant == CnpVariant::Adv && !dataset.has_advantages() {
        return Err(CnpError::MissingAdvantage("the dataset"));
    }
    if dataset.batches.is_empty() {
        return Err(CnpError::NoBatches);
    }
    let need = config.context_size + config.target_size;
    if let Some(b) = dataset.batches.iter().find(|b| b.len() < need) {
        return Err(CnpError::BatchTooSmall {
            batch_id: b.batch_id,
            len: b.len(),
            need,
        });
    }
    let mut rng = derive_rng(seed, &[2]);
    let mut model = CnpModel::new(dataset.env, variant, dataset.stats.clone(), config, &mut rng)?;
    let mut params = model.arrays();
    let mut adam = Adam::new(config.learning_rate, &params);
    let mut records = Vec::with_capacity(config.iterations);
    let mut window = std::collections::VecDeque::with_capacity(config.smoothing_window);
    let mut window_sum = 0.0;
    for it in 0..config.iterations {
        let progress = it as f64 / config.iterations as f64;
        adam.lr = config.learning_rate * (1.0 - progress * (1.0 - config.final_lr_fraction));
        let batch = model.sample_batch(&dataset.batches, config, &mut rng)?;
        let mut g = Graph::new();
        let nodes = model.bind(&mut g)?;
        let loss = model.loss_node(&mut g, &nodes, &batch).map_err(|e| match e {
            CnpError::Graph(GraphError::NonFinite { .. }) => CnpError::Diverged(it),
            other => other,
        })?;
        let grads = g.grad_values(loss, &nodes.ids())?;
        let value = g.value(loss).item();
        adam.step(&mut params, &grads);
        if params.iter().any(|p| !p.is_finite()) {
            return Err(CnpError::Diverged(it));
        }
        model = model.with_arrays(&params);
        window.push_back(value);
        window_sum += value;
        if window.len() > config.smoothing_window {
            window_sum -= window.pop_front().expect("non-empty window");
        }
        let rec = LossRecord {
            iteration: it,
            loss: value,
            smoothed: window_sum / window.len() as f64,
        };
        on_record(&rec);
        records.push(rec);
    }
    Ok((model, records))
}
