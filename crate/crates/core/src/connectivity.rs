//! Learned connectivity between observations.
//!
//! The contrastive model scores a transition `o → o'` with the log-bilinear
//! logit `g(o')ᵀ W g(o)` and is trained by classifying the true `k`-step
//! successor among same-context negatives. The binary classifier is the
//! thresholded-graph baseline, trained with cross-entropy on near/far pairs.

use std::collections::BTreeMap;

use htm_tensor::{
    bce_logit, log_sum_exp, Activation, Adam, Checkpoint, CheckpointReader, Matrix, Mlp, Tape, TensorError,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::TransitionDataset;
use crate::error::{HtmError, Result};
use crate::generator::{hallucinate, hcat, split_contexts, CvaeModel};
use crate::rng::{derive, stream};
use crate::train::{ensure_finite, EpochRecord, TrainingLog};
use crate::world::{encode_context, ContextEncoding, Observation, WorldConfig};

pub const CPC_KIND: [u8; 4] = *b"CPCE";
pub const SPTM_KIND: [u8; 4] = *b"SPTM";

/// Hallucinated observations available per context id.
pub type HallucinationPool = BTreeMap<u64, Vec<Observation>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpcConfig {
    /// Embedding size.
    pub latent: usize,
    pub hidden: usize,
    pub depth: usize,
    /// Positive offsets are drawn from `1..=horizon`.
    pub horizon: usize,
    /// Candidates per anchor (one positive, `candidates - 1` negatives).
    pub candidates: usize,
    /// Fraction of negatives drawn from hallucinations when available.
    pub hallucinated_frac: f64,
    /// Generator samples drawn per training context for those negatives.
    pub pool_per_context: usize,
    /// Each hallucinated negative is the pool draw closest to the anchor
    /// among this many uniform draws; 1 samples the pool uniformly.
    pub hallucinated_tournament: usize,
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub validation_batches: usize,
    pub validation_frac: f64,
    pub seed: u64,
}

impl Default for CpcConfig {
    fn default() -> Self {
        Self {
            latent: 16,
            hidden: 128,
            depth: 3,
            horizon: 5,
            candidates: 16,
            hallucinated_frac: 0.25,
            pool_per_context: 100,
            hallucinated_tournament: 1,
            batch: 64,
            lr: 1e-3,
            epochs: 30,
            steps_per_epoch: 100,
            validation_batches: 8,
            validation_frac: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConnectivityModel {
    /// `o ⊕ c → z`.
    pub encoder: Mlp,
    /// Bilinear form, `d × d`.
    pub w: Matrix,
    pub horizon: usize,
}

impl ConnectivityModel {
    /// Fan-in initialised encoder, `W = 0`.
    pub fn new(obs_dim: usize, ctx_dim: usize, cfg: &CpcConfig) -> Result<Self> {
        let mut rng = stream(cfg.seed, 0xC9C);
        let mut sizes = vec![obs_dim + ctx_dim];
        sizes.extend(std::iter::repeat_n(cfg.hidden, cfg.depth));
        sizes.push(cfg.latent);
        let encoder = Mlp::new(&sizes, Activation::Tanh, Activation::Identity, &mut rng)?;
        Ok(Self {
            encoder,
            w: Matrix::zeros(cfg.latent, cfg.latent),
            horizon: cfg.horizon,
        })
    }

    pub fn latent(&self) -> usize {
        self.w.rows()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut p = self.encoder.params();
        p.push(&self.w);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.encoder.params_mut();
        p.push(&mut self.w);
        p
    }

    pub fn set_params(&mut self, values: &[Matrix]) {
        for (dst, src) in self.params_mut().into_iter().zip(values) {
            *dst = src.clone();
        }
    }

    /// Embeddings of `nodes` under context `ctx`, one row each.
    pub fn encode(&self, nodes: &[Observation], ctx: &ContextEncoding) -> Result<Matrix> {
        Ok(self.encoder.forward(&stack_with_context(nodes, ctx)?)?)
    }

    /// `g(o_to)ᵀ W g(o_from)`; not symmetric in its arguments.
    pub fn score_pair(&self, from: &Observation, to: &Observation, ctx: &ContextEncoding) -> Result<f64> {
        let z = self.encode(&[from.clone(), to.clone()], ctx)?;
        Ok(bilinear(z.row(1), &self.w, z.row(0)))
    }

    /// Records the contrastive loss of `batch`; returns the loss node and the
    /// tape handles of the parameters in [`ConnectivityModel::params`] order.
    fn loss_on_tape(&self, tape: &mut Tape, batch: &CpcBatch, frozen: bool) -> Result<(htm_tensor::Var, Vec<htm_tensor::Var>)> {
        batch.check()?;
        let enc = if frozen {
            self.encoder.bind_frozen(tape)
        } else {
            self.encoder.bind(tape)
        };
        let w = if frozen {
            tape.constant(self.w.clone())
        } else {
            tape.param(self.w.clone())
        };
        let n = batch.group();
        let anchors = tape.constant(hcat(&batch.anchors, &batch.ctx));
        let cand_ctx = repeat_rows(&batch.ctx, n);
        let cands = tape.constant(hcat(&batch.candidates, &cand_ctx));
        let za = self.encoder.forward_on_tape(tape, &enc, anchors)?;
        let zc = self.encoder.forward_on_tape(tape, &enc, cands)?;
        let wt = tape.transpose(w);
        let query = tape.matmul(za, wt)?;
        let logits = tape.group_dot(zc, query, n)?;
        let loss = tape.softmax_xent_first(logits)?;
        let mut vars = enc.as_slice().to_vec();
        vars.push(w);
        Ok((loss, vars))
    }

    pub fn loss_and_grads(&self, batch: &CpcBatch) -> Result<(f64, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let (loss, vars) = self.loss_on_tape(&mut tape, batch, false)?;
        let mut g = tape.backward(loss)?;
        Ok((tape.value(loss).item()?, vars.into_iter().map(|v| g.take(v)).collect()))
    }

    /// Candidate logits for each anchor, `B × N`, positive in column 0.
    pub fn batch_logits(&self, batch: &CpcBatch) -> Result<Matrix> {
        batch.check()?;
        let n = batch.group();
        let za = self.encoder.forward(&hcat(&batch.anchors, &batch.ctx))?;
        let zc = self
            .encoder
            .forward(&hcat(&batch.candidates, &repeat_rows(&batch.ctx, n)))?;
        let mut out = Matrix::zeros(batch.anchors.rows(), n);
        for b in 0..batch.anchors.rows() {
            for j in 0..n {
                out.set(b, j, bilinear(zc.row(b * n + j), &self.w, za.row(b)));
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(CPC_KIND);
        c.dims.extend([self.latent() as u32, self.horizon as u32]);
        c.push_mlp(&self.encoder);
        c.tensors.push(self.w.clone());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let mut rd = CheckpointReader::new(c);
        let latent = rd.dim()? as usize;
        let horizon = rd.dim()? as usize;
        let encoder = rd.mlp()?;
        if encoder.output_dim() != latent {
            return Err(TensorError::Checkpoint("encoder output does not match W".into()).into());
        }
        let w = rd.tensor(latent, latent)?;
        rd.finish()?;
        Ok(Self { encoder, w, horizon })
    }
}

/// `aᵀ W b`.
pub(crate) fn bilinear(a: &[f64], w: &Matrix, b: &[f64]) -> f64 {
    let mut total = 0.0;
    for (i, ai) in a.iter().enumerate() {
        let row = w.row(i);
        total += ai * row.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    }
    total
}

fn repeat_rows(m: &Matrix, times: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows() * times, m.cols());
    for r in 0..m.rows() {
        for k in 0..times {
            out.row_mut(r * times + k).copy_from_slice(m.row(r));
        }
    }
    out
}

/// Rows `o_i ⊕ c`.
pub(crate) fn stack_with_context(nodes: &[Observation], ctx: &ContextEncoding) -> Result<Matrix> {
    let width = nodes.first().map(|o| o.len()).unwrap_or(0) + ctx.len();
    let mut out = Matrix::zeros(nodes.len(), width);
    for (i, o) in nodes.iter().enumerate() {
        if o.len() + ctx.len() != width {
            return Err(TensorError::Shape(format!("observation {i} has length {}", o.len())).into());
        }
        let row = out.row_mut(i);
        row[..o.len()].copy_from_slice(&o.data);
        row[o.len()..].copy_from_slice(ctx.as_slice());
    }
    Ok(out)
}

/// One contrastive minibatch: candidate row `b·N` is the positive for
/// anchor `b`, rows `b·N+1 .. b·N+N-1` its negatives.
#[derive(Clone, Debug)]
pub struct CpcBatch {
    pub anchors: Matrix,
    pub candidates: Matrix,
    pub ctx: Matrix,
    pub offsets: Vec<usize>,
    /// Per candidate row: drawn from hallucinations.
    pub hallucinated: Vec<bool>,
}

impl CpcBatch {
    pub fn group(&self) -> usize {
        if self.anchors.rows() == 0 {
            0
        } else {
            self.candidates.rows() / self.anchors.rows()
        }
    }

    fn check(&self) -> Result<()> {
        if self.anchors.rows() == 0 {
            return Err(HtmError::Empty("contrastive batch".into()));
        }
        let n = self.group();
        if n < 1 || self.candidates.rows() != n * self.anchors.rows() || self.ctx.rows() != self.anchors.rows() {
            return Err(TensorError::Shape(format!(
                "contrastive batch: {} anchors, {} candidates, {} contexts",
                self.anchors.rows(),
                self.candidates.rows(),
                self.ctx.rows()
            ))
            .into());
        }
        Ok(())
    }
}

/// Mean softmax cross-entropy of the positive among its candidates,
/// computed in log space.
pub fn cpc_loss(model: &ConnectivityModel, batch: &CpcBatch) -> Result<f64> {
    Ok(cpc_loss_from_logits(&model.batch_logits(batch)?))
}

pub fn cpc_loss_from_logits(logits: &Matrix) -> f64 {
    let n = logits.rows().max(1) as f64;
    (0..logits.rows())
        .map(|b| {
            let row = logits.row(b);
            log_sum_exp(row) - row[0]
        })
        .sum::<f64>()
        / n
}

/// Encoded dataset used by the samplers: context encodings and per-context
/// trajectory lists.
struct SamplerIndex<'a> {
    data: &'a TransitionDataset,
    encodings: BTreeMap<u64, ContextEncoding>,
    /// Trajectory indices usable as anchors (more than `horizon` transitions).
    anchor_trajs: Vec<usize>,
}

impl<'a> SamplerIndex<'a> {
    fn new(data: &'a TransitionDataset, world: &WorldConfig, min_len: usize, contexts: Option<&[u64]>) -> Result<Self> {
        let keep = |id: u64| contexts.is_none_or(|ids| ids.contains(&id));
        let encodings = data
            .contexts
            .iter()
            .filter(|c| keep(c.id))
            .map(|c| (c.id, encode_context(c, world, data.mode)))
            .collect();
        let anchor_trajs: Vec<usize> = data
            .trajectories
            .iter()
            .enumerate()
            .filter(|(_, t)| keep(t.context_id) && t.len() >= min_len)
            .map(|(i, _)| i)
            .collect();
        if anchor_trajs.is_empty() {
            return Err(HtmError::Empty(format!(
                "no trajectory with at least {min_len} transitions"
            )));
        }
        Ok(Self {
            data,
            encodings,
            anchor_trajs,
        })
    }

    /// Uniform same-context observation; returns (trajectory index, t).
    fn random_in_context(&self, context_id: u64, rng: &mut ChaCha8Rng) -> Result<(usize, usize)> {
        let trajs = self.data.trajectories_of(context_id);
        if trajs.is_empty() {
            return Err(HtmError::Empty(format!("context {context_id} has no data")));
        }
        let ti = trajs[rng.random_range(0..trajs.len())];
        let t = rng.random_range(0..self.data.trajectories[ti].observations.len());
        Ok((ti, t))
    }
}

/// `per_context` generator samples for every context of `data`, used as
/// extra contrastive negatives.
pub fn hallucination_pool(
    generator: &CvaeModel,
    data: &TransitionDataset,
    world: &WorldConfig,
    per_context: usize,
    seed: u64,
) -> Result<HallucinationPool> {
    data.contexts
        .iter()
        .map(|c| {
            let enc = encode_context(c, world, data.mode);
            let set = hallucinate(generator, &enc, data.mode, per_context, derive(seed, c.id))?;
            Ok((c.id, set.observations))
        })
        .collect()
}

/// Draws `cfg.batch` anchors with a `k`-step positive (`k` uniform in
/// `1..=horizon`) and `candidates - 1` same-context negatives, a
/// `hallucinated_frac` share of them from `pool` when it has samples for the
/// context.
pub fn sample_cpc_batch(
    data: &TransitionDataset,
    world: &WorldConfig,
    pool: Option<&HallucinationPool>,
    cfg: &CpcConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CpcBatch> {
    let index = SamplerIndex::new(data, world, cfg.horizon, None)?;
    sample_with_index(&index, pool, cfg, rng)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sample_with_index(
    index: &SamplerIndex,
    pool: Option<&HallucinationPool>,
    cfg: &CpcConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CpcBatch> {
    if cfg.candidates < 2 || cfg.horizon == 0 || cfg.batch == 0 {
        return Err(HtmError::Config {
            key: "cpc".into(),
            msg: "need candidates >= 2, horizon >= 1, batch >= 1".into(),
        });
    }
    let data = index.data;
    let n = cfg.candidates;
    let n_halluc = ((cfg.hallucinated_frac.clamp(0.0, 1.0) * (n - 1) as f64).round() as usize).min(n - 1);
    let mut anchors = Vec::with_capacity(cfg.batch);
    let mut cands = Vec::with_capacity(cfg.batch * n);
    let mut ctxs = Vec::with_capacity(cfg.batch);
    let mut offsets = Vec::with_capacity(cfg.batch);
    let mut hallucinated = Vec::with_capacity(cfg.batch * n);
    for _ in 0..cfg.batch {
        let ti = index.anchor_trajs[rng.random_range(0..index.anchor_trajs.len())];
        let traj = &data.trajectories[ti];
        let k = rng.random_range(1..=cfg.horizon);
        let t = rng.random_range(0..=traj.len() - k);
        anchors.push(traj.observations[t].data.as_slice());
        cands.push(traj.observations[t + k].data.as_slice());
        hallucinated.push(false);
        offsets.push(k);
        ctxs.push(index.encodings[&traj.context_id].as_slice());
        let fakes = pool
            .and_then(|p| p.get(&traj.context_id))
            .filter(|v| !v.is_empty());
        let n_fake = if fakes.is_some() { n_halluc } else { 0 };
        for j in 0..n - 1 {
            if j < n_fake {
                let fakes = fakes.expect("checked above");
                let anchor = traj.observations[t].data.as_slice();
                let pick = (0..cfg.hallucinated_tournament.max(1))
                    .map(|_| &fakes[rng.random_range(0..fakes.len())].data)
                    .map(|f| (sq_dist(f, anchor), f))
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .expect("at least one draw")
                    .1;
                cands.push(pick.as_slice());
                hallucinated.push(true);
            } else {
                let (nti, nt) = loop {
                    let pick = index.random_in_context(traj.context_id, rng)?;
                    if pick != (ti, t + k) {
                        break pick;
                    }
                };
                cands.push(data.trajectories[nti].observations[nt].data.as_slice());
                hallucinated.push(false);
            }
        }
    }
    Ok(CpcBatch {
        anchors: Matrix::from_rows(&anchors)?,
        candidates: Matrix::from_rows(&cands)?,
        ctx: Matrix::from_rows(&ctxs)?,
        offsets,
        hallucinated,
    })
}

/// Fits the contrastive connectivity model. The validation curve's
/// `extra` field carries the mutual-information bound `ln N - loss`.
pub fn train_cpc(
    data: &TransitionDataset,
    world: &WorldConfig,
    pool: Option<&HallucinationPool>,
    cfg: &CpcConfig,
) -> Result<(ConnectivityModel, TrainingLog)> {
    let ids: Vec<u64> = data.contexts.iter().map(|c| c.id).collect();
    let (train_ids, val_ids) = split_contexts(&ids, cfg.validation_frac, cfg.seed);
    let train_index = SamplerIndex::new(data, world, cfg.horizon, Some(&train_ids))?;
    let val_index = if val_ids.is_empty() {
        None
    } else {
        Some(SamplerIndex::new(data, world, cfg.horizon, Some(&val_ids))?)
    };
    let obs_dim = data.trajectories[train_index.anchor_trajs[0]].observations[0].len();
    let ctx_dim = train_index.encodings.values().next().map(|e| e.len()).unwrap_or(0);
    let mut model = ConnectivityModel::new(obs_dim, ctx_dim, cfg)?;

    let mut vrng = stream(derive(cfg.seed, 0x7A1), 1);
    let val_batches = (0..cfg.validation_batches)
        .map(|_| sample_with_index(val_index.as_ref().unwrap_or(&train_index), pool, cfg, &mut vrng))
        .collect::<Result<Vec<_>>>()?;
    let validate = |m: &ConnectivityModel| -> Result<f64> {
        let mut s = 0.0;
        for b in &val_batches {
            s += cpc_loss(m, b)?;
        }
        Ok(s / val_batches.len().max(1) as f64)
    };

    let ln_n = (cfg.candidates as f64).ln();
    let mut opt = Adam::new(&model.params(), cfg.lr);
    let mut rng = stream(cfg.seed, 0xC9C7);
    let mut log = TrainingLog::default();
    let v0 = validate(&model)?;
    log.epochs.push(EpochRecord {
        epoch: 0,
        train_loss: None,
        val_loss: v0,
        extra: Some(mi_bound(v0, ln_n)),
    });
    let mut best = (v0, model.params().into_iter().cloned().collect::<Vec<_>>());
    for epoch in 1..=cfg.epochs {
        let mut sum = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let batch = sample_with_index(&train_index, pool, cfg, &mut rng)?;
            let (loss, grads) = model.loss_and_grads(&batch)?;
            ensure_finite("contrastive loss", loss, epoch)?;
            opt.step(&mut model.params_mut(), &grads)?;
            sum += loss;
        }
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(HtmError::Divergence(format!("contrastive parameters non-finite at epoch {epoch}")));
        }
        let val = validate(&model)?;
        ensure_finite("contrastive validation loss", val, epoch)?;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: Some(sum / cfg.steps_per_epoch.max(1) as f64),
            val_loss: val,
            extra: Some(mi_bound(val, ln_n)),
        });
        if val < best.0 {
            best = (val, model.params().into_iter().cloned().collect());
        }
    }
    model.set_params(&best.1);
    Ok((model, log))
}

fn mi_bound(loss: f64, ln_n: f64) -> f64 {
    ln_n - loss
}

/// Fraction of `anchors` held-out anchors whose true `k`-step successor
/// ranks within the top `top_frac` of `candidates` same-context candidates
/// (the successor plus random observations) by logit.
pub fn successor_ranking_rate(
    model: &ConnectivityModel,
    data: &TransitionDataset,
    world: &WorldConfig,
    context_id: u64,
    anchors: usize,
    candidates: usize,
    top_frac: f64,
    seed: u64,
) -> Result<f64> {
    let index = SamplerIndex::new(data, world, model.horizon, Some(&[context_id]))?;
    let ctx = &index.encodings[&context_id];
    let mut rng = stream(seed, 0x4A4E);
    let cutoff = ((candidates as f64 * top_frac).floor() as usize).max(1);
    let mut hits = 0;
    for _ in 0..anchors {
        let ti = index.anchor_trajs[rng.random_range(0..index.anchor_trajs.len())];
        let traj = &data.trajectories[ti];
        let k = rng.random_range(1..=model.horizon);
        let t = rng.random_range(0..=traj.len() - k);
        let mut nodes = vec![traj.observations[t].clone(), traj.observations[t + k].clone()];
        while nodes.len() < candidates + 1 {
            let pick = index.random_in_context(context_id, &mut rng)?;
            if pick != (ti, t + k) {
                nodes.push(data.trajectories[pick.0].observations[pick.1].clone());
            }
        }
        let z = model.encode(&nodes, ctx)?;
        let anchor = z.row(0);
        let target = bilinear(z.row(1), &model.w, anchor);
        let better = (2..nodes.len())
            .filter(|&i| bilinear(z.row(i), &model.w, anchor) > target)
            .count();
        if better < cutoff {
            hits += 1;
        }
    }
    Ok(hits as f64 / anchors.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Binary classifier baseline

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SptmConfig {
    pub latent: usize,
    pub hidden: usize,
    pub depth: usize,
    /// Pairs at most this many steps apart are positive.
    pub horizon: usize,
    /// Pairs at least this many steps apart (or from different
    /// trajectories) are negative.
    pub negative_gap: usize,
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub validation_batches: usize,
    pub validation_frac: f64,
    pub seed: u64,
}

impl Default for SptmConfig {
    fn default() -> Self {
        Self {
            latent: 16,
            hidden: 64,
            depth: 2,
            horizon: 5,
            negative_gap: 20,
            batch: 128,
            lr: 1e-3,
            epochs: 20,
            steps_per_epoch: 100,
            validation_batches: 8,
            validation_frac: 0.1,
            seed: 0,
        }
    }
}

/// Labelling rule: `Some(true)` within `horizon` steps, `Some(false)` at
/// `negative_gap` or more (`None` offset = different trajectory), otherwise
/// excluded.
pub fn sptm_label(offset: Option<usize>, horizon: usize, negative_gap: usize) -> Option<bool> {
    match offset {
        None => Some(false),
        Some(k) if k <= horizon => Some(true),
        Some(k) if k >= negative_gap => Some(false),
        Some(_) => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SptmClassifier {
    pub encoder: Mlp,
    /// `z_from ⊕ z_to → logit`.
    pub head: Mlp,
    pub horizon: usize,
    pub negative_gap: usize,
}

#[derive(Clone, Debug)]
pub struct SptmBatch {
    pub from: Matrix,
    pub to: Matrix,
    pub ctx: Matrix,
    pub labels: Vec<f64>,
}

impl SptmClassifier {
    pub fn new(obs_dim: usize, ctx_dim: usize, cfg: &SptmConfig) -> Result<Self> {
        let mut rng = stream(cfg.seed, 0x5B7);
        let mut sizes = vec![obs_dim + ctx_dim];
        sizes.extend(std::iter::repeat_n(cfg.hidden, cfg.depth));
        sizes.push(cfg.latent);
        let encoder = Mlp::new(&sizes, Activation::Tanh, Activation::Identity, &mut rng)?;
        let head = Mlp::new(
            &[2 * cfg.latent, cfg.hidden, 1],
            Activation::Tanh,
            Activation::Identity,
            &mut rng,
        )?;
        Ok(Self {
            encoder,
            head,
            horizon: cfg.horizon,
            negative_gap: cfg.negative_gap,
        })
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut p = self.encoder.params();
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.encoder.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    pub fn set_params(&mut self, values: &[Matrix]) {
        for (dst, src) in self.params_mut().into_iter().zip(values) {
            *dst = src.clone();
        }
    }

    pub fn encode(&self, nodes: &[Observation], ctx: &ContextEncoding) -> Result<Matrix> {
        Ok(self.encoder.forward(&stack_with_context(nodes, ctx)?)?)
    }

    /// Classifier logit for the pair `from → to`.
    pub fn logit(&self, from: &Observation, to: &Observation, ctx: &ContextEncoding) -> Result<f64> {
        let z = self.encode(&[from.clone(), to.clone()], ctx)?;
        let pair: Vec<f64> = z.row(0).iter().chain(z.row(1)).copied().collect();
        Ok(self.head.apply(&pair)?[0])
    }

    /// Logits of all rows `(from_i, to_i)` given precomputed embeddings.
    pub fn logits_from_codes(&self, from: &Matrix, to: &Matrix) -> Result<Vec<f64>> {
        Ok(self.head.forward(&hcat(from, to))?.into_vec())
    }

    fn loss_on_tape(&self, tape: &mut Tape, batch: &SptmBatch, frozen: bool) -> Result<(htm_tensor::Var, Vec<htm_tensor::Var>)> {
        if batch.labels.is_empty() {
            return Err(HtmError::Empty("classifier batch".into()));
        }
        let enc = if frozen { self.encoder.bind_frozen(tape) } else { self.encoder.bind(tape) };
        let head = if frozen { self.head.bind_frozen(tape) } else { self.head.bind(tape) };
        let a = tape.constant(hcat(&batch.from, &batch.ctx));
        let b = tape.constant(hcat(&batch.to, &batch.ctx));
        let za = self.encoder.forward_on_tape(tape, &enc, a)?;
        let zb = self.encoder.forward_on_tape(tape, &enc, b)?;
        let pair = tape.concat_cols(&[za, zb])?;
        let logit = self.head.forward_on_tape(tape, &head, pair)?;
        let loss = tape.bce_with_logits(logit, &batch.labels)?;
        let vars = enc.as_slice().iter().chain(head.as_slice()).copied().collect();
        Ok((loss, vars))
    }

    pub fn loss_and_grads(&self, batch: &SptmBatch) -> Result<(f64, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let (loss, vars) = self.loss_on_tape(&mut tape, batch, false)?;
        let mut g = tape.backward(loss)?;
        Ok((tape.value(loss).item()?, vars.into_iter().map(|v| g.take(v)).collect()))
    }

    pub fn batch_logits(&self, batch: &SptmBatch) -> Result<Vec<f64>> {
        let za = self.encoder.forward(&hcat(&batch.from, &batch.ctx))?;
        let zb = self.encoder.forward(&hcat(&batch.to, &batch.ctx))?;
        self.logits_from_codes(&za, &zb)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(SPTM_KIND);
        c.dims.extend([self.horizon as u32, self.negative_gap as u32]);
        c.push_mlp(&self.encoder);
        c.push_mlp(&self.head);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let mut rd = CheckpointReader::new(c);
        let horizon = rd.dim()? as usize;
        let negative_gap = rd.dim()? as usize;
        let encoder = rd.mlp()?;
        let head = rd.mlp()?;
        rd.finish()?;
        if head.input_dim() != 2 * encoder.output_dim() || head.output_dim() != 1 {
            return Err(TensorError::Checkpoint("classifier head does not match encoder".into()).into());
        }
        Ok(Self {
            encoder,
            head,
            horizon,
            negative_gap,
        })
    }
}

/// Mean binary cross-entropy of `sigmoid(logit)` against the labels.
pub fn sptm_bce_loss(model: &SptmClassifier, batch: &SptmBatch) -> Result<f64> {
    if batch.labels.is_empty() {
        return Err(HtmError::Empty("classifier batch".into()));
    }
    let logits = model.batch_logits(batch)?;
    Ok(logits
        .iter()
        .zip(&batch.labels)
        .map(|(&x, &y)| bce_logit(x, y))
        .sum::<f64>()
        / batch.labels.len() as f64)
}

/// Half positives (`k ≤ horizon` steps ahead in the same trajectory), half
/// same-context negatives; candidate pairs the labelling rule excludes are
/// redrawn.
pub fn sample_sptm_batch(
    data: &TransitionDataset,
    world: &WorldConfig,
    cfg: &SptmConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SptmBatch> {
    let index = SamplerIndex::new(data, world, cfg.horizon, None)?;
    sample_sptm_with_index(&index, cfg, rng)
}

fn sample_sptm_with_index(index: &SamplerIndex, cfg: &SptmConfig, rng: &mut ChaCha8Rng) -> Result<SptmBatch> {
    if cfg.horizon == 0 || cfg.negative_gap <= cfg.horizon || cfg.batch == 0 {
        return Err(HtmError::Config {
            key: "sptm.negative_gap".into(),
            msg: "need 1 <= horizon < negative_gap and batch >= 1".into(),
        });
    }
    let data = index.data;
    let (mut from, mut to, mut ctx, mut labels) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..cfg.batch {
        let ti = index.anchor_trajs[rng.random_range(0..index.anchor_trajs.len())];
        let traj = &data.trajectories[ti];
        let (dst, label) = if i % 2 == 0 {
            let k = rng.random_range(1..=cfg.horizon);
            let t = rng.random_range(0..=traj.len() - k);
            from.push(traj.observations[t].data.as_slice());
            (&traj.observations[t + k], true)
        } else {
            let t = rng.random_range(0..traj.observations.len());
            from.push(traj.observations[t].data.as_slice());
            let (nti, nt) = loop {
                let (nti, nt) = index.random_in_context(traj.context_id, rng)?;
                let offset = (nti == ti).then(|| nt.abs_diff(t));
                if sptm_label(offset, cfg.horizon, cfg.negative_gap) == Some(false) {
                    break (nti, nt);
                }
            };
            (&data.trajectories[nti].observations[nt], false)
        };
        to.push(dst.data.as_slice());
        ctx.push(index.encodings[&traj.context_id].as_slice());
        labels.push(if label { 1.0 } else { 0.0 });
    }
    Ok(SptmBatch {
        from: Matrix::from_rows(&from)?,
        to: Matrix::from_rows(&to)?,
        ctx: Matrix::from_rows(&ctx)?,
        labels,
    })
}

pub fn train_sptm(data: &TransitionDataset, world: &WorldConfig, cfg: &SptmConfig) -> Result<(SptmClassifier, TrainingLog)> {
    let ids: Vec<u64> = data.contexts.iter().map(|c| c.id).collect();
    let (train_ids, val_ids) = split_contexts(&ids, cfg.validation_frac, cfg.seed);
    let train_index = SamplerIndex::new(data, world, cfg.horizon, Some(&train_ids))?;
    let val_index = if val_ids.is_empty() {
        None
    } else {
        Some(SamplerIndex::new(data, world, cfg.horizon, Some(&val_ids))?)
    };
    let obs_dim = data.trajectories[train_index.anchor_trajs[0]].observations[0].len();
    let ctx_dim = train_index.encodings.values().next().map(|e| e.len()).unwrap_or(0);
    let mut model = SptmClassifier::new(obs_dim, ctx_dim, cfg)?;

    let mut vrng = stream(derive(cfg.seed, 0x7A1), 2);
    let val_batches = (0..cfg.validation_batches)
        .map(|_| sample_sptm_with_index(val_index.as_ref().unwrap_or(&train_index), cfg, &mut vrng))
        .collect::<Result<Vec<_>>>()?;
    let validate = |m: &SptmClassifier| -> Result<f64> {
        let mut s = 0.0;
        for b in &val_batches {
            s += sptm_bce_loss(m, b)?;
        }
        Ok(s / val_batches.len().max(1) as f64)
    };

    let mut opt = Adam::new(&model.params(), cfg.lr);
    let mut rng = stream(cfg.seed, 0x5B77);
    let mut log = TrainingLog::default();
    let v0 = validate(&model)?;
    log.epochs.push(EpochRecord {
        epoch: 0,
        train_loss: None,
        val_loss: v0,
        extra: None,
    });
    let mut best = (v0, model.params().into_iter().cloned().collect::<Vec<_>>());
    for epoch in 1..=cfg.epochs {
        let mut sum = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let batch = sample_sptm_with_index(&train_index, cfg, &mut rng)?;
            let (loss, grads) = model.loss_and_grads(&batch)?;
            ensure_finite("classifier loss", loss, epoch)?;
            opt.step(&mut model.params_mut(), &grads)?;
            sum += loss;
        }
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(HtmError::Divergence(format!("classifier parameters non-finite at epoch {epoch}")));
        }
        let val = validate(&model)?;
        ensure_finite("classifier validation loss", val, epoch)?;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: Some(sum / cfg.steps_per_epoch.max(1) as f64),
            val_loss: val,
            extra: None,
        });
        if val < best.0 {
            best = (val, model.params().into_iter().cloned().collect());
        }
    }
    model.set_params(&best.1);
    Ok((model, log))
}
