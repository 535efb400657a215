//! Inverse-dynamics policy and the closed-loop plan executor.

use htm_tensor::{Activation, Adam, Checkpoint, CheckpointReader, Matrix, Mlp, Tape, TensorError, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::TransitionDataset;
use crate::error::{HtmError, Result};
use crate::generator::{hcat, split_contexts, CvaeModel};
use crate::planner::{pair_logit, plan_end_to_end, PairScorer, Plan, WeightScheme};
use crate::rng::{derive, stream};
use crate::train::{ensure_finite, EpochRecord, TrainingLog};
use crate::world::{
    decode, encode_context, observe, step, Action, AgentState, ContextEncoding, ObsMode, Observation, Task,
    WorldConfig,
};

pub const INVERSE_KIND: [u8; 4] = *b"INVM";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InverseConfig {
    pub hidden: usize,
    pub depth: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub validation_frac: f64,
    pub seed: u64,
}

impl Default for InverseConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            depth: 2,
            lr: 1e-3,
            epochs: 30,
            batch: 128,
            validation_frac: 0.1,
            seed: 0,
        }
    }
}

/// `a_max · tanh(MLP(o ⊕ o_target ⊕ c))`.
#[derive(Clone, Debug, PartialEq)]
pub struct InverseModel {
    pub net: Mlp,
    pub a_max: f64,
}

/// Rows of `(o_t, o_target, c)` inputs with their action targets.
#[derive(Clone, Debug)]
pub struct InverseBatch {
    pub current: Matrix,
    pub target: Matrix,
    pub ctx: Matrix,
    pub actions: Matrix,
}

impl InverseModel {
    pub fn new(obs_dim: usize, ctx_dim: usize, a_max: f64, cfg: &InverseConfig) -> Result<Self> {
        let mut rng = stream(cfg.seed, 0x1A7);
        let mut sizes = vec![2 * obs_dim + ctx_dim];
        sizes.extend(std::iter::repeat_n(cfg.hidden, cfg.depth));
        sizes.push(2);
        let net = Mlp::new(&sizes, Activation::Tanh, Activation::Tanh, &mut rng)?;
        Ok(Self { net, a_max })
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.net.params_mut()
    }

    pub fn set_params(&mut self, values: &[Matrix]) {
        for (dst, src) in self.params_mut().into_iter().zip(values) {
            *dst = src.clone();
        }
    }

    fn inputs(batch: &InverseBatch) -> Matrix {
        hcat(&hcat(&batch.current, &batch.target), &batch.ctx)
    }

    /// Predicted actions, one row per batch row.
    pub fn predict(&self, batch: &InverseBatch) -> Result<Matrix> {
        Ok(self.net.forward(&Self::inputs(batch))?.map(|v| v * self.a_max))
    }

    fn loss_on_tape(&self, tape: &mut Tape, batch: &InverseBatch) -> Result<(Var, Vec<Var>)> {
        let n = batch.actions.rows();
        if n == 0 {
            return Err(HtmError::Empty("inverse-model batch".into()));
        }
        let vars = self.net.bind(tape);
        let x = tape.constant(Self::inputs(batch));
        let out = self.net.forward_on_tape(tape, &vars, x)?;
        let pred = tape.scale(out, self.a_max);
        let target = tape.constant(batch.actions.clone());
        let diff = tape.sub(pred, target)?;
        let sq = tape.square(diff);
        let total = tape.sum(sq);
        let loss = tape.scale(total, 1.0 / n as f64);
        Ok((loss, vars.as_slice().to_vec()))
    }

    /// Mean squared L2 action error and its gradients.
    pub fn loss_and_grads(&self, batch: &InverseBatch) -> Result<(f64, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let (loss, vars) = self.loss_on_tape(&mut tape, batch)?;
        let mut g = tape.backward(loss)?;
        Ok((tape.value(loss).item()?, vars.into_iter().map(|v| g.take(v)).collect()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(INVERSE_KIND);
        c.scalars.push(self.a_max);
        c.push_mlp(&self.net);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let mut rd = CheckpointReader::new(c);
        let a_max = rd.scalar()?;
        let net = rd.mlp()?;
        rd.finish()?;
        if net.output_dim() != 2 || !(a_max > 0.0) {
            return Err(TensorError::Checkpoint("inverse model must output 2 bounded actions".into()).into());
        }
        Ok(Self { net, a_max })
    }
}

/// Mean squared L2 action error of `model` on `batch`.
pub fn inverse_loss(model: &InverseModel, batch: &InverseBatch) -> Result<f64> {
    let pred = model.predict(batch)?;
    let n = batch.actions.rows().max(1) as f64;
    Ok(pred
        .as_slice()
        .iter()
        .zip(batch.actions.as_slice())
        .map(|(p, a)| (p - a) * (p - a))
        .sum::<f64>()
        / n)
}

/// The policy: action toward `target` from `current`.
pub fn infer_action(
    model: &InverseModel,
    current: &Observation,
    target: &Observation,
    ctx: &ContextEncoding,
) -> Result<Action> {
    let input: Vec<f64> = current
        .data
        .iter()
        .chain(&target.data)
        .chain(ctx.as_slice())
        .copied()
        .collect();
    let out = model.net.apply(&input)?;
    Ok(Action::new(out[0] * model.a_max, out[1] * model.a_max).clamped(model.a_max))
}

/// Every one-step transition `(o_t, o_{t+1}, a_t)` of the listed contexts.
pub fn transition_batch(data: &TransitionDataset, world: &WorldConfig, contexts: &[u64]) -> Result<InverseBatch> {
    let (mut cur, mut nxt, mut ctx, mut act) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &id in contexts {
        let Some(c) = data.context(id) else {
            return Err(HtmError::Empty(format!("context {id} is not in the dataset")));
        };
        let enc = encode_context(c, world, data.mode);
        for &ti in data.trajectories_of(id) {
            let traj = &data.trajectories[ti];
            for (t, a) in traj.actions.iter().enumerate() {
                cur.push(traj.observations[t].data.clone());
                nxt.push(traj.observations[t + 1].data.clone());
                ctx.push(enc.0.clone());
                act.push(vec![a.dx, a.dy]);
            }
        }
    }
    if act.is_empty() {
        return Err(HtmError::Empty("no transitions for the inverse model".into()));
    }
    Ok(InverseBatch {
        current: Matrix::from_rows(&cur)?,
        target: Matrix::from_rows(&nxt)?,
        ctx: Matrix::from_rows(&ctx)?,
        actions: Matrix::from_rows(&act)?,
    })
}

fn select_rows(m: &Matrix, rows: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(rows.len(), m.cols());
    for (k, &r) in rows.iter().enumerate() {
        out.row_mut(k).copy_from_slice(m.row(r));
    }
    out
}

fn subset(b: &InverseBatch, rows: &[usize]) -> InverseBatch {
    InverseBatch {
        current: select_rows(&b.current, rows),
        target: select_rows(&b.target, rows),
        ctx: select_rows(&b.ctx, rows),
        actions: select_rows(&b.actions, rows),
    }
}

/// Squared error of always predicting the mean training action.
pub fn mean_action_baseline(train: &InverseBatch, val: &InverseBatch) -> f64 {
    let n = train.actions.rows().max(1) as f64;
    let mean: Vec<f64> = (0..2)
        .map(|c| (0..train.actions.rows()).map(|r| train.actions.get(r, c)).sum::<f64>() / n)
        .collect();
    let m = val.actions.rows().max(1) as f64;
    (0..val.actions.rows())
        .map(|r| (0..2).map(|c| (val.actions.get(r, c) - mean[c]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / m
}

/// Fits the inverse model on one-step transitions. Validation records
/// carry the mean-action baseline error in `extra`.
pub fn train_inverse(
    data: &TransitionDataset,
    world: &WorldConfig,
    cfg: &InverseConfig,
) -> Result<(InverseModel, TrainingLog)> {
    let ids: Vec<u64> = data.contexts.iter().map(|c| c.id).collect();
    let (train_ids, val_ids) = split_contexts(&ids, cfg.validation_frac, cfg.seed);
    let train = transition_batch(data, world, &train_ids)?;
    let val = if val_ids.is_empty() {
        train.clone()
    } else {
        transition_batch(data, world, &val_ids)?
    };
    let baseline = mean_action_baseline(&train, &val);
    let mut model = InverseModel::new(train.current.cols(), train.ctx.cols(), world.a_max, cfg)?;
    let mut opt = Adam::new(&model.params(), cfg.lr);
    let mut rng = stream(cfg.seed, 0x1A77);
    let mut log = TrainingLog::default();
    let v0 = inverse_loss(&model, &val)?;
    log.epochs.push(EpochRecord {
        epoch: 0,
        train_loss: None,
        val_loss: v0,
        extra: Some(baseline),
    });
    let mut best = (v0, model.params().into_iter().cloned().collect::<Vec<_>>());
    let mut order: Vec<usize> = (0..train.actions.rows()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let batch = subset(&train, chunk);
            let (loss, grads) = model.loss_and_grads(&batch)?;
            ensure_finite("inverse-model loss", loss, epoch)?;
            opt.step(&mut model.params_mut(), &grads)?;
            sum += loss * chunk.len() as f64;
            count += chunk.len();
        }
        let v = inverse_loss(&model, &val)?;
        ensure_finite("inverse-model validation loss", v, epoch)?;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: Some(sum / count.max(1) as f64),
            val_loss: v,
            extra: Some(baseline),
        });
        if v < best.0 {
            best = (v, model.params().into_iter().cloned().collect());
        }
    }
    model.set_params(&best.1);
    Ok((model, log))
}

// ---------------------------------------------------------------------------
// Execution

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutionConfig {
    /// Step budget `n`.
    #[serde(rename = "n")]
    pub max_steps: usize,
    /// Replanning period `r`.
    #[serde(rename = "r")]
    pub replan_every: usize,
    /// Success radius `τ` in world units.
    #[serde(rename = "tau")]
    pub success_threshold: f64,
    /// Waypoint-reached radius in world units (state observations).
    #[serde(rename = "eps_wp")]
    pub waypoint_eps: f64,
}

impl Default for ExecutionConfig {
    fn default() -> Self {
        Self {
            max_steps: 500,
            replan_every: 200,
            success_threshold: 0.5,
            waypoint_eps: 0.1,
        }
    }
}

impl ExecutionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(HtmError::Config {
                key: format!("execution.{key}"),
                msg: msg.into(),
            })
        };
        if self.max_steps == 0 {
            return bad("n", "must be positive");
        }
        if self.replan_every == 0 {
            return bad("r", "must be positive");
        }
        if !(self.success_threshold > 0.0) {
            return bad("tau", "must be positive");
        }
        if !(self.waypoint_eps > 0.0) {
            return bad("eps_wp", "must be positive");
        }
        Ok(())
    }
}

/// How the executor chooses waypoints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    /// Plan over hallucinated nodes with `samples` draws.
    Planner { scheme: WeightScheme, samples: usize },
    /// Pursue the goal directly with the inverse model.
    InverseOnly,
}

/// Trained models the executor reads.
pub struct Agent<'a> {
    pub generator: &'a CvaeModel,
    pub scorer: &'a dyn PairScorer,
    pub inverse: &'a InverseModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub success: bool,
    pub steps: usize,
    pub final_distance: f64,
    pub replans: usize,
    /// Some plan came back empty-handed and the goal was pursued directly.
    pub planless: bool,
    pub states: Vec<AgentState>,
    pub plans: Vec<Plan>,
}

/// Generator seed of planning round `round` (0 for the initial plan).
pub fn plan_seed(seed: u64, round: usize) -> u64 {
    derive(seed, round as u64)
}

/// Runs `task` closed-loop. Replanning happens on a global step counter,
/// before steps `r + 1`, `2r + 1`, ..., so a run of `steps` steps replans
/// `⌊(steps − 1) / r⌋` times.
pub fn execute(
    task: &Task,
    world: &WorldConfig,
    mode: ObsMode,
    agent: &Agent,
    method: Method,
    cfg: &ExecutionConfig,
    seed: u64,
) -> Result<ExecutionResult> {
    let ctx = &task.context;
    let enc = encode_context(ctx, world, mode);
    let goal_obs = observe(ctx, world, &task.goal, mode);
    let mut state = task.start;
    let mut states = vec![state];
    let mut plans = Vec::new();
    let mut planless = false;
    let mut replans = 0;
    let mut steps = 0;

    // Waypoints still ahead (plan nodes after the start); goal when empty.
    let mut route: Vec<(Observation, f64)> = Vec::new();
    let mut since_advance = 0;
    let horizon = agent.scorer.horizon().max(1);

    let replan = |state: &AgentState, round: usize, plans: &mut Vec<Plan>, planless: &mut bool| -> Result<Vec<(Observation, f64)>> {
        let Method::Planner { scheme, samples } = method else {
            return Ok(Vec::new());
        };
        let obs = observe(ctx, world, state, mode);
        match plan_end_to_end(
            agent.generator,
            agent.scorer,
            &enc,
            &obs,
            &goal_obs,
            samples,
            scheme,
            plan_seed(seed, round),
        ) {
            Ok((_, plan)) => {
                let route = plan
                    .observations
                    .iter()
                    .skip(1)
                    .cloned()
                    .zip(plan.edge_logits.iter().copied())
                    .collect();
                plans.push(plan);
                Ok(route)
            }
            Err(HtmError::NoPath { .. }) => {
                *planless = true;
                Ok(Vec::new())
            }
            Err(e) => Err(e),
        }
    };

    let reached = |s: &AgentState| s.distance(&task.goal) <= cfg.success_threshold;
    if !reached(&state) {
        route = replan(&state, 0, &mut plans, &mut planless)?;
        route.reverse();
    }
    while !reached(&state) && steps < cfg.max_steps {
        if steps > 0 && steps % cfg.replan_every == 0 {
            replans += 1;
            route = replan(&state, replans, &mut plans, &mut planless)?;
            route.reverse();
            since_advance = 0;
        }
        let obs = observe(ctx, world, &state, mode);
        let target = route.last().map(|(o, _)| o).unwrap_or(&goal_obs);
        let action = infer_action(agent.inverse, &obs, target, &enc)?;
        state = step(ctx, world, &state, &action);
        states.push(state);
        steps += 1;
        since_advance += 1;
        if let Some((waypoint, edge_logit)) = route.last() {
            let hit = match mode {
                ObsMode::State => decode(world, waypoint).is_ok_and(|w| w.distance(&state) <= cfg.waypoint_eps),
                ObsMode::Raster => {
                    let now = observe(ctx, world, &state, mode);
                    pair_logit(agent.scorer, &now, waypoint, &enc)? >= *edge_logit
                }
            };
            if hit || since_advance >= horizon {
                route.pop();
                since_advance = 0;
            }
        }
    }
    Ok(ExecutionResult {
        success: reached(&state),
        steps,
        final_distance: state.distance(&task.goal),
        replans,
        planless,
        states,
        plans,
    })
}
