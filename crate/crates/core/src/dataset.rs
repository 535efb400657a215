//! Random-exploration trajectories grouped by context, and their JSON-lines
//! persistence.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HtmError, Result};
use crate::rng::{derive, stream};
use crate::world::{
    generate_context, observe, random_action, sample_free_state, step, Action, AgentState, Context,
    ObsMode, Observation, WorldConfig,
};

/// Context ids at or above this value are reserved for held-out contexts.
pub const HELD_OUT_ID_BASE: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub context_id: u64,
    pub trajectory_id: i64,
    pub states: Vec<AgentState>,
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
}

impl Trajectory {
    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Uniform i.i.d. actions from `s0` for `horizon` steps.
pub fn rollout_random(
    ctx: &Context,
    world: &WorldConfig,
    s0: AgentState,
    horizon: usize,
    mode: ObsMode,
    rng: &mut ChaCha8Rng,
) -> Trajectory {
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    states.push(s0);
    let mut s = s0;
    for _ in 0..horizon {
        let a = random_action(world, rng);
        s = step(ctx, world, &s, &a);
        actions.push(a);
        states.push(s);
    }
    let observations = states.iter().map(|s| observe(ctx, world, s, mode)).collect();
    Trajectory {
        context_id: ctx.id,
        trajectory_id: 0,
        states,
        observations,
        actions,
    }
}

/// Sizes and seed of an exploration dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub contexts: usize,
    pub trajectories: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Set from the run's top-level mode.
    #[serde(skip)]
    pub mode: ObsMode,
    /// Held-out contexts generated for zero-shot evaluation.
    pub held_out: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            contexts: 40,
            trajectories: 20,
            horizon: 20,
            seed: 0,
            mode: ObsMode::State,
            held_out: 10,
        }
    }
}

impl DataSpec {
    pub fn transitions(&self) -> usize {
        self.contexts * self.trajectories * self.horizon
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(HtmError::Config {
                key: format!("data.{key}"),
                msg: msg.into(),
            })
        };
        if self.contexts == 0 {
            return bad("contexts", "must be at least 1");
        }
        if self.trajectories == 0 {
            return bad("trajectories", "must be at least 1");
        }
        if self.contexts as u64 >= HELD_OUT_ID_BASE || self.held_out as u64 >= HELD_OUT_ID_BASE {
            return bad("contexts", "too many contexts");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionDataset {
    pub mode: ObsMode,
    pub contexts: Vec<Context>,
    pub trajectories: Vec<Trajectory>,
    by_context: BTreeMap<u64, Vec<usize>>,
}

impl TransitionDataset {
    /// Checks that every trajectory is length-consistent and refers to a
    /// known context.
    pub fn new(mode: ObsMode, contexts: Vec<Context>, trajectories: Vec<Trajectory>) -> Result<Self> {
        let mut by_context: BTreeMap<u64, Vec<usize>> =
            contexts.iter().map(|c| (c.id, Vec::new())).collect();
        for (i, t) in trajectories.iter().enumerate() {
            if t.observations.len() != t.actions.len() + 1 || t.states.len() != t.observations.len() {
                return Err(HtmError::Generation(format!(
                    "trajectory {} of context {} has {} observations for {} actions",
                    t.trajectory_id,
                    t.context_id,
                    t.observations.len(),
                    t.actions.len()
                )));
            }
            by_context
                .get_mut(&t.context_id)
                .ok_or_else(|| {
                    HtmError::Generation(format!(
                        "trajectory {} refers to unknown context {}",
                        t.trajectory_id, t.context_id
                    ))
                })?
                .push(i);
        }
        Ok(Self {
            mode,
            contexts,
            trajectories,
            by_context,
        })
    }

    pub fn context(&self, id: u64) -> Option<&Context> {
        self.contexts.iter().find(|c| c.id == id)
    }

    /// Indices into `trajectories` for one context.
    pub fn trajectories_of(&self, context_id: u64) -> &[usize] {
        self.by_context.get(&context_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn transition_count(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Keeps only the given contexts (and their trajectories).
    pub fn restrict(&self, keep: impl Fn(u64) -> bool) -> Self {
        let contexts: Vec<_> = self.contexts.iter().filter(|c| keep(c.id)).cloned().collect();
        let trajectories: Vec<_> = self
            .trajectories
            .iter()
            .filter(|t| keep(t.context_id))
            .cloned()
            .collect();
        Self::new(self.mode, contexts, trajectories).expect("subset of a valid dataset")
    }

    /// Re-applies `step` to every transition of a random `fraction` of
    /// trajectories; returns the number of mismatching successors.
    pub fn audit_replay(&self, world: &WorldConfig, fraction: f64, seed: u64) -> usize {
        let mut rng = stream(seed, 0xA0D1);
        let mut bad = 0;
        for t in &self.trajectories {
            if !rng.random_bool(fraction.clamp(0.0, 1.0)) {
                continue;
            }
            let Some(ctx) = self.context(t.context_id) else {
                bad += t.len();
                continue;
            };
            for (i, a) in t.actions.iter().enumerate() {
                if step(ctx, world, &t.states[i], a) != t.states[i + 1] {
                    bad += 1;
                }
            }
        }
        bad
    }
}

/// Training contexts `0..spec.contexts`.
pub fn training_contexts(spec: &DataSpec, world: &WorldConfig) -> Result<Vec<Context>> {
    (0..spec.contexts as u64)
        .map(|id| generate_context(spec.seed, id, world))
        .collect()
}

/// Held-out contexts, disjoint from the training ids.
pub fn held_out_contexts(spec: &DataSpec, world: &WorldConfig) -> Result<Vec<Context>> {
    (0..spec.held_out as u64)
        .map(|i| generate_context(spec.seed, HELD_OUT_ID_BASE + i, world))
        .collect()
}

/// Explores each context with `trajectories` rollouts from uniformly drawn
/// free start states.
pub fn explore(
    contexts: Vec<Context>,
    world: &WorldConfig,
    trajectories: usize,
    horizon: usize,
    mode: ObsMode,
    seed: u64,
) -> Result<TransitionDataset> {
    let mut all = Vec::with_capacity(contexts.len() * trajectories);
    for ctx in &contexts {
        let mut rng = stream(derive(seed, 0xE4_9105), ctx.id);
        for k in 0..trajectories {
            let s0 = sample_free_state(ctx, world, &mut rng)?;
            let mut t = rollout_random(ctx, world, s0, horizon, mode, &mut rng);
            t.trajectory_id = k as i64;
            all.push(t);
        }
    }
    TransitionDataset::new(mode, contexts, all)
}

/// Training dataset for `spec`.
pub fn collect_dataset(spec: &DataSpec, world: &WorldConfig) -> Result<TransitionDataset> {
    spec.validate()?;
    world.validate()?;
    let contexts = training_contexts(spec, world)?;
    explore(contexts, world, spec.trajectories, spec.horizon, spec.mode, spec.seed)
}

/// Exploration data in the held-out contexts, used only for evaluation.
pub fn collect_held_out(spec: &DataSpec, world: &WorldConfig, trajectories: usize) -> Result<TransitionDataset> {
    spec.validate()?;
    let contexts = held_out_contexts(spec, world)?;
    explore(
        contexts,
        world,
        trajectories,
        spec.horizon,
        spec.mode,
        derive(spec.seed, 0x4E1D),
    )
}

#[derive(Serialize, Deserialize)]
struct TransitionRecord {
    context_id: u64,
    trajectory_id: i64,
    t: usize,
    obs: Vec<f64>,
    action: [f64; 2],
    next_obs: Vec<f64>,
    mode: ObsMode,
    state: [f64; 2],
    next_state: [f64; 2],
}

pub const CONTEXTS_FILE: &str = "contexts.jsonl";
pub const TRANSITIONS_FILE: &str = "transitions.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

fn write_json_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")
}

/// Writes `contexts.jsonl`, `transitions.jsonl` and `manifest.json` into `dir`.
/// Trajectories without transitions are not representable and are skipped.
pub fn write_dataset(dir: &Path, data: &TransitionDataset, manifest: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HtmError::io(dir, e))?;
    let path = dir.join(CONTEXTS_FILE);
    let mut w = BufWriter::new(File::create(&path).map_err(|e| HtmError::io(&path, e))?);
    for c in &data.contexts {
        write_json_line(&mut w, c).map_err(|e| HtmError::io(&path, e))?;
    }
    w.flush().map_err(|e| HtmError::io(&path, e))?;

    let path = dir.join(TRANSITIONS_FILE);
    let mut w = BufWriter::new(File::create(&path).map_err(|e| HtmError::io(&path, e))?);
    for tr in &data.trajectories {
        for (t, a) in tr.actions.iter().enumerate() {
            let rec = TransitionRecord {
                context_id: tr.context_id,
                trajectory_id: tr.trajectory_id,
                t,
                obs: tr.observations[t].data.clone(),
                action: [a.dx, a.dy],
                next_obs: tr.observations[t + 1].data.clone(),
                mode: data.mode,
                state: [tr.states[t].x, tr.states[t].y],
                next_state: [tr.states[t + 1].x, tr.states[t + 1].y],
            };
            write_json_line(&mut w, &rec).map_err(|e| HtmError::io(&path, e))?;
        }
    }
    w.flush().map_err(|e| HtmError::io(&path, e))?;
    write_json(&dir.join(MANIFEST_FILE), manifest)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| HtmError::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| HtmError::Format {
        path: path.into(),
        msg: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| HtmError::io(path, e))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| HtmError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| HtmError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| HtmError::Format {
            path: path.into(),
            msg: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<TransitionDataset> {
    let contexts: Vec<Context> = read_lines(&dir.join(CONTEXTS_FILE))?;
    let path = dir.join(TRANSITIONS_FILE);
    let records: Vec<TransitionRecord> = read_lines(&path)?;
    let mut mode = None;
    let mut trajectories: Vec<Trajectory> = Vec::new();
    for rec in records {
        if *mode.get_or_insert(rec.mode) != rec.mode {
            return Err(HtmError::Format {
                path: path.clone(),
                msg: "mixed observation modes".into(),
            });
        }
        let continues = trajectories.last().is_some_and(|t| {
            t.context_id == rec.context_id && t.trajectory_id == rec.trajectory_id && t.actions.len() == rec.t
        });
        if !continues {
            if rec.t != 0 {
                return Err(HtmError::Format {
                    path: path.clone(),
                    msg: format!(
                        "trajectory {}/{} starts at t={}",
                        rec.context_id, rec.trajectory_id, rec.t
                    ),
                });
            }
            trajectories.push(Trajectory {
                context_id: rec.context_id,
                trajectory_id: rec.trajectory_id,
                states: vec![AgentState::new(rec.state[0], rec.state[1])],
                observations: vec![Observation::new(rec.mode, rec.obs)],
                actions: Vec::new(),
            });
        }
        let t = trajectories.last_mut().expect("pushed above");
        t.actions.push(Action::new(rec.action[0], rec.action[1]));
        t.states.push(AgentState::new(rec.next_state[0], rec.next_state[1]));
        t.observations.push(Observation::new(rec.mode, rec.next_obs));
    }
    TransitionDataset::new(mode.unwrap_or(ObsMode::State), contexts, trajectories)
}
