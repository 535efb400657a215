//! Oracle-based plan metrics, the success benchmark and the score × weight
//! ablation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::controller::{execute, plan_seed, Agent, ExecutionConfig, Method};
use crate::error::{HtmError, Result};
use crate::generator::{hallucinate, HallucinationSet};
use crate::pipeline::Models;
use crate::planner::{PairScorer, Plan, WeightScheme};
use crate::rng::derive;
use crate::world::{decode, encode_context, is_valid, observe, oracle_reachable, Context, ObsMode, Task, WorldConfig};

/// Fraction of samples that decode to valid states of `ctx`; 1 for an
/// empty set.
pub fn fidelity(samples: &HallucinationSet, ctx: &Context, world: &WorldConfig) -> Result<f64> {
    if samples.observations.is_empty() {
        return Ok(1.0);
    }
    let mut valid = 0;
    for o in &samples.observations {
        if is_valid(ctx, world, &decode(world, o)?) {
            valid += 1;
        }
    }
    Ok(valid as f64 / samples.observations.len() as f64)
}

/// Wilson score interval for `successes` out of `n` at normal quantile `z`.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / (1.0 + z2 / n);
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Fraction of consecutive plan nodes that are `h`-step reachable; 1 for a
/// single-node plan.
pub fn feasibility(plan: &Plan, ctx: &Context, world: &WorldConfig, h: usize) -> Result<f64> {
    if plan.observations.len() < 2 {
        return Ok(1.0);
    }
    let mut ok = 0;
    for pair in plan.observations.windows(2) {
        if oracle_reachable(ctx, world, &pair[0], &pair[1], h)? {
            ok += 1;
        }
    }
    Ok(ok as f64 / (plan.observations.len() - 1) as f64)
}

/// Whether the goal is `h`-step reachable from the plan's last node.
pub fn completeness(plan: &Plan, task: &Task, world: &WorldConfig, h: usize, mode: ObsMode) -> Result<bool> {
    let last = plan
        .observations
        .last()
        .ok_or_else(|| HtmError::Evaluation("plan has no nodes".into()))?;
    let goal = observe(&task.context, world, &task.goal, mode);
    oracle_reachable(&task.context, world, last, &goal, h)
}

/// `ln N − loss`, a lower bound on the mutual information captured by the
/// contrastive model.
pub fn mi_lower_bound(loss: f64, candidates: usize) -> Result<f64> {
    if candidates < 2 || !(loss >= 0.0) {
        return Err(HtmError::Evaluation(format!(
            "bound needs N >= 2 and a nonnegative loss, got N = {candidates}, loss = {loss}"
        )));
    }
    Ok((candidates as f64).ln() - loss)
}

/// Which trained connectivity model scores plan edges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreModel {
    Cpc,
    SptmBce,
}

impl ScoreModel {
    pub fn name(self) -> &'static str {
        match self {
            ScoreModel::Cpc => "cpc",
            ScoreModel::SptmBce => "sptm_bce",
        }
    }
}

/// One benchmarked method.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MethodSpec {
    pub score: ScoreModel,
    /// `None` executes without a planner.
    pub scheme: Option<WeightScheme>,
}

impl MethodSpec {
    pub const HTM: MethodSpec = MethodSpec {
        score: ScoreModel::Cpc,
        scheme: Some(WeightScheme::Normalized),
    };
    pub const SPTM: MethodSpec = MethodSpec {
        score: ScoreModel::SptmBce,
        scheme: Some(WeightScheme::SptmExp),
    };
    pub const INVERSE_ONLY: MethodSpec = MethodSpec {
        score: ScoreModel::Cpc,
        scheme: None,
    };

    pub fn name(&self) -> String {
        match self.scheme {
            None => "inverse_model".into(),
            Some(_) => self.score.name().into(),
        }
    }

    pub fn scheme_name(&self) -> &'static str {
        self.scheme.map(|s| s.name()).unwrap_or("none")
    }
}

/// Per-task benchmark outcome. Plan metrics describe the initial plan and
/// are absent for planless runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task_id: u64,
    pub method: String,
    pub scheme: String,
    pub success: bool,
    pub steps: usize,
    pub final_distance: f64,
    pub feasibility: Option<f64>,
    pub completeness: Option<bool>,
    pub fidelity: Option<f64>,
    pub seed: u64,
    pub replans: usize,
    pub planless: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub scheme: String,
    pub tasks: usize,
    pub success_rate: f64,
    pub mean_final_distance: f64,
    pub std_final_distance: f64,
    pub mean_feasibility: Option<f64>,
    pub mean_completeness: Option<f64>,
    pub mean_fidelity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<TaskRow>,
    pub aggregates: Vec<Aggregate>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Per-(method, scheme) aggregates in first-appearance order.
pub fn aggregate(rows: &[TaskRow]) -> Vec<Aggregate> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let k = (r.method.clone(), r.scheme.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(method, scheme)| {
            let group: Vec<&TaskRow> = rows.iter().filter(|r| r.method == method && r.scheme == scheme).collect();
            let n = group.len() as f64;
            let mean_d = group.iter().map(|r| r.final_distance).sum::<f64>() / n;
            let var = group.iter().map(|r| (r.final_distance - mean_d).powi(2)).sum::<f64>() / n;
            Aggregate {
                tasks: group.len(),
                success_rate: group.iter().filter(|r| r.success).count() as f64 / n,
                mean_final_distance: mean_d,
                std_final_distance: var.sqrt(),
                mean_feasibility: mean(group.iter().filter_map(|r| r.feasibility)),
                mean_completeness: mean(group.iter().filter_map(|r| r.completeness.map(|c| c as u8 as f64))),
                mean_fidelity: mean(group.iter().filter_map(|r| r.fidelity)),
                method,
                scheme,
            }
        })
        .collect()
}

pub const CSV_HEADER: &str = "task_id,method,scheme,success,steps,final_distance,feasibility,completeness,fidelity,seed";

impl MetricsReport {
    pub fn from_rows(rows: Vec<TaskRow>) -> Self {
        let aggregates = aggregate(&rows);
        Self { rows, aggregates }
    }

    pub fn aggregate_for(&self, method: &str, scheme: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.method == method && a.scheme == scheme)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{:.6},{},{},{},{}",
                r.task_id,
                r.method,
                r.scheme,
                r.success,
                r.steps,
                r.final_distance,
                opt(r.feasibility),
                r.completeness.map(|c| c.to_string()).unwrap_or_default(),
                opt(r.fidelity),
                r.seed
            )
            .expect("writing to a String");
        }
        out
    }
}

pub fn scorer<'a>(models: &'a Models, score: ScoreModel) -> &'a dyn PairScorer {
    match score {
        ScoreModel::Cpc => &models.cpc,
        ScoreModel::SptmBce => &models.sptm,
    }
}

/// Oracle horizon used by the plan metrics: the connectivity horizon.
fn metric_horizon(models: &Models) -> usize {
    models.cpc.horizon
}

/// Executes one task with one method and scores its initial plan.
pub fn run_task(
    task: &Task,
    world: &WorldConfig,
    mode: ObsMode,
    models: &Models,
    method: MethodSpec,
    samples: usize,
    exec: &ExecutionConfig,
    seed: u64,
) -> Result<TaskRow> {
    let scorer = scorer(models, method.score);
    let agent = Agent {
        generator: &models.cvae,
        scorer,
        inverse: &models.inverse,
    };
    let exec_method = match method.scheme {
        Some(scheme) => Method::Planner { scheme, samples },
        None => Method::InverseOnly,
    };
    let result = execute(task, world, mode, &agent, exec_method, exec, seed)?;
    let h = metric_horizon(models);
    let (mut feas, mut comp, mut fid) = (None, None, None);
    if let Some(plan) = result.plans.first() {
        feas = Some(feasibility(plan, &task.context, world, h)?);
        comp = Some(completeness(plan, task, world, h, mode)?);
        let enc = encode_context(&task.context, world, mode);
        let set = hallucinate(&models.cvae, &enc, mode, samples, plan_seed(seed, 0))?;
        fid = Some(fidelity(&set, &task.context, world)?);
    }
    Ok(TaskRow {
        task_id: task.id,
        method: method.name(),
        scheme: method.scheme_name().into(),
        success: result.success,
        steps: result.steps,
        final_distance: result.final_distance,
        feasibility: feas,
        completeness: comp,
        fidelity: fid,
        seed,
        replans: result.replans,
        planless: result.planless,
    })
}

/// Runs every method on every task; task `t` uses execution seed
/// `derive(seed, t.id)` for all methods.
pub fn run_benchmark(
    tasks: &[Task],
    world: &WorldConfig,
    mode: ObsMode,
    models: &Models,
    methods: &[MethodSpec],
    samples: usize,
    exec: &ExecutionConfig,
    seed: u64,
) -> Result<MetricsReport> {
    let mut rows = Vec::with_capacity(tasks.len() * methods.len());
    for method in methods {
        for task in tasks {
            rows.push(run_task(task, world, mode, models, *method, samples, exec, derive(seed, task.id))?);
        }
    }
    Ok(MetricsReport::from_rows(rows))
}

pub const ABLATION_SCORES: [ScoreModel; 2] = [ScoreModel::Cpc, ScoreModel::SptmBce];

/// Score-model × weight-scheme grid of mean final distances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub scores: Vec<ScoreModel>,
    pub schemes: Vec<String>,
    /// `cells[score][scheme]`.
    pub cells: Vec<Vec<f64>>,
    pub task_ids: Vec<u64>,
    pub seeds: Vec<u64>,
}

pub fn ablation_schemes(s_shortcut: f64) -> [WeightScheme; 3] {
    [
        WeightScheme::SptmThreshold { threshold: s_shortcut },
        WeightScheme::Inverse,
        WeightScheme::Normalized,
    ]
}

pub fn run_ablation(
    tasks: &[Task],
    world: &WorldConfig,
    mode: ObsMode,
    models: &Models,
    s_shortcut: f64,
    samples: usize,
    exec: &ExecutionConfig,
    seed: u64,
) -> Result<AblationGrid> {
    let schemes = ablation_schemes(s_shortcut);
    let seeds: Vec<u64> = tasks.iter().map(|t| derive(seed, t.id)).collect();
    let mut cells = Vec::new();
    for score in ABLATION_SCORES {
        let mut row = Vec::new();
        for scheme in schemes {
            let method = MethodSpec {
                score,
                scheme: Some(scheme),
            };
            let mut total = 0.0;
            for (task, &s) in tasks.iter().zip(&seeds) {
                total += run_task(task, world, mode, models, method, samples, exec, s)?.final_distance;
            }
            row.push(total / tasks.len().max(1) as f64);
        }
        cells.push(row);
    }
    Ok(AblationGrid {
        scores: ABLATION_SCORES.to_vec(),
        schemes: schemes.iter().map(|s| s.name().to_string()).collect(),
        cells,
        task_ids: tasks.iter().map(|t| t.id).collect(),
        seeds,
    })
}

impl AblationGrid {
    pub fn cell(&self, score: ScoreModel, scheme: &str) -> Option<f64> {
        let r = self.scores.iter().position(|&s| s == score)?;
        let c = self.schemes.iter().position(|s| s == scheme)?;
        Some(self.cells[r][c])
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("score,{}\n", self.schemes.join(","));
        for (score, row) in self.scores.iter().zip(&self.cells) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(out, "{},{}", score.name(), cells.join(",")).expect("writing to a String");
        }
        out
    }

    /// Aligned text table.
    pub fn to_table(&self) -> String {
        let width = self.schemes.iter().map(|s| s.len()).max().unwrap_or(8).max(10);
        let mut out = format!("{:<10}", "score");
        for s in &self.schemes {
            write!(out, " {s:>width$}").expect("writing to a String");
        }
        out.push('\n');
        for (score, row) in self.scores.iter().zip(&self.cells) {
            write!(out, "{:<10}", score.name()).expect("writing to a String");
            for v in row {
                write!(out, " {v:>width$.4}").expect("writing to a String");
            }
            out.push('\n');
        }
        out
    }
}
