//! Graph construction over hallucinated observations and shortest-path
//! search.

use serde::{Deserialize, Serialize};

use crate::connectivity::{ConnectivityModel, SptmClassifier};
use crate::error::{HtmError, Result};
use crate::generator::{hallucinate, CvaeModel};
use crate::world::{ContextEncoding, Observation};
use htm_tensor::log_sum_exp;

/// Pairwise logits over a node set.
pub trait PairScorer {
    /// `L[i][j]` is the logit of the transition `j → i`, diagonal included.
    fn logit_matrix(&self, nodes: &[Observation], ctx: &ContextEncoding) -> Result<Vec<Vec<f64>>>;

    fn horizon(&self) -> usize;
}

impl PairScorer for ConnectivityModel {
    fn logit_matrix(&self, nodes: &[Observation], ctx: &ContextEncoding) -> Result<Vec<Vec<f64>>> {
        let z = self.encode(nodes, ctx)?;
        // W g(o_j) once per column.
        let wz: Vec<Vec<f64>> = (0..nodes.len())
            .map(|j| (0..self.w.rows()).map(|r| dot(self.w.row(r), z.row(j))).collect())
            .collect();
        Ok((0..nodes.len())
            .map(|i| wz.iter().map(|col| dot(z.row(i), col)).collect())
            .collect())
    }

    fn horizon(&self) -> usize {
        self.horizon
    }
}

impl PairScorer for SptmClassifier {
    fn logit_matrix(&self, nodes: &[Observation], ctx: &ContextEncoding) -> Result<Vec<Vec<f64>>> {
        let z = self.encode(nodes, ctx)?;
        let n = nodes.len();
        let mut out = vec![vec![0.0; n]; n];
        for (i, row) in out.iter_mut().enumerate() {
            let to = htm_tensor::Matrix::from_rows(&vec![z.row(i); n])?;
            *row = self.logits_from_codes(&z, &to)?;
        }
        Ok(out)
    }

    fn horizon(&self) -> usize {
        self.horizon
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Edge weighting rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightScheme {
    /// `1 / f(o_i, o_j)` with `f = exp(logit)`.
    Inverse,
    /// `Σ_s f(o_s, o_j) / f(o_i, o_j)`, summed over every node.
    Normalized,
    /// Unit weight where `sigmoid(logit) >= threshold`, no edge otherwise.
    SptmThreshold { threshold: f64 },
    /// `exp(-p)` with `p = sigmoid(logit)` the classifier probability.
    SptmExp,
}

impl WeightScheme {
    pub fn name(&self) -> &'static str {
        match self {
            WeightScheme::Inverse => "inverse",
            WeightScheme::Normalized => "normalized",
            WeightScheme::SptmThreshold { .. } => "sptm_threshold",
            WeightScheme::SptmExp => "sptm_exp",
        }
    }
}

/// Scheme selector as written in configuration files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Inverse,
    Normalized,
    SptmThreshold,
    SptmExp,
}

impl SchemeKind {
    pub fn with_threshold(self, s_shortcut: f64) -> WeightScheme {
        match self {
            SchemeKind::Inverse => WeightScheme::Inverse,
            SchemeKind::Normalized => WeightScheme::Normalized,
            SchemeKind::SptmThreshold => WeightScheme::SptmThreshold { threshold: s_shortcut },
            SchemeKind::SptmExp => WeightScheme::SptmExp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanningConfig {
    /// Hallucinated nodes per plan (`M`).
    pub samples: usize,
    pub scheme: SchemeKind,
    /// Edge threshold of the thresholded scheme, in `(0, 1)`.
    pub s_shortcut: f64,
}

impl Default for PlanningConfig {
    fn default() -> Self {
        Self {
            samples: 300,
            scheme: SchemeKind::Normalized,
            s_shortcut: 0.5,
        }
    }
}

impl PlanningConfig {
    pub fn weight_scheme(&self) -> WeightScheme {
        self.scheme.with_threshold(self.s_shortcut)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s_shortcut > 0.0 && self.s_shortcut < 1.0) {
            return Err(HtmError::Config {
                key: "planning.s_shortcut".into(),
                msg: format!("must lie in (0, 1), got {}", self.s_shortcut),
            });
        }
        Ok(())
    }
}

/// Weight matrix `w[j][i]` for the edge `j → i` from `L[i][j]`; `None` is
/// no edge. Self-loops are never emitted.
pub fn edge_weights(logits: &[Vec<f64>], scheme: WeightScheme) -> Vec<Vec<Option<f64>>> {
    let n = logits.len();
    let column_lse: Vec<f64> = match scheme {
        WeightScheme::Normalized => (0..n)
            .map(|j| log_sum_exp(&logits.iter().map(|row| row[j]).collect::<Vec<_>>()))
            .collect(),
        _ => Vec::new(),
    };
    let mut w = vec![vec![None; n]; n];
    for (j, wj) in w.iter_mut().enumerate() {
        for (i, slot) in wj.iter_mut().enumerate() {
            if i == j {
                continue;
            }
            let l = logits[i][j];
            *slot = match scheme {
                WeightScheme::Inverse => Some((-l).exp()),
                WeightScheme::SptmExp => Some((-htm_tensor::sigmoid(l)).exp()),
                WeightScheme::Normalized => Some((column_lse[j] - l).exp()),
                WeightScheme::SptmThreshold { threshold } => {
                    (htm_tensor::sigmoid(l) >= threshold).then_some(1.0)
                }
            }
            .filter(|v| !v.is_nan());
        }
    }
    w
}

/// Shortest path under nonnegative weights, `O(V²)`. Among equal-cost
/// paths the lexicographically smallest node sequence wins.
pub fn dijkstra(weights: &[Vec<Option<f64>>], start: usize, goal: usize) -> Result<(Vec<usize>, f64)> {
    let n = weights.len();
    if start >= n || goal >= n {
        return Err(HtmError::Scheme(format!("node index out of range for {n} nodes")));
    }
    let mut dist = vec![f64::INFINITY; n];
    let mut path: Vec<Option<Vec<usize>>> = vec![None; n];
    let mut done = vec![false; n];
    dist[start] = 0.0;
    path[start] = Some(vec![start]);
    loop {
        let mut u = None;
        for v in 0..n {
            if done[v] || dist[v].is_infinite() {
                continue;
            }
            u = match u {
                None => Some(v),
                Some(b) if better(dist[v], &path[v], dist[b], &path[b]) => Some(v),
                keep => keep,
            };
        }
        let Some(u) = u else { break };
        done[u] = true;
        if u == goal {
            break;
        }
        for v in 0..n {
            let Some(w) = weights[u][v] else { continue };
            if done[v] {
                continue;
            }
            let d = dist[u] + w;
            let mut candidate = path[u].clone().expect("settled node has a path");
            candidate.push(v);
            let candidate = Some(candidate);
            if better(d, &candidate, dist[v], &path[v]) {
                dist[v] = d;
                path[v] = candidate;
            }
        }
    }
    match path[goal].take() {
        Some(p) if done[goal] => Ok((p, dist[goal])),
        _ => Err(HtmError::NoPath { start, goal }),
    }
}

fn better(d: f64, p: &Option<Vec<usize>>, best_d: f64, best_p: &Option<Vec<usize>>) -> bool {
    d < best_d || (d == best_d && p < best_p && p.is_some())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    /// Node indices, start first, goal last.
    pub nodes: Vec<usize>,
    pub observations: Vec<Observation>,
    pub total_weight: f64,
    pub edge_weights: Vec<f64>,
    /// Logits `L[next][prev]` of each edge.
    pub edge_logits: Vec<f64>,
}

/// Nodes, their pairwise logits, and the weights derived from them.
#[derive(Clone, Debug)]
pub struct PlanGraph {
    pub nodes: Vec<Observation>,
    pub logits: Vec<Vec<f64>>,
    pub weights: Vec<Vec<Option<f64>>>,
    pub scheme: WeightScheme,
}

impl PlanGraph {
    pub fn build(
        scorer: &dyn PairScorer,
        nodes: Vec<Observation>,
        ctx: &ContextEncoding,
        scheme: WeightScheme,
    ) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(HtmError::Empty(format!("plan graph needs 2 nodes, got {}", nodes.len())));
        }
        let logits = scorer.logit_matrix(&nodes, ctx)?;
        let weights = edge_weights(&logits, scheme);
        Ok(Self {
            nodes,
            logits,
            weights,
            scheme,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shortest_path(&self, start: usize, goal: usize) -> Result<Plan> {
        let (nodes, total) = dijkstra(&self.weights, start, goal)?;
        let mut edge_weights = Vec::new();
        let mut edge_logits = Vec::new();
        for pair in nodes.windows(2) {
            edge_weights.push(self.weights[pair[0]][pair[1]].expect("path edge exists"));
            edge_logits.push(self.logits[pair[1]][pair[0]]);
        }
        Ok(Plan {
            observations: nodes.iter().map(|&i| self.nodes[i].clone()).collect(),
            nodes,
            total_weight: total,
            edge_weights,
            edge_logits,
        })
    }
}

/// Hallucinates `m` observations, appends the start (index `m`) and goal
/// (index `m + 1`), and plans between them.
pub fn plan_end_to_end(
    generator: &CvaeModel,
    scorer: &dyn PairScorer,
    ctx: &ContextEncoding,
    start: &Observation,
    goal: &Observation,
    m: usize,
    scheme: WeightScheme,
    seed: u64,
) -> Result<(PlanGraph, Plan)> {
    let set = hallucinate(generator, ctx, start.mode, m, seed)?;
    let mut nodes = set.observations;
    nodes.push(start.clone());
    nodes.push(goal.clone());
    let graph = PlanGraph::build(scorer, nodes, ctx, scheme)?;
    let plan = graph.shortest_path(m, m + 1)?;
    Ok((graph, plan))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JensenCheck {
    /// `log((1/T) Σ ω)`.
    pub lhs: f64,
    /// `(1/T) Σ log ω`.
    pub rhs: f64,
    pub holds: bool,
}

/// Compares the log of the mean NORMALIZED edge weight along `plan` with
/// the mean log weight.
pub fn jensen_bound_check(graph: &PlanGraph, plan: &Plan) -> Result<JensenCheck> {
    if graph.scheme != WeightScheme::Normalized {
        return Err(HtmError::Scheme(format!(
            "Jensen bound is defined for the normalized scheme, not {}",
            graph.scheme.name()
        )));
    }
    let mut omega = Vec::with_capacity(plan.nodes.len());
    for pair in plan.nodes.windows(2) {
        let w = graph
            .weights
            .get(pair[0])
            .and_then(|row| row.get(pair[1]).copied().flatten())
            .ok_or_else(|| HtmError::Scheme(format!("plan edge {} -> {} is not in the graph", pair[0], pair[1])))?;
        omega.push(w);
    }
    if omega.is_empty() {
        return Err(HtmError::Empty("plan has no edges".into()));
    }
    let t = omega.len() as f64;
    let lhs = (omega.iter().sum::<f64>() / t).ln();
    let rhs = omega.iter().map(|w| w.ln()).sum::<f64>() / t;
    Ok(JensenCheck {
        lhs,
        rhs,
        holds: lhs >= rhs - 1e-12,
    })
}

/// Logit of the single transition `from → to` under any scorer.
pub fn pair_logit(scorer: &dyn PairScorer, from: &Observation, to: &Observation, ctx: &ContextEncoding) -> Result<f64> {
    let l = scorer.logit_matrix(&[from.clone(), to.clone()], ctx)?;
    Ok(l[1][0])
}
