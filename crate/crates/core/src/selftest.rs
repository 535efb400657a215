//! Built-in consistency checks: finite-difference gradients of every
//! training loss, shortest paths against exhaustive search, and the Jensen
//! bound on random plans.

use htm_tensor::{grad_check, GradCheckReport, Matrix};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::connectivity::{cpc_loss, sptm_bce_loss, ConnectivityModel, CpcBatch, CpcConfig, SptmBatch, SptmClassifier, SptmConfig};
use crate::controller::{inverse_loss, InverseBatch, InverseConfig, InverseModel};
use crate::error::Result;
use crate::generator::{CvaeBatch, CvaeConfig, CvaeModel};
use crate::planner::{dijkstra, edge_weights, jensen_bound_check, PlanGraph, WeightScheme};
use crate::rng::stream;

pub const GRAD_TOL: f64 = 1e-4;
const DELTA: f64 = 1e-6;

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
        .expect("sized")
}

fn jitter(params: Vec<&mut Matrix>, scale: f64, rng: &mut ChaCha8Rng) {
    for p in params {
        for v in p.as_mut_slice() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

/// Worst finite-difference error over `instances` random small problems.
#[derive(Clone, Debug, Serialize)]
pub struct GradSuiteResult {
    pub loss: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn summarize(loss: &'static str, reports: &[GradCheckReport]) -> GradSuiteResult {
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    GradSuiteResult {
        loss,
        instances: reports.len(),
        max_rel_error,
        passed: reports.iter().all(|r| r.passed),
    }
}

pub fn cpc_grad_check(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (obs, ctx, b, n) = (2, 3, 3, 4);
    let cfg = CpcConfig {
        latent: 3,
        hidden: 5,
        depth: 1,
        seed: rng.random(),
        ..Default::default()
    };
    let mut model = ConnectivityModel::new(obs, ctx, &cfg)?;
    model.w = random_matrix(3, 3, 1.0, rng);
    jitter(model.encoder.params_mut(), 0.1, rng);
    let batch = CpcBatch {
        anchors: random_matrix(b, obs, 1.0, rng),
        candidates: random_matrix(b * n, obs, 1.0, rng),
        ctx: random_matrix(b, ctx, 1.0, rng),
        offsets: vec![1; b],
        hallucinated: vec![false; b * n],
    };
    let (_, grads) = model.loss_and_grads(&batch)?;
    let params: Vec<Matrix> = model.params().into_iter().cloned().collect();
    let loss = |p: &[Matrix]| {
        let mut m = model.clone();
        m.set_params(p);
        cpc_loss(&m, &batch).expect("valid batch")
    };
    Ok(grad_check(loss, &params, &grads, DELTA, GRAD_TOL))
}

pub fn sptm_grad_check(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (obs, ctx, b) = (2, 3, 6);
    let cfg = SptmConfig {
        latent: 3,
        hidden: 4,
        depth: 1,
        seed: rng.random(),
        ..Default::default()
    };
    let mut model = SptmClassifier::new(obs, ctx, &cfg)?;
    jitter(model.params_mut(), 0.1, rng);
    let batch = SptmBatch {
        from: random_matrix(b, obs, 1.0, rng),
        to: random_matrix(b, obs, 1.0, rng),
        ctx: random_matrix(b, ctx, 1.0, rng),
        labels: (0..b).map(|i| (i % 2) as f64).collect(),
    };
    let (_, grads) = model.loss_and_grads(&batch)?;
    let params: Vec<Matrix> = model.params().into_iter().cloned().collect();
    let loss = |p: &[Matrix]| {
        let mut m = model.clone();
        m.set_params(p);
        sptm_bce_loss(&m, &batch).expect("valid batch")
    };
    Ok(grad_check(loss, &params, &grads, DELTA, GRAD_TOL))
}

/// The ELBO with its reparameterisation noise held fixed.
pub fn cvae_grad_check(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (obs, ctx, b) = (3, 2, 4);
    let cfg = CvaeConfig {
        latent: 2,
        hidden: 4,
        depth: 1,
        beta: 0.7,
        seed: rng.random(),
        ..Default::default()
    };
    let mut model = CvaeModel::new(obs, ctx, &cfg)?;
    jitter(model.params_mut(), 0.1, rng);
    let batch = CvaeBatch {
        obs: random_matrix(b, obs, 1.0, rng).map(|v| 0.5 + 0.5 * v),
        ctx: random_matrix(b, ctx, 1.0, rng),
    };
    let noise = random_matrix(b, 2, 1.5, rng);
    let (_, grads) = model.elbo_and_grads(&batch, &noise, cfg.beta)?;
    let params: Vec<Matrix> = model.params().into_iter().cloned().collect();
    let loss = |p: &[Matrix]| {
        let mut m = model.clone();
        m.set_params(p);
        m.elbo(&batch, &noise, cfg.beta).expect("valid batch").total
    };
    Ok(grad_check(loss, &params, &grads, DELTA, GRAD_TOL))
}

pub fn inverse_grad_check(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (obs, ctx, b) = (2, 3, 5);
    let cfg = InverseConfig {
        hidden: 5,
        depth: 1,
        seed: rng.random(),
        ..Default::default()
    };
    let mut model = InverseModel::new(obs, ctx, 0.1, &cfg)?;
    jitter(model.params_mut(), 0.1, rng);
    let batch = InverseBatch {
        current: random_matrix(b, obs, 1.0, rng),
        target: random_matrix(b, obs, 1.0, rng),
        ctx: random_matrix(b, ctx, 1.0, rng),
        actions: random_matrix(b, 2, 0.1, rng),
    };
    let (_, grads) = model.loss_and_grads(&batch)?;
    let params: Vec<Matrix> = model.params().into_iter().cloned().collect();
    let loss = |p: &[Matrix]| {
        let mut m = model.clone();
        m.set_params(p);
        inverse_loss(&m, &batch).expect("valid batch")
    };
    Ok(grad_check(loss, &params, &grads, DELTA, GRAD_TOL))
}

/// All four training losses, `instances` random problems each.
pub fn grad_suite(instances: usize, seed: u64) -> Result<Vec<GradSuiteResult>> {
    type Check = fn(&mut ChaCha8Rng) -> Result<GradCheckReport>;
    let checks: [(&'static str, Check); 4] = [
        ("cpc_loss", cpc_grad_check),
        ("sptm_bce_loss", sptm_grad_check),
        ("cvae_elbo", cvae_grad_check),
        ("inverse_l2_loss", inverse_grad_check),
    ];
    let mut out = Vec::new();
    for (k, (name, check)) in checks.into_iter().enumerate() {
        let mut rng = stream(seed, k as u64);
        let reports = (0..instances).map(|_| check(&mut rng)).collect::<Result<Vec<_>>>()?;
        out.push(summarize(name, &reports));
    }
    Ok(out)
}

/// Dense digraph with weights in `[0.1, 2)`.
pub fn random_dense_graph(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Option<f64>>> {
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (i != j).then(|| rng.random_range(0.1..2.0)))
                .collect()
        })
        .collect()
}

/// Cheapest simple path by exhaustive enumeration.
pub fn brute_force_shortest(weights: &[Vec<Option<f64>>], start: usize, goal: usize) -> Option<f64> {
    fn go(w: &[Vec<Option<f64>>], at: usize, goal: usize, seen: &mut Vec<bool>, cost: f64, best: &mut Option<f64>) {
        if at == goal {
            *best = Some(best.map_or(cost, |b: f64| b.min(cost)));
            return;
        }
        for next in 0..w.len() {
            if let (false, Some(c)) = (seen[next], w[at][next]) {
                seen[next] = true;
                go(w, next, goal, seen, cost + c, best);
                seen[next] = false;
            }
        }
    }
    let mut seen = vec![false; weights.len()];
    seen[start] = true;
    let mut best = None;
    go(weights, start, goal, &mut seen, 0.0, &mut best);
    best
}

/// Number of random graphs (2..=8 nodes) where Dijkstra's total differs
/// from the exhaustive optimum by more than `1e-9`.
pub fn dijkstra_suite(trials: usize, seed: u64) -> Result<usize> {
    let mut rng = stream(seed, 0xD1);
    let mut mismatches = 0;
    for _ in 0..trials {
        let n = rng.random_range(2..=8);
        let w = random_dense_graph(n, &mut rng);
        let (s, g) = (rng.random_range(0..n), rng.random_range(0..n));
        let (_, total) = dijkstra(&w, s, g)?;
        let oracle = brute_force_shortest(&w, s, g).expect("dense graph");
        if (total - oracle).abs() > 1e-9 {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}

/// Number of Jensen-bound violations over random logit graphs and random
/// simple paths.
pub fn jensen_suite(trials: usize, seed: u64) -> Result<usize> {
    let mut rng = stream(seed, 0x1E);
    let mut violations = 0;
    for _ in 0..trials {
        let n = rng.random_range(2..=12);
        let logits: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.random_range(-8.0..8.0)).collect())
            .collect();
        let graph = PlanGraph {
            nodes: Vec::new(),
            weights: edge_weights(&logits, WeightScheme::Normalized),
            logits,
            scheme: WeightScheme::Normalized,
        };
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let len = rng.random_range(2..=n);
        let plan = crate::planner::Plan {
            nodes: order[..len].to_vec(),
            observations: Vec::new(),
            total_weight: 0.0,
            edge_weights: Vec::new(),
            edge_logits: Vec::new(),
        };
        if !jensen_bound_check(&graph, &plan)?.holds {
            violations += 1;
        }
    }
    Ok(violations)
}
