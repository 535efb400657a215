use std::collections::BTreeMap;

use htm_core::connectivity::{
    cpc_loss, cpc_loss_from_logits, sample_cpc_batch, sample_sptm_batch, sptm_bce_loss, sptm_label,
    successor_ranking_rate, train_cpc, ConnectivityModel, CpcBatch, CpcConfig, SptmClassifier, SptmConfig,
    CPC_KIND, SPTM_KIND,
};
use htm_core::dataset::{collect_dataset, DataSpec, TransitionDataset};
use htm_core::planner::PairScorer;
use htm_core::world::{encode_context, ContextEncoding, ObsMode, Observation, WorldConfig};
use htm_tensor::{Checkpoint, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn small_data() -> (TransitionDataset, WorldConfig) {
    let world = WorldConfig::default();
    let spec = DataSpec {
        contexts: 5,
        trajectories: 4,
        horizon: 12,
        ..Default::default()
    };
    (collect_dataset(&spec, &world).unwrap(), world)
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_batch(b: usize, n: usize, rng: &mut ChaCha8Rng) -> CpcBatch {
    CpcBatch {
        anchors: random(b, 2, rng),
        candidates: random(b * n, 2, rng),
        ctx: random(b, 4, rng),
        offsets: vec![1; b],
        hallucinated: vec![false; b * n],
    }
}

#[test]
fn untrained_bilinear_form_gives_log_n() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = ConnectivityModel::new(2, 4, &CpcConfig::default()).unwrap();
    let batch = random_batch(6, 8, &mut rng);
    assert!((cpc_loss(&model, &batch).unwrap() - 8f64.ln()).abs() < 1e-12);
}

#[test]
fn loss_matches_hand_softmax() {
    let logits = Matrix::from_rows(&[vec![2.0, 0.0, 1.0], vec![-1.0, 3.0, 0.5]]).unwrap();
    let expected = ((1.0 + (-2f64).exp() + (-1f64).exp()).ln() + lse(&[-1.0, 3.0, 0.5]) + 1.0) / 2.0;
    assert!((cpc_loss_from_logits(&logits) - expected).abs() < 1e-12);
}

#[test]
fn saturated_logits_are_safe() {
    let right = Matrix::from_rows(&[vec![500.0, -500.0, -500.0]]).unwrap();
    let wrong = Matrix::from_rows(&[vec![-500.0, 500.0, -500.0]]).unwrap();
    assert!(cpc_loss_from_logits(&right).abs() < 1e-12);
    assert!((cpc_loss_from_logits(&wrong) - 1000.0).abs() < 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut model = ConnectivityModel::new(2, 4, &CpcConfig { latent: 4, ..Default::default() }).unwrap();
    model.w = Matrix::identity(4).map(|v| 1e4 * v);
    let batch = random_batch(4, 6, &mut rng);
    let logits = model.batch_logits(&batch).unwrap();
    assert!(logits.max_abs() > 100.0);
    let (loss, grads) = model.loss_and_grads(&batch).unwrap();
    let oracle: f64 = (0..4).map(|b| lse(logits.row(b)) - logits.get(b, 0)).sum::<f64>() / 4.0;
    assert!((loss - oracle).abs() < 1e-9 * oracle.max(1.0));
    assert!(grads.iter().all(Matrix::is_finite));
}

#[test]
fn pair_scores_are_bilinear_in_embeddings() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = ConnectivityModel::new(2, 4, &CpcConfig { latent: 3, ..Default::default() }).unwrap();
    model.w = random(3, 3, &mut rng);
    let ctx = ContextEncoding(vec![0.2, 0.1, -0.4, 0.9]);
    let nodes: Vec<Observation> = (0..5)
        .map(|_| Observation::new(ObsMode::State, vec![rng.random(), rng.random()]))
        .collect();
    let l = model.logit_matrix(&nodes, &ctx).unwrap();
    for j in 0..5 {
        for i in 0..5 {
            let zi = model.encoder.apply(&[nodes[i].data.clone(), ctx.0.clone()].concat()).unwrap();
            let zj = model.encoder.apply(&[nodes[j].data.clone(), ctx.0.clone()].concat()).unwrap();
            let mut s = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    s += zi[a] * model.w.get(a, b) * zj[b];
                }
            }
            assert!((l[i][j] - s).abs() < 1e-12);
            assert!((model.score_pair(&nodes[j], &nodes[i], &ctx).unwrap() - s).abs() < 1e-12);
        }
    }
}

/// Locations `(trajectory, t)` of every observation, keyed by its bits.
fn locate(data: &TransitionDataset) -> BTreeMap<Vec<u64>, Vec<(usize, usize)>> {
    let mut out: BTreeMap<Vec<u64>, Vec<(usize, usize)>> = BTreeMap::new();
    for (ti, t) in data.trajectories.iter().enumerate() {
        for (k, o) in t.observations.iter().enumerate() {
            out.entry(o.data.iter().map(|v| v.to_bits()).collect()).or_default().push((ti, k));
        }
    }
    out
}

fn key(row: &[f64]) -> Vec<u64> {
    row.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn batches_pair_anchors_with_true_successors_and_same_context_negatives() {
    let (data, world) = small_data();
    let where_is = locate(&data);
    let encodings: BTreeMap<u64, Vec<u64>> = data
        .contexts
        .iter()
        .map(|c| (c.id, key(&encode_context(c, &world, data.mode).0)))
        .collect();
    let cfg = CpcConfig {
        batch: 40,
        candidates: 6,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = sample_cpc_batch(&data, &world, None, &cfg, &mut rng).unwrap();
    assert_eq!(batch.group(), 6);
    assert!(batch.hallucinated.iter().all(|h| !h));
    for b in 0..40 {
        let k = batch.offsets[b];
        assert!((1..=cfg.horizon).contains(&k));
        let anchors = &where_is[&key(batch.anchors.row(b))];
        let positive = &where_is[&key(batch.candidates.row(b * 6))];
        assert!(anchors.iter().any(|&(ti, t)| positive.contains(&(ti, t + k))));
        let ctx_id = data.trajectories[anchors[0].0].context_id;
        assert_eq!(key(batch.ctx.row(b)), encodings[&ctx_id]);
        for j in 1..6 {
            let neg = &where_is[&key(batch.candidates.row(b * 6 + j))];
            assert!(neg.iter().any(|&(ti, _)| data.trajectories[ti].context_id == ctx_id));
        }
    }
}

#[test]
fn hallucinated_negatives_follow_the_fraction() {
    let (data, world) = small_data();
    let pool: BTreeMap<u64, Vec<Observation>> = data
        .contexts
        .iter()
        .map(|c| (c.id, vec![Observation::new(ObsMode::State, vec![0.5, c.id as f64 / 100.0]); 3]))
        .collect();
    for (frac, expected) in [(0.0, 0), (0.25, 4), (0.5, 8), (1.0, 15)] {
        let cfg = CpcConfig {
            batch: 10,
            candidates: 16,
            hallucinated_frac: frac,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = sample_cpc_batch(&data, &world, Some(&pool), &cfg, &mut rng).unwrap();
        for b in 0..10 {
            let group = &batch.hallucinated[b * 16..(b + 1) * 16];
            assert!(!group[0]);
            assert_eq!(group.iter().filter(|h| **h).count(), expected, "φ = {frac}");
            for j in 0..16 {
                if group[j] {
                    assert_eq!(batch.candidates.get(b * 16 + j, 0), 0.5);
                }
            }
        }
    }
}

#[test]
fn offsets_are_uniform_and_horizon_one_is_immediate() {
    let (data, world) = small_data();
    let cfg = CpcConfig {
        batch: 5000,
        candidates: 2,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let batch = sample_cpc_batch(&data, &world, None, &cfg, &mut rng).unwrap();
    let mut counts = [0usize; 5];
    for &k in &batch.offsets {
        counts[k - 1] += 1;
    }
    let e = 1000.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    // 99.9th percentile of χ² with 4 degrees of freedom.
    assert!(chi2 < 18.47, "{counts:?}");

    let one = CpcConfig {
        horizon: 1,
        batch: 200,
        ..Default::default()
    };
    let batch = sample_cpc_batch(&data, &world, None, &one, &mut rng).unwrap();
    assert!(batch.offsets.iter().all(|&k| k == 1));
}

#[test]
fn classifier_labels_follow_the_gap_rule() {
    assert_eq!(sptm_label(Some(1), 5, 20), Some(true));
    assert_eq!(sptm_label(Some(5), 5, 20), Some(true));
    assert_eq!(sptm_label(Some(6), 5, 20), None);
    assert_eq!(sptm_label(Some(19), 5, 20), None);
    assert_eq!(sptm_label(Some(20), 5, 20), Some(false));
    assert_eq!(sptm_label(None, 5, 20), Some(false));
    assert_eq!(sptm_label(Some(0), 5, 20), Some(true));
}

#[test]
fn classifier_batches_are_balanced_and_bce_matches_oracle() {
    let (data, world) = small_data();
    let where_is = locate(&data);
    let cfg = SptmConfig {
        batch: 64,
        negative_gap: 8,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let batch = sample_sptm_batch(&data, &world, &cfg, &mut rng).unwrap();
    assert_eq!(batch.labels.iter().filter(|&&y| y == 1.0).count(), 32);
    for b in 0..64 {
        let from = &where_is[&key(batch.from.row(b))];
        let to = &where_is[&key(batch.to.row(b))];
        let near = from.iter().any(|&(ti, t)| {
            to.iter().any(|&(tj, u)| ti == tj && u > t && u - t <= cfg.horizon)
        });
        if batch.labels[b] == 1.0 {
            assert!(near);
        }
    }

    let model = SptmClassifier::new(2, 4, &cfg).unwrap();
    let logits = model.batch_logits(&batch).unwrap();
    let oracle: f64 = logits
        .iter()
        .zip(&batch.labels)
        .map(|(&x, &y)| {
            let p = 1.0 / (1.0 + (-x).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / 64.0;
    assert!((sptm_bce_loss(&model, &batch).unwrap() - oracle).abs() < 1e-12);
}

#[test]
fn checkpoints_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut cpc = ConnectivityModel::new(2, 4, &CpcConfig::default()).unwrap();
    cpc.w = random(16, 16, &mut rng);
    let bytes = cpc.to_checkpoint().to_bytes();
    let back = ConnectivityModel::from_checkpoint(&Checkpoint::read_from(bytes.as_slice(), CPC_KIND).unwrap()).unwrap();
    assert_eq!(back, cpc);
    assert!(Checkpoint::read_from(bytes.as_slice(), SPTM_KIND).is_err());

    let sptm = SptmClassifier::new(2, 4, &SptmConfig::default()).unwrap();
    let bytes = sptm.to_checkpoint().to_bytes();
    let back = SptmClassifier::from_checkpoint(&Checkpoint::read_from(bytes.as_slice(), SPTM_KIND).unwrap()).unwrap();
    assert_eq!(back, sptm);
}

#[test]
fn short_training_beats_chance_and_is_deterministic() {
    let (data, world) = small_data();
    let cfg = CpcConfig {
        epochs: 4,
        steps_per_epoch: 30,
        batch: 32,
        candidates: 8,
        hallucinated_frac: 0.0,
        validation_batches: 2,
        ..Default::default()
    };
    let (a, log_a) = train_cpc(&data, &world, None, &cfg).unwrap();
    let (b, log_b) = train_cpc(&data, &world, None, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    let ln8 = 8f64.ln();
    assert!((log_a.initial_val().unwrap() - ln8).abs() < 1e-12);
    assert!((log_a.epochs[0].extra.unwrap()).abs() < 1e-12);
    assert!(log_a.best_val().unwrap() < ln8 - 0.3, "{log_a:?}");
    let held = data.contexts[0].id;
    let rate = successor_ranking_rate(&a, &data, &world, held, 30, 50, 0.1, 9).unwrap();
    assert!((0.0..=1.0).contains(&rate));
    let again = successor_ranking_rate(&a, &data, &world, held, 30, 50, 0.1, 9).unwrap();
    assert_eq!(rate, again);
}
