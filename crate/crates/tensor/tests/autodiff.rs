//! Forward and gradient checks for the tape against independent re-implementations.

use htm_tensor::{grad_check, Activation, Matrix, Mlp, Tape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap()
}

/// Straight-line forward pass written without the library's matrix code.
fn naive_forward(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, layer) in mlp.layers.iter().enumerate() {
        let (n_in, n_out) = layer.weight.shape();
        let mut next = vec![0.0; n_out];
        for o in 0..n_out {
            let mut acc = layer.bias.as_slice()[o];
            for k in 0..n_in {
                acc += h[k] * layer.weight.as_slice()[k * n_out + o];
            }
            let act = if i + 1 == mlp.layers.len() { mlp.output } else { mlp.hidden };
            next[o] = match act {
                Activation::Relu => acc.max(0.0),
                Activation::Tanh => acc.tanh(),
                Activation::Sigmoid => 1.0 / (1.0 + (-acc).exp()),
                Activation::Identity => acc,
            };
        }
        h = next;
    }
    h
}

#[test]
fn mlp_forward_matches_naive_reimplementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for act in [Activation::Relu, Activation::Tanh, Activation::Sigmoid] {
        let mlp = Mlp::new(&[5, 7, 6, 3], act, Activation::Identity, &mut rng).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = mlp.apply(&x).unwrap();
            let want = naive_forward(&mlp, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }
}

/// Loss exercising every op: mlp → slice/concat → exp/square/mul/sub →
/// group dot → softmax cross-entropy, plus a BCE branch and a transpose.
fn composite_loss(params: &[Matrix], x: &Matrix, labels: &[f64]) -> (f64, Vec<Matrix>) {
    let mut t = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| t.param(p.clone())).collect();
    let xv = t.constant(x.clone());
    let h = t.matmul(xv, vars[0]).unwrap();
    let h = t.add_row(h, vars[1]).unwrap();
    let h = t.tanh(h);
    let a = t.slice_cols(h, 0, 3).unwrap();
    let b = t.slice_cols(h, 3, 6).unwrap();
    let e = t.exp(b);
    let s = t.sigmoid(a);
    let m = t.mul(e, s).unwrap();
    let d = t.sub(m, a).unwrap();
    let q = t.square(d);
    let cat = t.concat_cols(&[q, a]).unwrap(); // rows x 6
    let wt = t.transpose(vars[2]);
    let z = t.matmul(cat, wt).unwrap(); // rows x 2
    // queries: first 2 rows, candidates: rows 2..6 (group 2)
    let rows = t.value(z).rows();
    assert_eq!(rows, 6);
    let zq = t.slice_cols(z, 0, 2).unwrap();
    let queries = {
        let v = t.value(zq).clone();
        let top = Matrix::from_rows(&[v.row(0).to_vec(), v.row(1).to_vec()]).unwrap();
        // keep differentiability through a mask product instead of a row gather
        let mask = Matrix::from_vec(2, 6, vec![1., 0., 0., 0., 0., 0., 0., 1., 0., 0., 0., 0.]).unwrap();
        let mv = t.constant(mask);
        let g = t.matmul(mv, zq).unwrap();
        debug_assert_eq!(t.value(g), &top);
        g
    };
    let cand_mask = {
        let mut m = Matrix::zeros(4, 6);
        for i in 0..4 {
            m.set(i, i + 2, 1.0);
        }
        t.constant(m)
    };
    let cands = t.matmul(cand_mask, zq).unwrap();
    let logits = t.group_dot(cands, queries, 2).unwrap();
    let xent = t.softmax_xent_first(logits).unwrap();
    let col = t.slice_cols(z, 1, 2).unwrap();
    let bce = t.bce_with_logits(col, labels).unwrap();
    let relu = t.relu(z);
    let rs = t.mean(relu);
    let off = t.offset(rs, 0.3);
    let sc = t.scale(off, 0.5);
    let tot = t.add(xent, bce).unwrap();
    let tot = t.add(tot, sc).unwrap();
    let total = t.sum(tot);
    let g = t.backward(total).unwrap();
    (t.value(total).item().unwrap(), vars.iter().map(|v| g.wrt(*v)).collect())
}

#[test]
fn composite_graph_passes_finite_difference_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let params = vec![
            random_matrix(&mut rng, 4, 6),
            random_matrix(&mut rng, 1, 6),
            random_matrix(&mut rng, 2, 6),
        ];
        let x = random_matrix(&mut rng, 6, 4);
        let labels: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
        let (_, analytic) = composite_loss(&params, &x, &labels);
        let report = grad_check(|p| composite_loss(p, &x, &labels).0, &params, &analytic, 1e-5, 1e-4);
        assert!(report.passed, "{report:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mlp_gradients_match_finite_differences(seed in 0u64..10_000, batch in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::new(&[3, 5, 2], Activation::Tanh, Activation::Sigmoid, &mut rng).unwrap();
        let x = random_matrix(&mut rng, batch, 3);
        let loss_of = |params: &[Matrix]| -> (f64, Vec<Matrix>) {
            let mut m = mlp.clone();
            for (dst, src) in m.params_mut().into_iter().zip(params) {
                *dst = src.clone();
            }
            let mut t = Tape::new();
            let vars = m.bind(&mut t);
            let xv = t.constant(x.clone());
            let y = m.forward_on_tape(&mut t, &vars, xv).unwrap();
            let sq = t.square(y);
            let l = t.sum(sq);
            let g = t.backward(l).unwrap();
            (t.value(l).item().unwrap(), vars.as_slice().iter().map(|v| g.wrt(*v)).collect())
        };
        let params: Vec<Matrix> = mlp.params().into_iter().cloned().collect();
        let (_, analytic) = loss_of(&params);
        let report = grad_check(|p| loss_of(p).0, &params, &analytic, 1e-5, 1e-4);
        prop_assert!(report.passed, "{:?}", report);
    }
}
