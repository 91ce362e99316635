use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::*;
use crate::rng::{component_rng, Component};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = component_rng(seed, Component::Init);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn check(params: &[Tensor], f: impl FnMut(&mut Graph, &[NodeId]) -> Result<NodeId, TensorError>) -> f64 {
    grad_check(params, 1e-5, CoordSelection::All, f).unwrap().max_rel_error
}

/// Projects onto fixed pseudo-random weights so every output element
/// contributes a distinct gradient.
fn project(g: &mut Graph, y: NodeId) -> Result<NodeId, TensorError> {
    let n = g.value(y).len();
    let w = (0..n).map(|i| 0.3 + ((i * 7919) % 13) as f64 * 0.1 - 0.6).collect();
    g.weighted_sum(y, w)
}

#[test]
fn dense_identity_and_hand_value() {
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(vec![3.0, 4.0]));
    let eye = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let zero = g.input(Tensor::zeros(vec![2]));
    let y = g.linear(x, eye, Some(zero)).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 4.0]);

    let w = g.input(t(&[1, 2], &[1.0, 2.0]));
    let b = g.input(Tensor::from_vec(vec![0.5]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[11.5]);
}

#[test]
fn dense_weight_gradient_of_sum_is_input_rows() {
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(vec![3.0, 4.0]));
    let w = g.leaf(t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]));
    let b = g.leaf(Tensor::zeros(vec![2]));
    let y = g.linear(x, w, Some(b)).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(w).unwrap(), &[3.0, 4.0, 3.0, 4.0]);
    assert_eq!(grads.get(b).unwrap(), &[1.0, 1.0]);
    assert!(grads.get(x).is_none());
}

#[test]
fn dense_shape_mismatch_is_an_error() {
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let w = g.input(Tensor::zeros(vec![1, 2]));
    assert!(matches!(g.linear(x, w, None), Err(TensorError::Shape(_))));
}

#[test]
fn dense_gradients_match_finite_differences() {
    let err = check(&[random(&[4, 5], 1), random(&[3, 5], 2), random(&[3], 3)], |g, p| {
        let y = g.linear(p[0], p[1], Some(p[2]))?;
        project(g, y)
    });
    assert!(err < 1e-7, "{err}");
}

#[test]
fn conv1d_hand_values_and_shapes() {
    let mut g = Graph::new();
    let x = g.input(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
    let k = g.input(t(&[1, 1, 3], &[1.0, 0.0, -1.0]));
    let b = g.input(Tensor::zeros(vec![1]));
    let y = g.conv1d(x, k, b).unwrap();
    assert_eq!(g.value(y).data(), &[-2.0, -2.0]);

    let x = g.input(Tensor::zeros(vec![3, 20]));
    let k = g.input(random(&[32, 3, 3], 4));
    let b = g.input(Tensor::from_vec((0..32).map(|i| i as f64).collect()));
    let y = g.conv1d(x, k, b).unwrap();
    assert_eq!(g.shape(y), &[32, 18]);
    for o in 0..32 {
        assert!(g.value(y).data()[o * 18..(o + 1) * 18].iter().all(|&v| v == o as f64));
    }

    let narrow = g.input(Tensor::zeros(vec![3, 2]));
    assert!(matches!(g.conv1d(narrow, k, b), Err(TensorError::Shape(_))));
}

#[test]
fn conv1d_gradients_match_finite_differences() {
    let err = check(&[random(&[2, 3, 7], 5), random(&[4, 3, 3], 6), random(&[4], 7)], |g, p| {
        let y = g.conv1d(p[0], p[1], p[2])?;
        project(g, y)
    });
    assert!(err < 1e-7, "{err}");
}

#[test]
fn batch_norm_train_standardizes_per_feature() {
    let x = random(&[16, 5], 8);
    let mut g = Graph::new();
    let xn = g.input(x);
    let gamma = g.input(Tensor::filled(vec![5], 1.0));
    let beta = g.input(Tensor::zeros(vec![5]));
    let (y, _, _) = g.batch_norm_train(xn, gamma, beta, 1e-8).unwrap();
    let v = g.value(y).data();
    for c in 0..5 {
        let col: Vec<f64> = (0..16).map(|r| v[r * 5 + c]).collect();
        let mean = col.iter().sum::<f64>() / 16.0;
        let var = col.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5);
    }

    let gamma2 = g.input(Tensor::filled(vec![5], 2.0));
    let beta3 = g.input(Tensor::filled(vec![5], 3.0));
    let (y, _, _) = g.batch_norm_train(xn, gamma2, beta3, 1e-8).unwrap();
    let v = g.value(y).data();
    let col: Vec<f64> = (0..16).map(|r| v[r * 5]).collect();
    let mean = col.iter().sum::<f64>() / 16.0;
    let std = libm::sqrt(col.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 16.0);
    assert!((mean - 3.0).abs() < 1e-6 && (std - 2.0).abs() < 1e-5);
}

#[test]
fn batch_norm_train_rejects_single_sample() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(vec![1, 3]));
    let gamma = g.input(Tensor::filled(vec![3], 1.0));
    let beta = g.input(Tensor::zeros(vec![3]));
    assert_eq!(g.batch_norm_train(x, gamma, beta, 1e-8).unwrap_err(), TensorError::BatchTooSmall(1));
}

#[test]
fn batch_norm_eval_with_unit_stats_is_affine() {
    let x = random(&[2, 3, 4], 9);
    let mut g = Graph::new();
    let xn = g.input(x.clone());
    let gamma = g.input(Tensor::filled(vec![3], 2.0));
    let beta = g.input(Tensor::filled(vec![3], -1.0));
    let y = g.batch_norm_eval(xn, gamma, beta, &[0.0; 3], &[1.0; 3], 0.0).unwrap();
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert!((a - (2.0 * b - 1.0)).abs() < 1e-15);
    }
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    let params = [random(&[3, 2, 4], 10), random(&[2], 11), random(&[2], 12)];
    let err = check(&params, |g, p| {
        let (y, _, _) = g.batch_norm_train(p[0], p[1], p[2], 1e-8)?;
        let y2 = g.square(y);
        let s = project(g, y)?;
        let s2 = project(g, y2)?;
        g.add(s, s2)
    });
    assert!(err < 1e-6, "train {err}");
    let err = check(&params, |g, p| {
        let y = g.batch_norm_eval(p[0], p[1], p[2], &[0.1, -0.2], &[0.5, 2.0], 1e-8)?;
        project(g, y)
    });
    assert!(err < 1e-7, "eval {err}");
}

#[test]
fn leaky_relu_values_and_boundary_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![5.0, -2.0, 0.0]));
    let y = g.leaky_relu(x, 0.01);
    assert_eq!(g.value(y).data(), &[5.0, -0.02, 0.0]);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[1.0, 0.01, 1.0]);
}

#[test]
fn dropout_identities_and_rate() {
    let mut rng = component_rng(3, Component::Dropout);
    let mut g = Graph::new();
    let x = g.input(random(&[100], 13));
    assert_eq!(g.dropout(x, 0.2, false, &mut rng), x);
    assert_eq!(g.dropout(x, 0.0, true, &mut rng), x);

    let big = g.input(Tensor::filled(vec![100_000], 1.0));
    let y = g.dropout(big, 0.2, true, &mut rng);
    let v = g.value(y).data();
    let zeros = v.iter().filter(|&&a| a == 0.0).count() as f64 / v.len() as f64;
    assert!((zeros - 0.2).abs() < 0.01, "{zeros}");
    assert!(v.iter().all(|&a| a == 0.0 || (a - 1.25).abs() < 1e-15));
}

#[test]
fn max_pool_values_ties_and_odd_width() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 4], &[1.0, 3.0, 2.0, 0.0]));
    let y = g.max_pool1d(x, 2, 2).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 2.0]);

    let c = g.leaf(t(&[1, 5], &[7.0; 5]));
    let y = g.max_pool1d(c, 2, 2).unwrap();
    assert_eq!(g.value(y).data(), &[7.0, 7.0]);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    // Ties route to the first index; the unpaired last element gets nothing.
    assert_eq!(grads.get(c).unwrap(), &[1.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn lstm_zero_weights_give_zero_state() {
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(vec![0.3, -0.7, 1.0]));
    let hc = g.input(Tensor::zeros(vec![8]));
    let w = g.input(Tensor::zeros(vec![16, 7]));
    let b = g.input(Tensor::zeros(vec![16]));
    let y = g.lstm_cell(x, hc, w, b).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn lstm_saturated_forget_gate_carries_memory() {
    let hidden = 2;
    let mut bias = vec![0.0; 4 * hidden];
    bias[..hidden].iter_mut().for_each(|v| *v = -60.0); // input gate → 0
    bias[hidden..2 * hidden].iter_mut().for_each(|v| *v = 60.0); // forget gate → 1
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(vec![0.5]));
    let hc = g.input(Tensor::from_vec(vec![0.0, 0.0, 0.8, -0.4]));
    let w = g.input(random(&[8, 3], 14));
    let b = g.input(Tensor::from_vec(bias));
    let y = g.lstm_cell(x, hc, w, b).unwrap();
    let c = &g.value(y).data()[hidden..];
    assert!((c[0] - 0.8).abs() < 1e-12 && (c[1] + 0.4).abs() < 1e-12);
}

#[test]
fn lstm_scalar_unit_matches_hand_evaluation() {
    // One unit, one input. Rows: i, f, g, o; columns: [h, x].
    let w = t(&[4, 2], &[0.5, 1.0, -0.3, 0.2, 0.8, -0.6, 0.1, 0.4]);
    let b = Tensor::from_vec(vec![0.1, 0.2, -0.1, 0.0]);
    let (h0, c0, x) = (0.2, -0.5, 0.7);
    let sig = |v: f64| 1.0 / (1.0 + libm::exp(-v));
    let i = sig(0.5 * h0 + 1.0 * x + 0.1);
    let f = sig(-0.3 * h0 + 0.2 * x + 0.2);
    let gg = libm::tanh(0.8 * h0 - 0.6 * x - 0.1);
    let o = sig(0.1 * h0 + 0.4 * x);
    let c = f * c0 + i * gg;
    let h = o * libm::tanh(c);

    let mut g = Graph::new();
    let xn = g.input(Tensor::from_vec(vec![x]));
    let hc = g.input(Tensor::from_vec(vec![h0, c0]));
    let wn = g.input(w);
    let bn = g.input(b);
    let y = g.lstm_cell(xn, hc, wn, bn).unwrap();
    let v = g.value(y).data();
    assert!((v[0] - h).abs() < 1e-15 && (v[1] - c).abs() < 1e-15);
    // Frozen golden values of the same evaluation.
    assert!((h + 0.278_912_602_794_043_23).abs() < 1e-12, "{h}");
    assert!((c + 0.530_202_857_837_434_3).abs() < 1e-12, "{c}");
}

#[test]
fn lstm_gradients_through_time_match_finite_differences() {
    let params = [
        random(&[4, 3], 15),  // input sequence, 4 steps of 3 features
        random(&[12, 6], 16), // hidden 3, input 3
        random(&[12], 17),
    ];
    let err = check(&params, |g, p| {
        let mut hc = g.input(Tensor::from_vec(vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.5]));
        for step in 0..4 {
            let x = g.gather(p[0], (step * 3..step * 3 + 3).collect())?;
            hc = g.lstm_cell(x, hc, p[1], p[2])?;
        }
        project(g, hc)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn composite_ops_match_finite_differences() {
    let params = [random(&[2, 3], 18), random(&[2, 2], 19), random(&[6], 20)];
    let err = check(&params, |g, p| {
        let c = g.concat(&[p[0], p[1]])?;
        let r = g.reshape(c, &[10])?;
        let th = g.tanh(r);
        let lr = g.leaky_relu(th, 0.01);
        let a = g.affine(lr, -1.5, &[0.25])?;
        let first = g.gather(a, vec![0, 2, 4, 6, 8, 9])?;
        let st = g.stack(&[first, p[2]])?;
        let sq = g.square(st);
        let m = g.mean(sq);
        let pooled = g.max_pool1d(st, 2, 2)?;
        let ps = project(g, pooled)?;
        g.add(m, ps)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn quadratic_grad_check_is_exact() {
    let err = check(&[random(&[7], 21)], |g, p| {
        let sq = g.square(p[0]);
        g.weighted_sum(sq, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0])
    });
    assert!(err < 1e-8, "{err}");
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(vec![2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn bind_and_collect_round_trip() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::from_vec(vec![1.0, 2.0]));
    let _b = store.add("b", Tensor::scalar(3.0));
    let mut g = Graph::new();
    let bound = store.bind(&mut g, true);
    let s = g.sum(bound.node(a));
    let grads = g.backward(s).unwrap();
    assert_eq!(bound.collect(&g, &grads), vec![vec![1.0, 1.0], vec![0.0]]);

    let mut g = Graph::new();
    let frozen = store.bind(&mut g, false);
    let s = g.sum(frozen.node(a));
    let grads = g.backward(s).unwrap();
    assert!(grads.get(frozen.node(a)).is_none());
}
