use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn unit_kernel_is_identity() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 4], &[1.0, -2.0, 3.5, 0.25]));
    let w = g.constant(t(&[1, 1, 1], &[1.0]));
    let b = g.constant(t(&[1], &[0.0]));
    let y = g.conv1d(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, -2.0, 3.5, 0.25]);
}

#[test]
fn same_padding_sees_boundary_zeros() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 5], 1.0));
    let w = g.constant(Tensor::full(&[1, 1, 3], 1.0));
    let y = g.conv1d(x, w, None).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 3.0, 3.0, 3.0, 2.0]);
}

#[test]
fn even_kernel_pads_less_on_the_left() {
    // K=4: left pad 1, right pad 2; out[j] = x[j-1] + x[j] + x[j+1] + x[j+2].
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 5], &[1.0, 2.0, 3.0, 4.0, 5.0]));
    let w = g.constant(Tensor::full(&[1, 1, 4], 1.0));
    let y = g.conv1d(x, w, None).unwrap();
    assert_eq!(g.value(y).data(), &[6.0, 10.0, 14.0, 12.0, 9.0]);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 5]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3]));
    assert!(matches!(g.conv1d(x, w, None), Err(crate::Error::ShapeMismatch(_))));
}

#[test]
fn batch_norm_train_on_standardized_batch_is_nearly_identity() {
    // Per channel the 4 values (2 samples × 2 positions) have mean 0, variance 1.
    let x = [1.0, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0];
    let mut g = Graph::new();
    let xv = g.constant(t(&[2, 2, 2], &x));
    let gamma = g.constant(Tensor::full(&[2], 1.0));
    let beta = g.constant(Tensor::zeros(&[2]));
    let (y, stats) = g.batch_norm(xv, gamma, beta, 1e-5, BatchNormMode::Train).unwrap();
    let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
    for (a, b) in g.value(y).data().iter().zip(&x) {
        assert!((a - b * scale).abs() < 1e-15);
        assert!((a - b).abs() < 1e-5);
    }
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![0.0, 0.0]);
    // Unbiased variance of four ±1 values.
    assert!((stats.unbiased_var[0] - 4.0 / 3.0).abs() < 1e-15);
}

#[test]
fn batch_norm_eval_is_the_affine_formula() {
    let x = [0.3, -1.2, 2.0, 0.7, 5.0, -3.0];
    let (m, v, gm, bt, eps) = ([0.5, -1.0], [2.0, 0.25], [1.5, -0.5], [0.1, 0.2], 1e-5);
    let mut g = Graph::new();
    let xv = g.constant(t(&[1, 2, 3], &x));
    let gamma = g.constant(t(&[2], &gm));
    let beta = g.constant(t(&[2], &bt));
    let mode = BatchNormMode::Eval {
        running_mean: &m,
        running_var: &v,
    };
    let (y, stats) = g.batch_norm(xv, gamma, beta, eps, mode).unwrap();
    assert!(stats.is_none());
    for (i, got) in g.value(y).data().iter().enumerate() {
        let c = i / 3;
        let want = (x[i] - m[c]) / (v[c] + eps).sqrt() * gm[c] + bt[c];
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_rejects_degenerate_training_batch() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 1]));
    let gamma = g.constant(Tensor::full(&[2], 1.0));
    let beta = g.constant(Tensor::zeros(&[2]));
    assert!(g.batch_norm(x, gamma, beta, 1e-5, BatchNormMode::Train).is_err());
}

#[test]
fn running_statistics_follow_momentum() {
    let mut state = BatchNormState::new(1, 0.1, 1e-5);
    state.update_running(&BatchStats {
        mean: vec![2.0],
        unbiased_var: vec![3.0],
    });
    assert!((state.running_mean[0] - 0.2).abs() < 1e-15);
    assert!((state.running_var[0] - (0.9 + 0.3)).abs() < 1e-15);
}

#[test]
fn relu_value_and_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[-1.0, 2.0]), true);
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    let s = g.dot(y, &[1.0, 1.0]).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn max_pool_floors_length_and_routes_to_first_max() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 3, 31]));
    let y = g.max_pool(x, 4).unwrap();
    assert_eq!(g.shape(y), &[2, 3, 7]);

    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 8], &[1.0, 3.0, 3.0, 0.0, 5.0, 5.0, 5.0, 5.0]), true);
    let y = g.max_pool(x, 4).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 5.0]);
    let s = g.dot(y, &[1.0, 1.0]).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn dropout_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
    assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(g.dropout(x, 0.0, false, &mut rng).unwrap(), x);
    assert_eq!(g.dropout(x, 0.5, false, &mut rng).unwrap(), x);
    assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
}

#[test]
fn dropout_keeps_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[20_000], 1.0));
    let y = g.dropout(x, 0.25, true, &mut rng).unwrap();
    let d = g.value(y).data();
    assert!(d.iter().all(|v| *v == 0.0 || (*v - 4.0 / 3.0).abs() < 1e-15));
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    assert!((mean - 1.0).abs() < 0.03);
}

#[test]
fn zero_lstm_outputs_zero() {
    let mut g = Graph::new();
    let layers: Vec<LstmLayerVars> = [(3, 2), (2, 2)]
        .iter()
        .map(|&(d, h)| {
            let l = LstmLayer::zeros(d, h);
            LstmLayerVars {
                w_ih: g.constant(l.w_ih),
                w_hh: g.constant(l.w_hh),
                bias: g.constant(l.bias),
            }
        })
        .collect();
    let xs: Vec<Var> = (0..4)
        .map(|i| g.constant(Tensor::full(&[2, 3], i as f64 - 1.5)))
        .collect();
    let out = lstm_forward(&mut g, &xs, &layers).unwrap();
    for step in &out.hidden {
        for h in step {
            assert!(g.value(*h).data().iter().all(|v| *v == 0.0));
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn single_unit_lstm_matches_hand_evaluation() {
    let (wi, wf, wc, wo) = (0.1, 0.2, 0.3, 0.4);
    let (ui, uf, uc, uo) = (-0.5, 0.6, -0.7, 0.8);
    let (bi, bf, bc, bo) = (0.01, 0.02, 0.03, 0.04);
    let (x0, x1) = (0.5, -1.25);

    let mut g = Graph::new();
    let layer = LstmLayerVars {
        w_ih: g.constant(t(&[4, 1], &[wi, wf, wc, wo])),
        w_hh: g.constant(t(&[4, 1], &[ui, uf, uc, uo])),
        bias: g.constant(t(&[4], &[bi, bf, bc, bo])),
    };
    let xs = [g.constant(t(&[1, 1], &[x0])), g.constant(t(&[1, 1], &[x1]))];
    let out = lstm_forward(&mut g, &xs, &[layer]).unwrap();

    // Step 0 from zero state.
    let i0 = sigmoid(wi * x0 + bi);
    let c0 = i0 * (wc * x0 + bc).tanh();
    let h0 = sigmoid(wo * x0 + bo) * c0.tanh();
    // Step 1.
    let i1 = sigmoid(wi * x1 + ui * h0 + bi);
    let f1 = sigmoid(wf * x1 + uf * h0 + bf);
    let g1 = (wc * x1 + uc * h0 + bc).tanh();
    let o1 = sigmoid(wo * x1 + uo * h0 + bo);
    let c1 = f1 * c0 + i1 * g1;
    let h1 = o1 * c1.tanh();

    assert!((g.value(out.hidden[0][0]).data()[0] - h0).abs() < 1e-12);
    assert!((g.value(out.hidden[1][0]).data()[0] - h1).abs() < 1e-12);
    assert!((g.value(out.cell[0]).data()[0] - c1).abs() < 1e-12);
}

#[test]
fn mae_loss_values_and_subgradient() {
    let mut g = Graph::new();
    let p = g.leaf(t(&[3], &[72.0, 77.0, 90.0]), true);
    let loss = g.mae_loss(p, &[70.0, 80.0, 90.0]).unwrap();
    assert!((g.value(loss).data()[0] - 5.0 / 3.0).abs() < 1e-15);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(p).unwrap().data(), &[1.0 / 3.0, -1.0 / 3.0, 0.0]);

    let mut g = Graph::new();
    let p = g.constant(t(&[2], &[1.0, 2.0]));
    let loss = g.mae_loss(p, &[1.0, 2.0]).unwrap();
    assert_eq!(g.value(loss).data(), &[0.0]);
    assert!(g.mae_loss(p, &[1.0]).is_err());
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]), true);
    assert!(g.backward(x).is_err());
}

#[test]
fn every_primitive_passes_the_finite_difference_suite() {
    for report in suite::primitive_suite(11).unwrap() {
        assert!(report.passed, "{report}");
    }
}

#[test]
fn linear_passes_at_tighter_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [
        Tensor::uniform(&[4, 7], 1.0, &mut rng),
        Tensor::uniform(&[3, 7], 1.0, &mut rng),
        Tensor::uniform(&[3], 1.0, &mut rng),
    ];
    let opts = GradCheckOptions {
        tolerance: 1e-8,
        ..Default::default()
    };
    let report = grad_check(
        "linear",
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            let w: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).cos()).collect();
            g.dot(y, &w)
        },
        &inputs,
        &opts,
    )
    .unwrap();
    assert!(report.passed, "{report}");
}

#[test]
fn corrupted_conv_backward_is_caught() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = [
        Tensor::uniform(&[2, 2, 12], 1.0, &mut rng),
        Tensor::uniform(&[3, 2, 5], 1.0, &mut rng),
    ];
    let opts = GradCheckOptions::default();
    let report = grad_check(
        "conv1d (flipped backward)",
        |g, v| {
            g.inject_fault(Fault::ConvBackwardFlippedKernel);
            let y = g.conv1d(v[0], v[1], None)?;
            let w: Vec<f64> = (0..72).map(|i| (i as f64 * 0.91).sin()).collect();
            g.dot(y, &w)
        },
        &inputs,
        &opts,
    )
    .unwrap();
    assert!(!report.passed, "{report}");
    assert!(report.max_rel_error > 1e-2);
}

#[test]
fn shared_kernel_gradient_is_sum_over_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let steps = 8;
    let x = Tensor::uniform(&[steps, 2, 20], 1.0, &mut rng);
    let w = Tensor::uniform(&[3, 2, 6], 1.0, &mut rng);
    let proj: Vec<f64> = (0..steps * 3 * 20).map(|i| (i as f64 * 0.13).sin()).collect();

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.leaf(w.clone(), true);
    let y = g.conv1d(xv, wv, None).unwrap();
    let s = g.dot(y, &proj).unwrap();
    g.backward(s).unwrap();
    let composed = g.grad(wv).unwrap();

    let mut summed = vec![0.0; w.numel()];
    for step in 0..steps {
        let mut g = Graph::new();
        let slice = x.data()[step * 40..(step + 1) * 40].to_vec();
        let xv = g.constant(Tensor::new(vec![1, 2, 20], slice).unwrap());
        let wv = g.leaf(w.clone(), true);
        let y = g.conv1d(xv, wv, None).unwrap();
        let s = g.dot(y, &proj[step * 60..(step + 1) * 60]).unwrap();
        g.backward(s).unwrap();
        for (a, b) in summed.iter_mut().zip(g.grad(wv).unwrap().data()) {
            *a += b;
        }
    }
    for (a, b) in composed.data().iter().zip(&summed) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn untracked_inputs_get_no_gradient() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let w = g.leaf(t(&[1, 2], &[3.0, 4.0]), true);
    let y = g.linear(x, w, None).unwrap();
    let s = g.dot(y, &[1.0]).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).is_none());
    assert_eq!(g.grad(w).unwrap().data(), &[1.0, 2.0]);
}

proptest! {
    #[test]
    fn pooling_commutes_with_relu(values in proptest::collection::vec(-5.0f64..5.0, 4..64)) {
        let n = values.len() / 4 * 4;
        let x = Tensor::new(vec![1, n], values[..n].to_vec()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let r = g.relu(xv);
        let a = g.max_pool(r, 4).unwrap();
        let p = g.max_pool(xv, 4).unwrap();
        let b = g.relu(p);
        prop_assert_eq!(g.value(a).data(), g.value(b).data());
    }

    #[test]
    fn concat_then_narrow_recovers_parts(a in proptest::collection::vec(-1.0f64..1.0, 6), b in proptest::collection::vec(-1.0f64..1.0, 9)) {
        let mut g = Graph::new();
        let av = g.constant(Tensor::new(vec![3, 2], a.clone()).unwrap());
        let bv = g.constant(Tensor::new(vec![3, 3], b.clone()).unwrap());
        let c = g.concat(&[av, bv], 1).unwrap();
        let a2 = g.narrow(c, 1, 0, 2).unwrap();
        let b2 = g.narrow(c, 1, 2, 3).unwrap();
        prop_assert_eq!(g.value(a2).data(), &a[..]);
        prop_assert_eq!(g.value(b2).data(), &b[..]);
    }
}
