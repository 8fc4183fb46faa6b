//! Finite-difference verification of every tape primitive.
//!
//! Inputs are drawn away from non-differentiable points: relu arguments and
//! absolute-error residuals at least `KINK_MARGIN` from zero, pooling windows
//! whose two largest values differ by at least `KINK_MARGIN`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use super::graph::{BatchNormMode, Graph, Var};
use super::lstm::{lstm_forward, LstmLayerVars};
use super::tensor::Tensor;
use crate::Result;

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
const KINK_MARGIN: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

fn projection(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..g.value(out).numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    g.dot(out, &w)
}

fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = random(shape, rng);
    for v in t.data_mut() {
        while v.abs() < KINK_MARGIN {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    t
}

fn without_pool_ties(shape: &[usize], kernel: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let len = *shape.last().unwrap();
    let mut t = random(shape, rng);
    loop {
        let mut clean = true;
        for row in t.data_mut().chunks_mut(len) {
            for w in row[..len / kernel * kernel].chunks_mut(kernel) {
                let mut sorted = w.to_vec();
                sorted.sort_by(|a, b| b.total_cmp(a));
                if sorted[0] - sorted[1] < KINK_MARGIN {
                    w.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
                    clean = false;
                }
            }
        }
        if clean {
            return t;
        }
    }
}

/// Runs the check for every primitive. `seed` drives all sampled inputs.
pub fn primitive_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions {
        tolerance: PRIMITIVE_TOLERANCE,
        seed,
        ..Default::default()
    };
    let mut reports = Vec::new();

    for kernel in [5, 4] {
        let inputs = [
            random(&[2, 3, 11], &mut rng),
            random(&[4, 3, kernel], &mut rng),
            random(&[4], &mut rng),
        ];
        reports.push(grad_check(
            &format!("conv1d k={kernel}"),
            |g, v| {
                let y = g.conv1d(v[0], v[1], Some(v[2]))?;
                projection(g, y, 1)
            },
            &inputs,
            &opts,
        )?);
    }

    let bn_inputs = [
        random(&[2, 3, 4], &mut rng),
        random(&[3], &mut rng),
        random(&[3], &mut rng),
    ];
    reports.push(grad_check(
        "batch_norm train",
        |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], 1e-5, BatchNormMode::Train)?;
            projection(g, y, 2)
        },
        &bn_inputs,
        &opts,
    )?);
    let (rm, rv) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
    reports.push(grad_check(
        "batch_norm eval",
        |g, v| {
            let mode = BatchNormMode::Eval {
                running_mean: &rm,
                running_var: &rv,
            };
            let (y, _) = g.batch_norm(v[0], v[1], v[2], 1e-5, mode)?;
            projection(g, y, 3)
        },
        &bn_inputs,
        &opts,
    )?);

    reports.push(grad_check(
        "relu",
        |g, v| {
            let y = g.relu(v[0]);
            projection(g, y, 4)
        },
        &[away_from_zero(&[3, 17], &mut rng)],
        &opts,
    )?);

    reports.push(grad_check(
        "max_pool k=4",
        |g, v| {
            let y = g.max_pool(v[0], 4)?;
            projection(g, y, 5)
        },
        &[without_pool_ties(&[2, 3, 31], 4, &mut rng)],
        &opts,
    )?);

    reports.push(grad_check(
        "dropout (fixed mask)",
        |g, v| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(6);
            let y = g.dropout(v[0], 0.3, true, &mut mask_rng)?;
            projection(g, y, 6)
        },
        &[random(&[4, 10], &mut rng)],
        &opts,
    )?);

    reports.push(grad_check(
        "linear",
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            projection(g, y, 7)
        },
        &[
            random(&[3, 6], &mut rng),
            random(&[4, 6], &mut rng),
            random(&[4], &mut rng),
        ],
        &opts,
    )?);

    reports.push(grad_check(
        "concat/narrow/reshape",
        |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let n = g.narrow(c, 1, 1, 4)?;
            let r = g.reshape(n, &[2, 2, 6])?;
            projection(g, r, 8)
        },
        &[random(&[2, 2, 3], &mut rng), random(&[2, 3, 3], &mut rng)],
        &opts,
    )?);

    reports.push(grad_check(
        "add/mul/sigmoid/tanh",
        |g, v| {
            let s = g.sigmoid(v[0]);
            let t = g.tanh(v[1]);
            let m = g.mul(s, t)?;
            let a = g.add(m, v[0])?;
            projection(g, a, 9)
        },
        &[random(&[3, 5], &mut rng), random(&[3, 5], &mut rng)],
        &opts,
    )?);

    let (steps, d, h, layers) = (3, 5, 4, 2);
    let mut lstm_inputs = vec![random(&[2, steps * d], &mut rng)];
    for l in 0..layers {
        let d_in = if l == 0 { d } else { h };
        lstm_inputs.push(random(&[4 * h, d_in], &mut rng));
        lstm_inputs.push(random(&[4 * h, h], &mut rng));
        lstm_inputs.push(random(&[4 * h], &mut rng));
    }
    reports.push(grad_check(
        "lstm T=3 H=4 D=5",
        |g, v| {
            let x = g.reshape(v[0], &[2, steps, d])?;
            let mut xs = Vec::new();
            for t in 0..steps {
                let s = g.narrow(x, 1, t, 1)?;
                xs.push(g.reshape(s, &[2, d])?);
            }
            let vars: Vec<LstmLayerVars> = v[1..]
                .chunks(3)
                .map(|c| LstmLayerVars {
                    w_ih: c[0],
                    w_hh: c[1],
                    bias: c[2],
                })
                .collect();
            let out = lstm_forward(g, &xs, &vars)?;
            let all: Vec<Var> = out.hidden.iter().flatten().copied().collect();
            let cat = g.concat(&all, 1)?;
            projection(g, cat, 10)
        },
        &lstm_inputs,
        &opts,
    )?);

    let target: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut pred = random(&[6], &mut rng);
    for (p, t) in pred.data_mut().iter_mut().zip(&target) {
        while (*p - t).abs() < KINK_MARGIN {
            *p = rng.gen_range(-1.0..1.0);
        }
    }
    reports.push(grad_check(
        "mae_loss",
        |g, v| g.mae_loss(v[0], &target),
        &[pred],
        &opts,
    )?);

    Ok(reports)
}
