//! Per-channel batch normalization over `[batch, channels, length]`.

use super::tensor::Tensor;

/// Learned affine parameters plus running statistics of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Exponential moving update `r ← (1 − momentum)·r + momentum·batch`.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, s) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * s;
        }
        for (r, s) in self.running_var.iter_mut().zip(&stats.unbiased_var) {
            *r = (1.0 - m) * *r + m * s;
        }
    }
}

/// Statistics of one training batch, per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Variance with the `n − 1` divisor, as fed into the running estimate.
    pub unbiased_var: Vec<f64>,
}

pub(crate) struct NormOutput {
    pub y: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

#[derive(Clone, Copy)]
pub(crate) struct NormDims {
    pub batch: usize,
    pub channels: usize,
    pub len: usize,
}

fn channel_iter(d: NormDims, c: usize) -> impl Iterator<Item = usize> {
    (0..d.batch).flat_map(move |b| {
        let base = (b * d.channels + c) * d.len;
        base..base + d.len
    })
}

pub(crate) fn forward_train(
    d: NormDims,
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (NormOutput, BatchStats) {
    let m = (d.batch * d.len) as f64;
    let mut mean = vec![0.0; d.channels];
    let mut var = vec![0.0; d.channels];
    for c in 0..d.channels {
        let mu = channel_iter(d, c).map(|i| x[i]).sum::<f64>() / m;
        let v = channel_iter(d, c).map(|i| (x[i] - mu).powi(2)).sum::<f64>() / m;
        mean[c] = mu;
        var[c] = v;
    }
    let out = apply(d, x, gamma, beta, &mean, &var, eps);
    let unbiased_var = var.iter().map(|v| v * m / (m - 1.0)).collect();
    (out, BatchStats { mean, unbiased_var })
}

pub(crate) fn forward_eval(
    d: NormDims,
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> NormOutput {
    apply(d, x, gamma, beta, mean, var, eps)
}

fn apply(
    d: NormDims,
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> NormOutput {
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for c in 0..d.channels {
        for i in channel_iter(d, c) {
            xhat[i] = (x[i] - mean[c]) * inv_std[c];
            y[i] = xhat[i] * gamma[c] + beta[c];
        }
    }
    NormOutput { y, xhat, inv_std }
}

/// Returns `(dx, dgamma, dbeta)`. With `batch_stats` the mean and variance are
/// functions of `x` and contribute to `dx`; otherwise they are constants.
pub(crate) fn backward(
    d: NormDims,
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    batch_stats: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = (d.batch * d.len) as f64;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; d.channels];
    let mut dbeta = vec![0.0; d.channels];
    for c in 0..d.channels {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for i in channel_iter(d, c) {
            sum_dy += dy[i];
            sum_dy_xhat += dy[i] * xhat[i];
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let scale = gamma[c] * inv_std[c];
        if batch_stats {
            for i in channel_iter(d, c) {
                dx[i] = scale / m * (m * dy[i] - sum_dy - xhat[i] * sum_dy_xhat);
            }
        } else {
            for i in channel_iter(d, c) {
                dx[i] = scale * dy[i];
            }
        }
    }
    (dx, dgamma, dbeta)
}
