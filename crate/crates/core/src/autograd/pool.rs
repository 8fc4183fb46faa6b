//! Non-overlapping max pooling along the last axis.

/// Pools every `kernel` consecutive values of each row of length `len`; a
/// trailing partial window is dropped. Returns the pooled values and, for each,
/// the flat input index it came from (first maximum on ties).
pub(crate) fn forward(x: &[f64], len: usize, kernel: usize) -> (Vec<f64>, Vec<usize>) {
    let out_len = len / kernel;
    let rows = x.len() / len;
    let mut y = Vec::with_capacity(rows * out_len);
    let mut argmax = Vec::with_capacity(rows * out_len);
    for r in 0..rows {
        for o in 0..out_len {
            let start = r * len + o * kernel;
            let mut best = start;
            for i in start + 1..start + kernel {
                if x[i] > x[best] {
                    best = i;
                }
            }
            y.push(x[best]);
            argmax.push(best);
        }
    }
    (y, argmax)
}

pub(crate) fn backward(dy: &[f64], argmax: &[usize], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (g, &i) in dy.iter().zip(argmax) {
        dx[i] += g;
    }
    dx
}
