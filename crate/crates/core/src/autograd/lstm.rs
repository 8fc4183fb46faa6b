//! Stacked LSTM built from tape primitives.
//!
//! Gate layout along the `4H` axis is input, forget, cell, output. Each layer
//! has one bias vector per gate, and zero initial hidden and cell states.

use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    /// `[4H, D_in]`
    pub w_ih: Tensor,
    /// `[4H, H]`
    pub w_hh: Tensor,
    /// `[4H]`
    pub bias: Tensor,
}

impl LstmLayer {
    /// Uniform initialization in `±1/√fan_in` of each array.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let gates = 4 * hidden;
        Self {
            w_ih: Tensor::uniform(&[gates, input], 1.0 / (input as f64).sqrt(), rng),
            w_hh: Tensor::uniform(&[gates, hidden], 1.0 / (hidden as f64).sqrt(), rng),
            bias: Tensor::uniform(&[gates], 1.0 / (hidden as f64).sqrt(), rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Tensor::zeros(&[4 * hidden, input]),
            w_hh: Tensor::zeros(&[4 * hidden, hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[1]
    }

    pub fn input(&self) -> usize {
        self.w_ih.shape()[1]
    }
}

/// Graph handles of one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LstmLayerVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

#[derive(Clone, Debug)]
pub struct LstmOutput {
    /// `hidden[t][l]` is layer `l`'s hidden state after step `t`, shaped `[N, H]`.
    pub hidden: Vec<Vec<Var>>,
    /// Final cell state per layer.
    pub cell: Vec<Var>,
}

impl LstmOutput {
    /// Final hidden state of the top layer.
    pub fn last_hidden(&self) -> Option<Var> {
        self.hidden.last().and_then(|h| h.last().copied())
    }
}

/// Runs the stack over `inputs` (one `[N, D_in]` node per step).
pub fn lstm_forward(g: &mut Graph, inputs: &[Var], layers: &[LstmLayerVars]) -> Result<LstmOutput> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("lstm with no layers".into()));
    }
    let mut hidden_sizes = Vec::with_capacity(layers.len());
    for (l, p) in layers.iter().enumerate() {
        let hs = g.shape(p.w_hh).to_vec();
        let h = hs.get(1).copied().unwrap_or(0);
        if hs != [4 * h, h] || g.shape(p.bias) != [4 * h] || g.shape(p.w_ih).first() != Some(&(4 * h)) {
            return Err(Error::ShapeMismatch(format!("lstm layer {l} parameter shapes")));
        }
        hidden_sizes.push(h);
    }
    let mut h: Vec<Option<Var>> = vec![None; layers.len()];
    let mut c: Vec<Option<Var>> = vec![None; layers.len()];
    let mut hidden = Vec::with_capacity(inputs.len());
    for &x_t in inputs {
        let mut x = x_t;
        let mut step = Vec::with_capacity(layers.len());
        for (l, p) in layers.iter().enumerate() {
            let hs = hidden_sizes[l];
            let mut gates = g.linear(x, p.w_ih, Some(p.bias))?;
            if let Some(h_prev) = h[l] {
                let rec = g.linear(h_prev, p.w_hh, None)?;
                gates = g.add(gates, rec)?;
            }
            let i = g.narrow(gates, 1, 0, hs)?;
            let f = g.narrow(gates, 1, hs, hs)?;
            let cand = g.narrow(gates, 1, 2 * hs, hs)?;
            let o = g.narrow(gates, 1, 3 * hs, hs)?;
            let (i, f, cand, o) = (g.sigmoid(i), g.sigmoid(f), g.tanh(cand), g.sigmoid(o));
            let mut c_new = g.mul(i, cand)?;
            if let Some(c_prev) = c[l] {
                let keep = g.mul(f, c_prev)?;
                c_new = g.add(keep, c_new)?;
            }
            let squashed = g.tanh(c_new);
            let h_new = g.mul(o, squashed)?;
            h[l] = Some(h_new);
            c[l] = Some(c_new);
            step.push(h_new);
            x = h_new;
        }
        hidden.push(step);
    }
    let cell = c.into_iter().flatten().collect();
    Ok(LstmOutput { hidden, cell })
}
