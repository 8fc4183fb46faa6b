//! Reverse-mode tape.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are appended in
//! evaluation order, so reverse insertion order is a valid topological order for
//! [`Graph::backward`]. A node tracks gradients when any of its inputs does;
//! untracked subgraphs (input data, frozen parameters) cost nothing in backward.

use rand::{Rng, RngCore};

use super::conv::{self, ConvDims};
use super::norm::{self, BatchStats, NormDims};
use super::pool;
use super::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberate backward-pass bugs, used as negative controls for gradient checking.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Convolution backward uses the tap-reversed kernel (convolution instead of correlation).
    ConvBackwardFlippedKernel,
}

/// How a normalization layer obtains its statistics.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Standardize with the statistics of the current batch.
    Train,
    /// Standardize with fixed running statistics.
    Eval {
        running_mean: &'a [f64],
        running_var: &'a [f64],
    },
}

enum Op {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        dims: NormDims,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        d_in: usize,
        d_out: usize,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    Narrow {
        x: Var,
        outer: usize,
        dim: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sigmoid {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    MaeLoss {
        pred: Var,
        target: Vec<f64>,
    },
    Dot {
        x: Var,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<Fault>,
}

fn mismatch(msg: String) -> Error {
    Error::ShapeMismatch(msg)
}

/// Splits `shape` around `axis` into `(outer, dim, inner)` extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input node. Only tracked leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to a tracked leaf.
    /// `None` for untracked nodes, for leaves the loss does not depend on, and
    /// for intermediate nodes (their gradients are released during the sweep).
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("gradient shape"))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).expect("op output shape")
    }

    /// Same-padded cross-correlation: `x [B, C_in, L]`, `w [C_out, C_in, K]`,
    /// `b [C_out]` → `[B, C_out, L]`. Even kernels pad `(K−1)/2` on the left.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || xs[2] == 0 || ws[2] == 0 {
            return Err(mismatch(format!("conv1d input {xs:?} with kernels {ws:?}")));
        }
        let dims = ConvDims {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            kernel: ws[2],
            len: xs[2],
        };
        if let Some(b) = b {
            if self.shape(b) != [dims.c_out] {
                return Err(mismatch(format!(
                    "conv1d bias {:?} for {} output channels",
                    self.shape(b),
                    dims.c_out
                )));
            }
        }
        let bias = b.map(|b| self.value(b).data());
        let out = conv::forward(&dims, self.value(x).data(), self.value(w).data(), bias);
        let value = Self::tensor(vec![dims.batch, dims.c_out, dims.len], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv1d { x, w, b, dims }, &inputs))
    }

    /// Per-channel normalization of `[B, C, L]` (or `[B, C]`) followed by the
    /// affine map `γ·x̂ + β`. In training mode the batch statistics are returned
    /// so the caller can fold them into its running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        let dims = match xs.as_slice() {
            [b, c, l] => NormDims {
                batch: *b,
                channels: *c,
                len: *l,
            },
            [b, c] => NormDims {
                batch: *b,
                channels: *c,
                len: 1,
            },
            _ => return Err(mismatch(format!("batch_norm input {xs:?}"))),
        };
        let c = dims.channels;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch(format!("batch_norm affine parameters for {c} channels")));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("batch_norm epsilon {eps}")));
        }
        let (xv, gv, bv) = (
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let (out, stats, batch_stats) = match mode {
            BatchNormMode::Train => {
                if dims.batch * dims.len < 2 {
                    return Err(Error::InvalidArgument(
                        "batch_norm training needs more than one value per channel".into(),
                    ));
                }
                let (out, stats) = norm::forward_train(dims, xv, gv, bv, eps);
                (out, Some(stats), true)
            }
            BatchNormMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(mismatch("batch_norm running statistics".into()));
                }
                let out = norm::forward_eval(dims, xv, gv, bv, running_mean, running_var, eps);
                (out, None, false)
            }
        };
        let value = Self::tensor(xs, out.y);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            dims,
            xhat: out.xhat,
            inv_std: out.inv_std,
            batch_stats,
        };
        Ok((self.push(value, op, &[x, gamma, beta]), stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v.max(0.0)).collect();
        let value = Self::tensor(t.shape().to_vec(), out);
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Max pooling with window and stride `kernel` along the last axis; the
    /// output length is `floor(L / kernel)`.
    pub fn max_pool(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().ok_or_else(|| mismatch("max_pool on a scalar".into()))?;
        if kernel == 0 || len < kernel {
            return Err(mismatch(format!("max_pool kernel {kernel} over length {len}")));
        }
        let (out, argmax) = pool::forward(self.value(x).data(), len, kernel);
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len / kernel;
        let value = Self::tensor(out_shape, out);
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Inverted dropout: kept units are scaled by `1/(1−rate)`. Outside training,
    /// or at rate 0, this returns `x` itself.
    pub fn dropout<R: RngCore + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Self::tensor(t.shape().to_vec(), out);
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// `x [N, D] · wᵀ + b` with `w [Out, D]`, `b [Out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(mismatch(format!("linear input {xs:?} with weight {ws:?}")));
        }
        let (rows, d_in, d_out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(mismatch(format!("linear bias {:?}", self.shape(b))));
            }
        }
        let mut out = vec![0.0; rows * d_out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        super::gemm::gemm(
            rows,
            d_in,
            d_out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            beta,
            &mut out,
        );
        let value = Self::tensor(vec![rows, d_out], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let op = Op::Linear {
            x,
            w,
            b,
            rows,
            d_in,
            d_out,
        };
        Ok(self.push(value, op, &inputs))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(mismatch(format!("concat axis {axis} for shape {base:?}")));
        }
        let mut parts = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(mismatch(format!("concat {s:?} with {base:?} on axis {axis}")));
            }
            parts.push((v, s[axis]));
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let total: usize = parts.iter().map(|p| p.1).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(v, len) in &parts {
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Self::tensor(shape, out);
        Ok(self.push(value, Op::Concat { parts, outer, inner }, xs))
    }

    /// The slice `[start, start + len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(mismatch(format!(
                "narrow [{start}, {}) of axis {axis} in {shape:?}",
                start + len
            )));
        }
        let (outer, dim, inner) = axis_extents(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * dim + start) * inner;
            out.extend_from_slice(&d[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Self::tensor(out_shape, out);
        let op = Op::Narrow {
            x,
            outer,
            dim,
            inner,
            start,
            len,
        };
        Ok(self.push(value, op, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(format!("{name} of {:?} and {:?}", ta.shape(), tb.shape())));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Self::tensor(ta.shape().to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Self::tensor(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.unary(x, |v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid { x }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.unary(x, f64::tanh);
        self.push(value, Op::Tanh { x }, &[x])
    }

    /// Mean absolute error between a prediction vector and fixed targets.
    /// The subgradient at an exact tie is 0.
    pub fn mae_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() {
            return Err(mismatch(format!(
                "mae_loss of {} predictions against {} targets",
                p.len(),
                target.len()
            )));
        }
        if p.is_empty() {
            return Err(Error::Empty("mae_loss batch".into()));
        }
        let loss = p.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
        let op = Op::MaeLoss {
            pred,
            target: target.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, &[pred]))
    }

    /// `Σ wᵢ·xᵢ` against fixed weights; a convenient scalar probe.
    pub fn dot(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let d = self.value(x).data();
        if d.len() != weights.len() {
            return Err(mismatch(format!("dot of {} values with {} weights", d.len(), weights.len())));
        }
        let s = d.iter().zip(weights).map(|(a, b)| a * b).sum();
        let op = Op::Dot {
            x,
            weights: weights.to_vec(),
        };
        Ok(self.push(Tensor::scalar(s), op, &[x]))
    }

    /// Back-propagates from a scalar node, filling gradients of every tracked
    /// leaf the loss depends on. Gradients from earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(mismatch(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            for (v, dg) in self.op_backward(i, &g) {
                accumulate(&mut self.grads[v.0], dg);
            }
        }
        Ok(())
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn op_backward(&self, node: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let op = &self.nodes[node].op;
        let mut out = Vec::new();
        let mut emit = |v: Var, make: &dyn Fn() -> Vec<f64>| {
            if self.tracked(v) {
                out.push((v, make()));
            }
        };
        match op {
            Op::Leaf => {}
            Op::Conv1d { x, w, b, dims } => {
                let flipped = self.fault == Some(Fault::ConvBackwardFlippedKernel);
                let wv = self.value(*w).data();
                emit(*x, &|| {
                    if flipped {
                        conv::backward_input(dims, &conv::flip_taps(dims, wv), g)
                    } else {
                        conv::backward_input(dims, wv, g)
                    }
                });
                let wants_params = self.tracked(*w) || b.is_some_and(|b| self.tracked(b));
                if wants_params {
                    let (dw, db) = conv::backward_params(dims, self.value(*x).data(), g);
                    let dw = if flipped { conv::flip_taps(dims, &dw) } else { dw };
                    emit(*w, &|| dw.clone());
                    if let Some(b) = b {
                        emit(*b, &|| db.clone());
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                dims,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let gv = self.value(*gamma).data();
                let (dx, dg, db) = norm::backward(*dims, g, xhat, inv_std, gv, *batch_stats);
                emit(*x, &|| dx.clone());
                emit(*gamma, &|| dg.clone());
                emit(*beta, &|| db.clone());
            }
            Op::Relu { x } => emit(*x, &|| {
                let xv = self.value(*x).data();
                g.iter()
                    .zip(xv)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect()
            }),
            Op::MaxPool { x, argmax } => {
                emit(*x, &|| pool::backward(g, argmax, self.value(*x).numel()))
            }
            Op::Dropout { x, mask } => {
                emit(*x, &|| g.iter().zip(mask).map(|(g, m)| g * m).collect())
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                d_in,
                d_out,
            } => {
                let (rows, d_in, d_out) = (*rows, *d_in, *d_out);
                emit(*x, &|| {
                    let mut dx = vec![0.0; rows * d_in];
                    let wv = self.value(*w).data();
                    super::gemm::gemm(rows, d_out, d_in, g, false, wv, false, 0.0, &mut dx);
                    dx
                });
                emit(*w, &|| {
                    let mut dw = vec![0.0; d_out * d_in];
                    let xv = self.value(*x).data();
                    super::gemm::gemm(d_out, rows, d_in, g, true, xv, false, 0.0, &mut dw);
                    dw
                });
                if let Some(b) = b {
                    emit(*b, &|| {
                        let mut db = vec![0.0; d_out];
                        for row in g.chunks(d_out) {
                            db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                        db
                    });
                }
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(v, len) in parts {
                    emit(v, &|| {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..*outer {
                            let from = (o * total + offset) * inner;
                            d.extend_from_slice(&g[from..from + len * inner]);
                        }
                        d
                    });
                    offset += len;
                }
            }
            Op::Narrow {
                x,
                outer,
                dim,
                inner,
                start,
                len,
            } => emit(*x, &|| {
                let mut d = vec![0.0; outer * dim * inner];
                for o in 0..*outer {
                    let to = (o * dim + start) * inner;
                    let from = o * len * inner;
                    d[to..to + len * inner].copy_from_slice(&g[from..from + len * inner]);
                }
                d
            }),
            Op::Reshape { x } => emit(*x, &|| g.to_vec()),
            Op::Add { a, b } => {
                emit(*a, &|| g.to_vec());
                emit(*b, &|| g.to_vec());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                emit(*a, &|| g.iter().zip(bv).map(|(g, y)| g * y).collect());
                emit(*b, &|| g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Sigmoid { x } | Op::Tanh { x } => {
                // Both derivatives are expressed through the op's own output.
                let y = self.nodes[node].value.data();
                let sigmoid = matches!(op, Op::Sigmoid { .. });
                emit(*x, &|| {
                    g.iter()
                        .zip(y)
                        .map(|(g, y)| if sigmoid { g * y * (1.0 - y) } else { g * (1.0 - y * y) })
                        .collect()
                });
            }
            Op::MaeLoss { pred, target } => emit(*pred, &|| {
                let p = self.value(*pred).data();
                let n = p.len() as f64;
                p.iter()
                    .zip(target)
                    .map(|(p, t)| {
                        let s = if p > t {
                            1.0
                        } else if p < t {
                            -1.0
                        } else {
                            0.0
                        };
                        g[0] * s / n
                    })
                    .collect()
            }),
            Op::Dot { x, weights } => emit(*x, &|| weights.iter().map(|w| g[0] * w).collect()),
        }
        out
    }
}
