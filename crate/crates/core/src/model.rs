//! The CNN + LSTM heart-rate regression network.
//!
//! An 8 s window of 1000 samples is split into eight 1 s steps of 125 samples.
//! Every step passes through a multi-scale inception block and two
//! convolutional sequential blocks, giving a 224-wide feature. In parallel, a
//! two-layer LSTM reads the raw steps, and both of its layers' hidden states
//! (160 values) are appended to the CNN feature. A second two-layer LSTM runs
//! over the resulting 384-wide sequence. The last layer's final hidden state
//! feeds a dense layer that outputs the heart rate in BPM.
//!
//! Parameters are kept in one ordered list tagged with their block. The forward
//! pass consumes graph variables in that same order, so any parameter can be
//! perturbed by gradient checks or loaded from a weights file by name.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{
    grad_check, lstm_forward, sgd_step, BatchNormMode, BatchStats, GradCheckOptions, GradCheckReport, Graph, LstmLayer,
    LstmLayerVars, Tensor, Var,
};
use crate::{Error, Result};

/// Named parameter groups, the unit of freezing and of the weights file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Block {
    Inception,
    SeqBlock1,
    SeqBlock2,
    #[serde(rename = "LSTM1")]
    Lstm1,
    #[serde(rename = "LSTM2")]
    Lstm2,
    Linear,
}

impl Block {
    pub const ALL: [Block; 6] = [
        Block::Inception,
        Block::SeqBlock1,
        Block::SeqBlock2,
        Block::Lstm1,
        Block::Lstm2,
        Block::Linear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::Inception => "Inception",
            Block::SeqBlock1 => "SeqBlock1",
            Block::SeqBlock2 => "SeqBlock2",
            Block::Lstm1 => "LSTM1",
            Block::Lstm2 => "LSTM2",
            Block::Linear => "Linear",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Block {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Block::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::UnknownBlock(s.to_string()))
    }
}

/// Convolution → batch norm → relu → max pool → dropout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeqBlockConfig {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub pool: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmConfig {
    pub input: usize,
    pub hidden: usize,
    pub layers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearConfig {
    pub input: usize,
    pub output: usize,
}

/// Architecture hyperparameters. The defaults are the published network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of 1 s steps a window is split into.
    pub steps: usize,
    /// Samples per step.
    pub step_len: usize,
    pub inception_kernels: Vec<usize>,
    pub inception_channels: Vec<usize>,
    pub seq1: SeqBlockConfig,
    pub seq2: SeqBlockConfig,
    pub lstm1: LstmConfig,
    pub lstm2: LstmConfig,
    pub linear: LinearConfig,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Seed of the weight initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            steps: 8,
            step_len: 125,
            inception_kernels: vec![5, 20, 40, 60, 80],
            inception_channels: vec![4, 3, 3, 3, 3],
            seq1: SeqBlockConfig {
                kernel: 40,
                in_channels: 16,
                out_channels: 32,
                pool: 4,
            },
            seq2: SeqBlockConfig {
                kernel: 60,
                in_channels: 32,
                out_channels: 32,
                pool: 4,
            },
            lstm1: LstmConfig {
                input: 125,
                hidden: 80,
                layers: 2,
            },
            lstm2: LstmConfig {
                input: 384,
                hidden: 80,
                layers: 2,
            },
            linear: LinearConfig { input: 80, output: 1 },
            dropout: 0.1,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            seed: 0,
        }
    }
}

/// Per-step activation shapes through the network (batch axis omitted).
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ShapeLedger {
    pub step_input: usize,
    pub inception: [usize; 2],
    pub seq1: [usize; 2],
    pub seq2: [usize; 2],
    pub flatten: usize,
    pub lstm1_step: usize,
    pub lstm2_input: usize,
    pub head_input: usize,
    pub output: usize,
}

impl fmt::Display for ShapeLedger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} → {:?} → {:?} → {:?} → {} (+ LSTM1 {}) → LSTM2 input {} → head {} → output {}",
            self.step_input,
            self.inception,
            self.seq1,
            self.seq2,
            self.flatten,
            self.lstm1_step,
            self.lstm2_input,
            self.head_input,
            self.output
        )
    }
}

impl ModelConfig {
    pub fn window_len(&self) -> usize {
        self.steps * self.step_len
    }

    /// Checks the architecture arithmetic and returns the implied shapes.
    pub fn validate(&self) -> Result<ShapeLedger> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.steps == 0 || self.step_len == 0 {
            return fail("steps and step_len must be positive".into());
        }
        let k = &self.inception_kernels;
        if k.is_empty() || k.len() != self.inception_channels.len() {
            return fail(format!(
                "{} inception kernels but {} channel counts",
                k.len(),
                self.inception_channels.len()
            ));
        }
        if k.iter().chain(&self.inception_channels).any(|&v| v == 0) {
            return fail("inception kernels and channels must be positive".into());
        }
        let inception_out: usize = self.inception_channels.iter().sum();
        if inception_out != self.seq1.in_channels {
            return fail(format!(
                "inception channels sum to {inception_out} but seq1 expects {}",
                self.seq1.in_channels
            ));
        }
        if self.seq1.out_channels != self.seq2.in_channels {
            return fail(format!(
                "seq1 outputs {} channels but seq2 expects {}",
                self.seq1.out_channels, self.seq2.in_channels
            ));
        }
        let mut len = self.step_len;
        let mut pooled = [0; 2];
        for (i, s) in [&self.seq1, &self.seq2].into_iter().enumerate() {
            if s.kernel == 0 || s.out_channels == 0 || s.pool == 0 {
                return fail(format!("seq{} sizes must be positive", i + 1));
            }
            if s.pool > len {
                return fail(format!("seq{} pool {} exceeds length {len}", i + 1, s.pool));
            }
            len /= s.pool;
            pooled[i] = len;
        }
        let flatten = self.seq2.out_channels * pooled[1];
        for (name, l) in [("lstm1", &self.lstm1), ("lstm2", &self.lstm2)] {
            if l.hidden == 0 || l.layers == 0 {
                return fail(format!("{name} hidden size and layers must be positive"));
            }
        }
        if self.lstm1.input != self.step_len {
            return fail(format!(
                "lstm1 input {} must equal the step length {}",
                self.lstm1.input, self.step_len
            ));
        }
        let lstm1_step = self.lstm1.layers * self.lstm1.hidden;
        if self.lstm2.input != flatten + lstm1_step {
            return fail(format!(
                "lstm2 input {} but the per-step feature is {flatten} + {lstm1_step} = {}",
                self.lstm2.input,
                flatten + lstm1_step
            ));
        }
        if self.linear.input != self.lstm2.hidden || self.linear.output != 1 {
            return fail(format!(
                "linear must map the lstm2 hidden size {} to 1, got {} → {}",
                self.lstm2.hidden, self.linear.input, self.linear.output
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout rate {} outside [0, 1)", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return fail("batch norm momentum must be in [0, 1] and epsilon positive".into());
        }
        Ok(ShapeLedger {
            step_input: self.step_len,
            inception: [inception_out, self.step_len],
            seq1: [self.seq1.out_channels, pooled[0]],
            seq2: [self.seq2.out_channels, pooled[1]],
            flatten,
            lstm1_step,
            lstm2_input: self.lstm2.input,
            head_input: self.linear.input,
            output: 1,
        })
    }
}

/// One learned array.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub block: Block,
    pub name: String,
    pub value: Tensor,
}

/// Running mean and variance of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, s) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * s;
        }
        for (r, s) in self.var.iter_mut().zip(&batch.unbiased_var) {
            *r = (1.0 - momentum) * *r + momentum * s;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParameterCounts {
    pub per_block: Vec<(Block, usize)>,
    pub total: usize,
    pub trainable: usize,
}

impl ParameterCounts {
    pub fn block(&self, block: Block) -> usize {
        self.per_block
            .iter()
            .find(|(b, _)| *b == block)
            .map_or(0, |(_, n)| *n)
    }
}

/// Whether a forward pass trains (batch statistics, dropout) or infers.
pub enum Pass<'a> {
    Eval,
    Train { rng: &'a mut dyn RngCore },
}

/// Result of [`PpgNet::forward_graph`].
pub struct Forward {
    /// Predictions, shaped `[N]`.
    pub prediction: Var,
    /// Batch statistics of the two sequential blocks when they normalized with them.
    pub batch_stats: [Option<BatchStats>; 2],
    /// Shapes actually produced, for comparison with [`ModelConfig::validate`].
    pub shapes: ShapeLedger,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PpgNet {
    config: ModelConfig,
    ledger: ShapeLedger,
    params: Vec<Parameter>,
    running: [RunningStats; 2],
    trainable: [bool; 6],
}

const EVAL_CHUNK: usize = 64;

impl PpgNet {
    /// Validates `config`, draws seeded uniform `±1/√fan_in` weights, and runs a
    /// probe forward pass to confirm the shape ledger.
    pub fn build(config: ModelConfig) -> Result<Self> {
        let ledger = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        let mut push = |block, name: String, value| params.push(Parameter { block, name, value });

        for (i, (&k, &c)) in config.inception_kernels.iter().zip(&config.inception_channels).enumerate() {
            let bound = 1.0 / (k as f64).sqrt();
            push(Block::Inception, format!("branch{i}.weight"), Tensor::uniform(&[c, 1, k], bound, &mut rng));
            push(Block::Inception, format!("branch{i}.bias"), Tensor::uniform(&[c], bound, &mut rng));
        }
        for (block, s) in [(Block::SeqBlock1, &config.seq1), (Block::SeqBlock2, &config.seq2)] {
            let bound = 1.0 / ((s.in_channels * s.kernel) as f64).sqrt();
            let shape = [s.out_channels, s.in_channels, s.kernel];
            push(block, "conv.weight".into(), Tensor::uniform(&shape, bound, &mut rng));
            push(block, "conv.bias".into(), Tensor::uniform(&[s.out_channels], bound, &mut rng));
            push(block, "bn.gamma".into(), Tensor::full(&[s.out_channels], 1.0));
            push(block, "bn.beta".into(), Tensor::zeros(&[s.out_channels]));
        }
        for (block, l) in [(Block::Lstm1, &config.lstm1), (Block::Lstm2, &config.lstm2)] {
            let mut input = l.input;
            for layer in 0..l.layers {
                let p = LstmLayer::init(input, l.hidden, &mut rng);
                push(block, format!("layer{layer}.w_ih"), p.w_ih);
                push(block, format!("layer{layer}.w_hh"), p.w_hh);
                push(block, format!("layer{layer}.bias"), p.bias);
                input = l.hidden;
            }
        }
        let bound = 1.0 / (config.linear.input as f64).sqrt();
        let shape = [config.linear.output, config.linear.input];
        push(Block::Linear, "weight".into(), Tensor::uniform(&shape, bound, &mut rng));
        push(Block::Linear, "bias".into(), Tensor::uniform(&[config.linear.output], bound, &mut rng));

        let net = Self {
            running: [
                RunningStats::new(config.seq1.out_channels),
                RunningStats::new(config.seq2.out_channels),
            ],
            config,
            ledger,
            params,
            trainable: [true; 6],
        };

        let mut g = Graph::new();
        let vars = net.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, net.config.window_len()]));
        let probe = net.forward_graph(&mut g, &vars, x, Pass::Eval)?;
        if probe.shapes != net.ledger {
            return Err(Error::Config(format!(
                "shape ledger violated: expected {}, observed {}",
                net.ledger, probe.shapes
            )));
        }
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn shape_ledger(&self) -> &ShapeLedger {
        &self.ledger
    }

    /// All learned arrays in forward order.
    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    /// Mutable values of every learned array; shapes stay fixed.
    pub fn parameter_values_mut(&mut self) -> impl Iterator<Item = (Block, &str, &mut [f64])> {
        self.params
            .iter_mut()
            .map(|p| (p.block, p.name.as_str(), p.value.data_mut()))
    }

    /// Running statistics of the two sequential blocks.
    pub fn running_stats(&self) -> &[RunningStats; 2] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats; 2] {
        &mut self.running
    }

    pub fn is_trainable(&self, block: Block) -> bool {
        self.trainable[block.index()]
    }

    /// Makes exactly `blocks` trainable. Frozen blocks are never updated by
    /// [`train_step`](Self::train_step), and frozen sequential blocks run in
    /// inference mode (running statistics, no dropout) even during training.
    pub fn freeze_except(&mut self, blocks: &BTreeSet<Block>) {
        for b in Block::ALL {
            self.trainable[b.index()] = blocks.contains(&b);
        }
    }

    /// [`freeze_except`](Self::freeze_except) by block names.
    pub fn freeze_except_named<S: AsRef<str>>(&mut self, names: &[S]) -> Result<()> {
        let blocks = names
            .iter()
            .map(|n| n.as_ref().parse())
            .collect::<Result<BTreeSet<Block>>>()?;
        self.freeze_except(&blocks);
        Ok(())
    }

    pub fn count_parameters(&self) -> ParameterCounts {
        let per_block: Vec<(Block, usize)> = Block::ALL
            .into_iter()
            .map(|b| {
                let n = self.params.iter().filter(|p| p.block == b).map(|p| p.value.numel()).sum();
                (b, n)
            })
            .collect();
        let total = per_block.iter().map(|(_, n)| n).sum();
        let trainable = per_block
            .iter()
            .filter(|(b, _)| self.is_trainable(*b))
            .map(|(_, n)| n)
            .sum();
        ParameterCounts {
            per_block,
            total,
            trainable,
        }
    }

    /// Adds every parameter to `g` as a leaf, in forward order. With `track`,
    /// parameters of trainable blocks require gradients.
    pub fn bind(&self, g: &mut Graph, track: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.value.clone(), track && self.is_trainable(p.block)))
            .collect()
    }

    /// Records the network on `g` for a batch `x` of shape `[N, window_len]`.
    /// `params` must list one variable per [`parameters`](Self::parameters)
    /// entry, in the same order and with the same shapes.
    pub fn forward_graph(&self, g: &mut Graph, params: &[Var], x: Var, mut pass: Pass<'_>) -> Result<Forward> {
        let c = &self.config;
        if params.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter variables for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        let n = match g.shape(x) {
            [n, len] if *len == c.window_len() => *n,
            s => {
                return Err(Error::ShapeMismatch(format!(
                    "network input {s:?}, expected [N, {}]",
                    c.window_len()
                )))
            }
        };
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("parameter count checked above");

        let steps = g.reshape(x, &[n * c.steps, 1, c.step_len])?;
        let mut branches = Vec::with_capacity(c.inception_kernels.len());
        for _ in &c.inception_kernels {
            let (w, b) = (take(), take());
            branches.push(g.conv1d(steps, w, Some(b))?);
        }
        let inception = g.concat(&branches, 1)?;

        let mut batch_stats = [None, None];
        let mut h = inception;
        let mut seq_shapes = [[0; 2]; 2];
        for (i, block) in [Block::SeqBlock1, Block::SeqBlock2].into_iter().enumerate() {
            let pool = if i == 0 { c.seq1.pool } else { c.seq2.pool };
            let (w, b, gamma, beta) = (take(), take(), take(), take());
            let conv = g.conv1d(h, w, Some(b))?;
            let training = matches!(pass, Pass::Train { .. }) && self.is_trainable(block);
            let mode = if training {
                BatchNormMode::Train
            } else {
                BatchNormMode::Eval {
                    running_mean: &self.running[i].mean,
                    running_var: &self.running[i].var,
                }
            };
            let (normed, stats) = g.batch_norm(conv, gamma, beta, c.bn_eps, mode)?;
            batch_stats[i] = stats;
            let act = g.relu(normed);
            let pooled = g.max_pool(act, pool)?;
            h = match (&mut pass, training) {
                (Pass::Train { rng }, true) => g.dropout(pooled, c.dropout, true, &mut **rng)?,
                _ => pooled,
            };
            let s = g.shape(h);
            seq_shapes[i] = [s[1], s[2]];
        }
        let flatten = seq_shapes[1][0] * seq_shapes[1][1];
        let cnn = g.reshape(h, &[n, c.steps, flatten])?;

        let mut lstm_params = |layers: usize| -> Vec<LstmLayerVars> {
            (0..layers)
                .map(|_| LstmLayerVars {
                    w_ih: take(),
                    w_hh: take(),
                    bias: take(),
                })
                .collect()
        };
        let lstm1 = lstm_params(c.lstm1.layers);
        let lstm2 = lstm_params(c.lstm2.layers);
        let (head_w, head_b) = (take(), take());

        let raw = g.reshape(x, &[n, c.steps, c.step_len])?;
        let mut raw_steps = Vec::with_capacity(c.steps);
        for t in 0..c.steps {
            let s = g.narrow(raw, 1, t, 1)?;
            raw_steps.push(g.reshape(s, &[n, c.step_len])?);
        }
        let out1 = lstm_forward(g, &raw_steps, &lstm1)?;

        let mut features = Vec::with_capacity(c.steps);
        let mut lstm1_step = 0;
        for t in 0..c.steps {
            let s = g.narrow(cnn, 1, t, 1)?;
            let cnn_t = g.reshape(s, &[n, flatten])?;
            let recurrent = g.concat(&out1.hidden[t], 1)?;
            lstm1_step = g.shape(recurrent)[1];
            features.push(g.concat(&[cnn_t, recurrent], 1)?);
        }
        let lstm2_input = g.shape(features[0])[1];
        let out2 = lstm_forward(g, &features, &lstm2)?;
        let last = out2.last_hidden().expect("at least one step and layer");
        let head_input = g.shape(last)[1];
        let y = g.linear(last, head_w, Some(head_b))?;
        let output = g.shape(y)[1];
        let prediction = g.reshape(y, &[n])?;

        let inception_shape = g.shape(inception);
        let shapes = ShapeLedger {
            step_input: c.step_len,
            inception: [inception_shape[1], inception_shape[2]],
            seq1: seq_shapes[0],
            seq2: seq_shapes[1],
            flatten,
            lstm1_step,
            lstm2_input,
            head_input,
            output,
        };
        Ok(Forward {
            prediction,
            batch_stats,
            shapes,
        })
    }

    /// Inference-mode prediction for one window of `window_len` samples.
    pub fn forward(&self, window: &[f64]) -> Result<f64> {
        Ok(self.predict(&[window])?[0])
    }

    /// Inference-mode predictions, evaluated in fixed-size chunks.
    pub fn predict<W: AsRef<[f64]>>(&self, windows: &[W]) -> Result<Vec<f64>> {
        let len = self.config.window_len();
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let vars = self.bind(&mut g, false);
            let x = g.constant(stack(chunk, len)?);
            let f = self.forward_graph(&mut g, &vars, x, Pass::Eval)?;
            out.extend_from_slice(g.value(f.prediction).data());
        }
        Ok(out)
    }

    /// One SGD step on the mean absolute error of a batch. Returns the batch
    /// loss before the update. Frozen blocks and, when nothing is trainable,
    /// the whole model are left untouched.
    pub fn train_step<W: AsRef<[f64]>>(
        &mut self,
        windows: &[W],
        labels: &[f64],
        learning_rate: f64,
        rng: &mut dyn RngCore,
    ) -> Result<f64> {
        if windows.len() != labels.len() || windows.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "{} windows with {} labels",
                windows.len(),
                labels.len()
            )));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, true);
        let x = g.constant(stack(windows, self.config.window_len())?);
        let f = self.forward_graph(&mut g, &vars, x, Pass::Train { rng })?;
        let loss = g.mae_loss(f.prediction, labels)?;
        let value = g.value(loss).data()[0];
        if !g.requires_grad(loss) {
            return Ok(value);
        }
        g.backward(loss)?;
        for (p, v) in self.params.iter_mut().zip(&vars) {
            if let Some(grad) = g.grad(*v) {
                sgd_step(&mut p.value, &grad, learning_rate)?;
            }
        }
        let momentum = self.config.bn_momentum;
        for (running, stats) in self.running.iter_mut().zip(&f.batch_stats) {
            if let Some(stats) = stats {
                running.update(stats, momentum);
            }
        }
        Ok(value)
    }
}

/// Gradient tolerance of the composed network check.
pub const NETWORK_TOLERANCE: f64 = 1e-4;

/// Checks the gradient of the training loss (MAE, batch statistics, a fixed
/// dropout mask) with respect to every parameter tensor and the input batch,
/// on `coords` sampled coordinates of each. Targets sit half a unit above the
/// initial outputs: far from the absolute-error kink, yet with a loss small
/// enough that central differences are not swamped by round-off.
pub fn network_grad_check(config: ModelConfig, batch: usize, coords: usize, seed: u64) -> Result<GradCheckReport> {
    let net = PpgNet::build(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs: Vec<Tensor> = net.params.iter().map(|p| p.value.clone()).collect();
    inputs.push(Tensor::uniform(&[batch, net.config.window_len()], 2.0, &mut rng));
    let n = net.params.len();
    let labels: Vec<f64> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let mut dropout = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let f = net.forward_graph(&mut g, &vars[..n], vars[n], Pass::Train { rng: &mut dropout })?;
        g.value(f.prediction).data().iter().map(|p| p + 0.5).collect()
    };
    let opts = GradCheckOptions {
        tolerance: NETWORK_TOLERANCE,
        max_coords: Some(coords),
        seed,
        ..Default::default()
    };
    grad_check(
        "network → MAE loss",
        |g, v| {
            let mut dropout = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let f = net.forward_graph(g, &v[..n], v[n], Pass::Train { rng: &mut dropout })?;
            g.mae_loss(f.prediction, &labels)
        },
        &inputs,
        &opts,
    )
}

/// Packs equal-length windows into an `[N, len]` tensor.
fn stack<W: AsRef<[f64]>>(windows: &[W], len: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(windows.len() * len);
    for w in windows {
        let w = w.as_ref();
        if w.len() != len {
            return Err(Error::ShapeMismatch(format!("window of {} samples, expected {len}", w.len())));
        }
        data.extend_from_slice(w);
    }
    Tensor::new(vec![windows.len(), len], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_ledger_matches_the_published_shapes() {
        let ledger = ModelConfig::default().validate().unwrap();
        assert_eq!(ledger.inception, [16, 125]);
        assert_eq!(ledger.seq1, [32, 31]);
        assert_eq!(ledger.seq2, [32, 7]);
        assert_eq!(ledger.flatten, 224);
        assert_eq!(ledger.lstm1_step, 160);
        assert_eq!(ledger.lstm2_input, 384);
        assert_eq!(ledger.head_input, 80);
        assert_eq!(ledger.output, 1);
    }

    #[test]
    fn block_names_round_trip() {
        for b in Block::ALL {
            assert_eq!(b.name().parse::<Block>().unwrap(), b);
        }
        assert!(matches!("LSTM3".parse::<Block>(), Err(Error::UnknownBlock(_))));
    }

    #[test]
    fn config_arithmetic_is_enforced() {
        let c = ModelConfig {
            inception_channels: vec![3, 3, 3, 3, 3],
            ..Default::default()
        };
        assert!(matches!(PpgNet::build(c), Err(Error::Config(_))));

        let mut c = ModelConfig::default();
        c.lstm2.input = 304;
        assert!(matches!(PpgNet::build(c), Err(Error::Config(_))));

        let mut c = ModelConfig::default();
        c.linear.output = 2;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_window_length_is_rejected() {
        let net = PpgNet::build(ModelConfig::default()).unwrap();
        assert!(matches!(net.forward(&[0.0; 999]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn composed_gradient_matches_finite_differences() {
        let report = network_grad_check(ModelConfig::default(), 2, 4, 3).unwrap();
        assert!(report.passed, "{report}\n{:?}", report.inputs);
    }
}
