//! Slow/fast subnets and the joint layers on top of them.

use eyedent_autograd::{BatchStats, Padding, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ModelError, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running average in each batch-norm update.
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kernel: usize,
    pub filters: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubnetConfig {
    pub conv_blocks: Vec<BlockSpec>,
    pub fc_sizes: Vec<usize>,
    pub embedding_size: usize,
    pub pool_size: usize,
    pub pool_stride: usize,
    #[serde(default)]
    pub padding: Padding,
    #[serde(default = "default_channels")]
    pub input_channels: usize,
}

fn default_channels() -> usize {
    2
}

fn blocks(kernels: &[usize], filters: &[usize]) -> Vec<BlockSpec> {
    kernels
        .iter()
        .zip(filters)
        .map(|(&kernel, &filters)| BlockSpec { kernel, filters })
        .collect()
}

const FULL_KERNELS: [usize; 9] = [9, 9, 9, 5, 5, 5, 5, 3, 3];
const REDUCED_KERNELS: [usize; 6] = [9, 9, 9, 5, 5, 5];

impl SubnetConfig {
    fn with_blocks(conv_blocks: Vec<BlockSpec>, pool_stride: usize) -> Self {
        Self {
            conv_blocks,
            fc_sizes: vec![256, 128],
            embedding_size: 128,
            pool_size: 2,
            pool_stride,
            padding: Padding::Valid,
            input_channels: 2,
        }
    }

    pub fn slow_full() -> Self {
        Self::with_blocks(blocks(&FULL_KERNELS, &[128, 128, 128, 256, 256, 256, 256, 256, 256]), 1)
    }

    pub fn fast_full() -> Self {
        Self::with_blocks(blocks(&FULL_KERNELS, &[32, 32, 32, 512, 512, 512, 512, 512, 512]), 1)
    }

    /// Six blocks, a quarter of the filters and pool stride 2: small enough
    /// to train on one CPU core.
    pub fn slow_reduced() -> Self {
        Self::with_blocks(blocks(&REDUCED_KERNELS, &[32, 32, 32, 64, 64, 64]), 2)
    }

    pub fn fast_reduced() -> Self {
        Self::with_blocks(blocks(&REDUCED_KERNELS, &[8, 8, 8, 128, 128, 128]), 2)
    }

    /// Structural checks: kernels non-increasing, filters non-decreasing,
    /// and non-zero sizes everywhere.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.conv_blocks.is_empty() {
            return bad("at least one conv block is required".into());
        }
        if self.input_channels == 0 || self.embedding_size == 0 || self.pool_size == 0 || self.pool_stride == 0 {
            return bad("input channels, embedding size and pool size/stride must be positive".into());
        }
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.kernel == 0 || b.filters == 0 {
                return bad(format!("block {}: kernel and filters must be positive", i + 1));
            }
        }
        for (i, w) in self.conv_blocks.windows(2).enumerate() {
            if w[1].kernel > w[0].kernel {
                return bad(format!(
                    "kernel sizes must be non-increasing: block {} has {} after {}",
                    i + 2,
                    w[1].kernel,
                    w[0].kernel
                ));
            }
            if w[1].filters < w[0].filters {
                return bad(format!(
                    "filter counts must be non-decreasing: block {} has {} after {}",
                    i + 2,
                    w[1].filters,
                    w[0].filters
                ));
            }
        }
        if self.fc_sizes.contains(&0) {
            return bad("dense sizes must be positive".into());
        }
        Ok(())
    }

    /// `(length, channels)` entering the flatten layer for a given input
    /// length, or an error if the signal shrinks to nothing.
    pub fn pre_flatten(&self, input_len: usize) -> Result<(usize, usize)> {
        let mut len = input_len;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if self.padding == Padding::Valid {
                if len < b.kernel {
                    return Err(ModelError::InvalidConfig(format!(
                        "input of {input_len} samples is too short: block {} sees {len} < kernel {}",
                        i + 1,
                        b.kernel
                    )));
                }
                len = len + 1 - b.kernel;
            }
            if len < self.pool_size {
                return Err(ModelError::InvalidConfig(format!("block {} output {len} shorter than pool", i + 1)));
            }
            len = (len - self.pool_size) / self.pool_stride + 1;
        }
        Ok((len, self.conv_blocks.last().expect("validated").filters))
    }

    /// Parameter count from the per-layer formulas: `k·in·f + f` per conv,
    /// `m_in·m_out + m_out` per dense, `2·f` per batch norm.
    pub fn param_count(&self, input_len: usize, classes: usize) -> Result<usize> {
        let mut total = 0;
        let mut ch = self.input_channels;
        for b in &self.conv_blocks {
            total += b.kernel * ch * b.filters + b.filters + 2 * b.filters;
            ch = b.filters;
        }
        let (len, ch) = self.pre_flatten(input_len)?;
        let mut m = len * ch;
        for &f in &self.fc_sizes {
            total += m * f + f + 2 * f;
            m = f;
        }
        total += m * self.embedding_size + self.embedding_size;
        total += self.embedding_size * classes + classes;
        Ok(total)
    }
}

/// Trainable affine parameters plus running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor<f32>,
    pub beta: Tensor<f32>,
    pub running_mean: Tensor<f32>,
    pub running_var: Tensor<f32>,
}

impl BatchNormParams {
    fn new(features: usize) -> Self {
        Self {
            gamma: Tensor::full(&[features], 1.0),
            beta: Tensor::zeros(&[features]),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::full(&[features], 1.0),
        }
    }

    /// Exponential moving average toward the batch statistics. The variance
    /// is the biased batch estimate, the same one used for normalization.
    fn update(&mut self, stats: &BatchStats) {
        let m = BN_MOMENTUM;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (m * f64::from(*r) + (1.0 - m) * b) as f32;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (m * f64::from(*r) + (1.0 - m) * b) as f32;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub kernel: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub bn: BatchNormParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub bn: Option<BatchNormParams>,
}

fn he_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<f32> {
    let limit = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-limit..limit) as f32)
}

impl DenseLayer {
    fn new<R: Rng>(m_in: usize, m_out: usize, with_bn: bool, rng: &mut R) -> Self {
        Self {
            weight: he_uniform(&[m_in, m_out], m_in, rng),
            bias: Tensor::zeros(&[m_out]),
            bn: with_bn.then(|| BatchNormParams::new(m_out)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, parameters receive gradients.
    Train,
    /// Running statistics, parameters are constants.
    Infer,
}

/// Tape handles produced by one forward pass.
#[derive(Default)]
pub struct Bound {
    /// Trainable parameters, in [`NamedTensors`] order.
    pub params: Vec<Var>,
    /// Batch statistics of each batch-norm layer in forward order
    /// (empty in inference mode).
    pub stats: Vec<BatchStats>,
}

impl Bound {
    pub fn new() -> Self {
        Self::default()
    }

    fn bind(&mut self, tape: &mut Tape<f32>, t: &Tensor<f32>, mode: Mode) -> Var {
        match mode {
            Mode::Train => {
                let v = tape.param(t.clone());
                self.params.push(v);
                v
            }
            Mode::Infer => tape.constant(t.clone()),
        }
    }

    fn batch_norm(&mut self, tape: &mut Tape<f32>, x: Var, bn: &BatchNormParams, mode: Mode) -> Result<Var> {
        let g = self.bind(tape, &bn.gamma, mode);
        let b = self.bind(tape, &bn.beta, mode);
        Ok(match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, g, b, BN_EPS)?;
                self.stats.push(stats);
                y
            }
            Mode::Infer => tape.batch_norm_infer(x, g, b, bn.running_mean.data(), bn.running_var.data(), BN_EPS)?,
        })
    }

    fn dense(&mut self, tape: &mut Tape<f32>, x: Var, layer: &DenseLayer, relu: bool, mode: Mode) -> Result<Var> {
        let w = self.bind(tape, &layer.weight, mode);
        let b = self.bind(tape, &layer.bias, mode);
        let mut y = tape.dense(x, w, b)?;
        if let Some(bn) = &layer.bn {
            y = self.batch_norm(tape, y, bn, mode)?;
        }
        Ok(if relu { tape.relu(y) } else { y })
    }
}

/// Ordered access to the tensors of a network. Trainable tensors come first
/// in the exact order a forward pass binds them.
pub trait NamedTensors {
    fn trainable(&self) -> Vec<(String, &Tensor<f32>)>;
    fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)>;
    /// Batch-norm layers in forward order.
    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNormParams>;
    /// Every tensor, trainable or not, for serialization.
    fn all(&self) -> Vec<(String, &Tensor<f32>)>;
    fn all_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)>;

    /// Folds the batch statistics of a training pass into the running
    /// averages.
    fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for (bn, s) in self.batch_norms_mut().into_iter().zip(stats) {
            bn.update(s);
        }
    }
}

fn push_bn<'a>(out: &mut Vec<(String, &'a Tensor<f32>)>, p: &str, bn: &'a BatchNormParams, all: bool) {
    out.push((format!("{p}.bn.gamma"), &bn.gamma));
    out.push((format!("{p}.bn.beta"), &bn.beta));
    if all {
        out.push((format!("{p}.bn.running_mean"), &bn.running_mean));
        out.push((format!("{p}.bn.running_var"), &bn.running_var));
    }
}

fn push_bn_mut<'a>(out: &mut Vec<(String, &'a mut Tensor<f32>)>, p: &str, bn: &'a mut BatchNormParams, all: bool) {
    out.push((format!("{p}.bn.gamma"), &mut bn.gamma));
    out.push((format!("{p}.bn.beta"), &mut bn.beta));
    if all {
        out.push((format!("{p}.bn.running_mean"), &mut bn.running_mean));
        out.push((format!("{p}.bn.running_var"), &mut bn.running_var));
    }
}

fn push_dense<'a>(out: &mut Vec<(String, &'a Tensor<f32>)>, p: &str, d: &'a DenseLayer, all: bool) {
    out.push((format!("{p}.weight"), &d.weight));
    out.push((format!("{p}.bias"), &d.bias));
    if let Some(bn) = &d.bn {
        push_bn(out, p, bn, all);
    }
}

fn push_dense_mut<'a>(out: &mut Vec<(String, &'a mut Tensor<f32>)>, p: &str, d: &'a mut DenseLayer, all: bool) {
    out.push((format!("{p}.weight"), &mut d.weight));
    out.push((format!("{p}.bias"), &mut d.bias));
    if let Some(bn) = &mut d.bn {
        push_bn_mut(out, p, bn, all);
    }
}

/// One branch: conv/BN/ReLU/pool blocks, dense layers, an embedding layer
/// and a softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct Subnet {
    pub name: String,
    pub cfg: SubnetConfig,
    pub input_len: usize,
    pub blocks: Vec<ConvBlock>,
    pub fc: Vec<DenseLayer>,
    pub embedding: DenseLayer,
    pub head: DenseLayer,
}

pub struct SubnetOutput {
    pub embedding: Var,
    pub logits: Var,
    pub bound: Bound,
}

impl Subnet {
    /// He-uniform weights, zero biases, unit/zero batch-norm parameters.
    pub fn new<R: Rng>(name: &str, cfg: &SubnetConfig, input_len: usize, classes: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if classes < 2 {
            return Err(ModelError::InvalidConfig(format!("need at least 2 classes, got {classes}")));
        }
        let (len, ch_out) = cfg.pre_flatten(input_len)?;
        let mut ch = cfg.input_channels;
        let blocks = cfg
            .conv_blocks
            .iter()
            .map(|b| {
                let fan_in = b.kernel * ch;
                let block = ConvBlock {
                    kernel: he_uniform(&[b.kernel, ch, b.filters], fan_in, rng),
                    bias: Tensor::zeros(&[b.filters]),
                    bn: BatchNormParams::new(b.filters),
                };
                ch = b.filters;
                block
            })
            .collect();
        let mut m = len * ch_out;
        let fc = cfg
            .fc_sizes
            .iter()
            .map(|&f| {
                let layer = DenseLayer::new(m, f, true, rng);
                m = f;
                layer
            })
            .collect();
        let embedding = DenseLayer::new(m, cfg.embedding_size, false, rng);
        let head = DenseLayer::new(cfg.embedding_size, classes, false, rng);
        Ok(Self {
            name: name.to_string(),
            cfg: cfg.clone(),
            input_len,
            blocks,
            fc,
            embedding,
            head,
        })
    }

    pub fn classes(&self) -> usize {
        self.head.bias.numel()
    }

    /// Conv stack only; returns the pre-flatten node `[batch, len, filters]`.
    pub fn features(&self, tape: &mut Tape<f32>, x: Var, mode: Mode, bound: &mut Bound) -> Result<Var> {
        let mut h = x;
        for block in &self.blocks {
            let k = bound.bind(tape, &block.kernel, mode);
            let b = bound.bind(tape, &block.bias, mode);
            h = tape.conv1d(h, k, Some(b), self.cfg.padding)?;
            h = bound.batch_norm(tape, h, &block.bn, mode)?;
            h = tape.relu(h);
            h = tape.avg_pool1d(h, self.cfg.pool_size, self.cfg.pool_stride)?;
        }
        Ok(h)
    }

    /// `x: [batch, input_len, channels]`.
    pub fn forward(&self, tape: &mut Tape<f32>, x: Var, mode: Mode) -> Result<SubnetOutput> {
        let mut bound = Bound::new();
        let h = self.features(tape, x, mode, &mut bound)?;
        let mut h = tape.flatten(h);
        for layer in &self.fc {
            h = bound.dense(tape, h, layer, true, mode)?;
        }
        let embedding = bound.dense(tape, h, &self.embedding, true, mode)?;
        let logits = bound.dense(tape, embedding, &self.head, false, mode)?;
        Ok(SubnetOutput { embedding, logits, bound })
    }
}

impl NamedTensors for Subnet {
    fn trainable(&self) -> Vec<(String, &Tensor<f32>)> {
        subnet_tensors(self, false)
    }

    fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
        subnet_tensors_mut(self, false)
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNormParams> {
        let mut out: Vec<&mut BatchNormParams> = self.blocks.iter_mut().map(|b| &mut b.bn).collect();
        out.extend(self.fc.iter_mut().filter_map(|d| d.bn.as_mut()));
        out.extend(self.embedding.bn.as_mut());
        out
    }

    fn all(&self) -> Vec<(String, &Tensor<f32>)> {
        subnet_tensors(self, true)
    }

    fn all_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
        subnet_tensors_mut(self, true)
    }
}

fn subnet_tensors(s: &Subnet, all: bool) -> Vec<(String, &Tensor<f32>)> {
    let mut out = Vec::new();
    for (i, b) in s.blocks.iter().enumerate() {
        let p = format!("{}.conv{}", s.name, i + 1);
        out.push((format!("{p}.kernel"), &b.kernel));
        out.push((format!("{p}.bias"), &b.bias));
        push_bn(&mut out, &p, &b.bn, all);
    }
    for (i, d) in s.fc.iter().enumerate() {
        push_dense(&mut out, &format!("{}.fc{}", s.name, i + 1), d, all);
    }
    push_dense(&mut out, &format!("{}.embedding", s.name), &s.embedding, all);
    push_dense(&mut out, &format!("{}.head", s.name), &s.head, all);
    out
}

fn subnet_tensors_mut(s: &mut Subnet, all: bool) -> Vec<(String, &mut Tensor<f32>)> {
    let mut out = Vec::new();
    let name = s.name.clone();
    for (i, b) in s.blocks.iter_mut().enumerate() {
        let p = format!("{name}.conv{}", i + 1);
        out.push((format!("{p}.kernel"), &mut b.kernel));
        out.push((format!("{p}.bias"), &mut b.bias));
        push_bn_mut(&mut out, &p, &mut b.bn, all);
    }
    for (i, d) in s.fc.iter_mut().enumerate() {
        push_dense_mut(&mut out, &format!("{name}.fc{}", i + 1), d, all);
    }
    push_dense_mut(&mut out, &format!("{name}.embedding"), &mut s.embedding, all);
    push_dense_mut(&mut out, &format!("{name}.head"), &mut s.head, all);
    out
}

/// Joint layers over the concatenated subnet embeddings. The last hidden
/// layer is the joint embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct JointNet {
    pub fc: Vec<DenseLayer>,
    pub head: DenseLayer,
}

pub struct JointOutput {
    pub embedding: Var,
    pub logits: Var,
    pub bound: Bound,
}

impl JointNet {
    pub fn new<R: Rng>(input: usize, sizes: &[usize], classes: usize, rng: &mut R) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(ModelError::InvalidConfig(format!(
                "joint layer sizes {sizes:?} must be non-empty and positive"
            )));
        }
        let mut m = input;
        let fc = sizes
            .iter()
            .map(|&f| {
                let layer = DenseLayer::new(m, f, true, rng);
                m = f;
                layer
            })
            .collect();
        Ok(Self {
            fc,
            head: DenseLayer::new(m, classes, false, rng),
        })
    }

    pub fn embedding_size(&self) -> usize {
        self.fc.last().expect("non-empty").bias.numel()
    }

    /// `x: [batch, slow_emb + fast_emb]`.
    pub fn forward(&self, tape: &mut Tape<f32>, x: Var, mode: Mode) -> Result<JointOutput> {
        let mut bound = Bound::new();
        let mut h = x;
        for layer in &self.fc {
            h = bound.dense(tape, h, layer, true, mode)?;
        }
        let logits = bound.dense(tape, h, &self.head, false, mode)?;
        Ok(JointOutput {
            embedding: h,
            logits,
            bound,
        })
    }
}

impl NamedTensors for JointNet {
    fn trainable(&self) -> Vec<(String, &Tensor<f32>)> {
        joint_tensors(self, false)
    }

    fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
        joint_tensors_mut(self, false)
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNormParams> {
        self.fc.iter_mut().filter_map(|d| d.bn.as_mut()).collect()
    }

    fn all(&self) -> Vec<(String, &Tensor<f32>)> {
        joint_tensors(self, true)
    }

    fn all_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
        joint_tensors_mut(self, true)
    }
}

fn joint_tensors(j: &JointNet, all: bool) -> Vec<(String, &Tensor<f32>)> {
    let mut out = Vec::new();
    for (i, d) in j.fc.iter().enumerate() {
        push_dense(&mut out, &format!("joint.fc{}", i + 1), d, all);
    }
    push_dense(&mut out, "joint.head", &j.head, all);
    out
}

fn joint_tensors_mut(j: &mut JointNet, all: bool) -> Vec<(String, &mut Tensor<f32>)> {
    let mut out = Vec::new();
    for (i, d) in j.fc.iter_mut().enumerate() {
        push_dense_mut(&mut out, &format!("joint.fc{}", i + 1), d, all);
    }
    push_dense_mut(&mut out, "joint.head", &mut j.head, all);
    out
}
