//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes in reverse
//! and returns gradients for every node that depends on a parameter.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, ConvDims};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Temporal padding of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// No padding; output length is `L − k + 1`.
    #[default]
    Valid,
    /// Zero padding so that the output length equals `L`.
    Same,
}

impl Padding {
    fn amounts(self, kernel: usize) -> (usize, usize) {
        match self {
            Padding::Valid => (0, 0),
            Padding::Same => ((kernel - 1) / 2, kernel / 2),
        }
    }
}

/// Per-feature statistics of the batch seen by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op<T> {
    Leaf,
    Conv1d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        padded: Option<Tensor<T>>,
        pad_left: usize,
        dims: ConvDims,
    },
    AvgPool {
        input: Var,
        size: usize,
        stride: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Affine {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        input: Var,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Reshape {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    SoftmaxXent {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    WeightedSum {
        input: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients returned by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like `like` when no path reaches it.
    pub fn get_or_zeros(&self, var: Var, like: &[usize]) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// 1D convolution, stride 1. `input: [batch, length, in_ch]`,
    /// `kernel: [k, in_ch, f]`, optional `bias: [f]`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Option<Var>, padding: Padding) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 3 {
            return Err(shape_err("conv1d", "input [batch, length, channels]", &xs));
        }
        if ks.len() != 3 || ks[1] != xs[2] || ks[0] == 0 {
            return Err(shape_err("conv1d", format!("kernel [k, {}, f]", xs[2]), &ks));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[2]] {
                return Err(shape_err("conv1d", format!("bias [{}]", ks[2]), self.shape(b)));
            }
        }
        let (pad_left, pad_right) = padding.amounts(ks[0]);
        let length = xs[1] + pad_left + pad_right;
        if length < ks[0] {
            return Err(shape_err("conv1d", format!("length >= kernel size {}", ks[0]), &xs));
        }
        let dims = ConvDims {
            batch: xs[0],
            length,
            in_ch: xs[2],
            kernel: ks[0],
            filters: ks[2],
        };
        let padded = (pad_left + pad_right > 0).then(|| pad_time(self.value(input), pad_left, pad_right));
        let mut out = Tensor::zeros(&[dims.batch, dims.out_len(), dims.filters]);
        {
            let x = padded.as_ref().unwrap_or_else(|| self.value(input));
            let b = bias.map(|b| self.value(b).data());
            kernels::conv1d_forward(x.data(), self.value(kernel).data(), b, dims, out.data_mut());
        }
        let needs = self.needs(input) || self.needs(kernel) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            Op::Conv1d {
                input,
                kernel,
                bias,
                padded,
                pad_left,
                dims,
            },
            needs,
        ))
    }

    /// Average pooling over time on `[batch, length, ch]`.
    pub fn avg_pool1d(&mut self, input: Var, size: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 3 {
            return Err(shape_err("avg_pool1d", "input [batch, length, channels]", &xs));
        }
        if size == 0 || stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "avg_pool1d",
                message: "size and stride must be positive".into(),
            });
        }
        if xs[1] < size {
            return Err(shape_err("avg_pool1d", format!("length >= pool size {size}"), &xs));
        }
        let t_out = kernels::pool_out_len(xs[1], size, stride);
        let mut out = Tensor::zeros(&[xs[0], t_out, xs[2]]);
        kernels::avgpool_forward(self.value(input).data(), xs[0], xs[1], xs[2], size, stride, out.data_mut());
        let needs = self.needs(input);
        Ok(self.push(out, Op::AvgPool { input, size, stride }, needs))
    }

    /// Training-mode batch normalization over every axis but the last.
    /// Returns the batch statistics so the caller can update running
    /// averages.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let xs = self.shape(input).to_vec();
        let features = *xs.last().unwrap_or(&0);
        self.check_affine_params("batch_norm", &xs, gamma, beta)?;
        if xs[0] < 2 {
            return Err(TensorError::BatchTooSmall(xs[0]));
        }
        let x = self.value(input).data();
        let (mean, var) = kernels::feature_moments(x, features);
        let inv_std_f64: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = Tensor::zeros(&xs);
        for ((xrow, hrow), orow) in x
            .chunks_exact(features)
            .zip(xhat.chunks_exact_mut(features))
            .zip(out.data_mut().chunks_exact_mut(features))
        {
            for f in 0..features {
                let h = T::from_f64_lossy((xrow[f].as_f64() - mean[f]) * inv_std_f64[f]);
                hrow[f] = h;
                orow[f] = g[f] * h + bt[f];
            }
        }
        let inv_std = inv_std_f64.iter().map(|&v| T::from_f64_lossy(v)).collect();
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let var_out = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        );
        Ok((var_out, BatchStats { mean, var }))
    }

    /// Inference-mode batch normalization using fixed running statistics.
    pub fn batch_norm_infer(&mut self, input: Var, gamma: Var, beta: Var, running_mean: &[T], running_var: &[T], eps: f64) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let features = *xs.last().unwrap_or(&0);
        self.check_affine_params("batch_norm_infer", &xs, gamma, beta)?;
        if running_mean.len() != features || running_var.len() != features {
            return Err(shape_err(
                "batch_norm_infer",
                format!("running stats [{features}]"),
                &[running_mean.len()],
            ));
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|v| T::from_f64_lossy(1.0 / (v.as_f64() + eps).sqrt()))
            .collect();
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = Tensor::zeros(&xs);
        for ((xrow, hrow), orow) in x
            .chunks_exact(features)
            .zip(xhat.chunks_exact_mut(features))
            .zip(out.data_mut().chunks_exact_mut(features))
        {
            for f in 0..features {
                let h = (xrow[f] - running_mean[f]) * inv_std[f];
                hrow[f] = h;
                orow[f] = g[f] * h + bt[f];
            }
        }
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::Affine {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    fn check_affine_params(&self, op: &'static str, xs: &[usize], gamma: Var, beta: Var) -> Result<()> {
        if xs.len() < 2 {
            return Err(shape_err(op, "input [batch, ..., features]", xs));
        }
        let features = xs[xs.len() - 1];
        for p in [gamma, beta] {
            if self.shape(p) != [features] {
                return Err(shape_err(op, format!("parameter [{features}]"), self.shape(p)));
            }
        }
        Ok(())
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
        )
        .expect("shape preserved");
        let needs = self.needs(input);
        self.push(out, Op::Relu { input }, needs)
    }

    /// `x·W + b` for `x: [batch, m_in]`, `W: [m_in, m_out]`, `b: [m_out]`.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weights).to_vec();
        if xs.len() != 2 {
            return Err(shape_err("dense", "input [batch, m_in]", &xs));
        }
        if ws.len() != 2 || ws[0] != xs[1] {
            return Err(shape_err("dense", format!("weights [{}, m_out]", xs[1]), &ws));
        }
        if self.shape(bias) != [ws[1]] {
            return Err(shape_err("dense", format!("bias [{}]", ws[1]), self.shape(bias)));
        }
        let mut out = Tensor::zeros(&[xs[0], ws[1]]);
        kernels::dense_forward(
            self.value(input).data(),
            self.value(weights).data(),
            self.value(bias).data(),
            xs[0],
            xs[1],
            ws[1],
            out.data_mut(),
        );
        let needs = self.needs(input) || self.needs(weights) || self.needs(bias);
        Ok(self.push(out, Op::Dense { input, weights, bias }, needs))
    }

    /// `[batch, ...] → [batch, product of the rest]`.
    pub fn flatten(&mut self, input: Var) -> Var {
        let xs = self.shape(input);
        let batch = xs.first().copied().unwrap_or(1);
        let rest: usize = xs.iter().skip(1).product();
        let out = self.value(input).clone().reshape(&[batch, rest]).expect("same element count");
        let needs = self.needs(input);
        self.push(out, Op::Reshape { input }, needs)
    }

    /// Concatenates 2D tensors `[batch, m_i]` along the feature axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            message: "no inputs".into(),
        })?;
        let batch = self.shape(first)[0];
        let mut width = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != 2 || s[0] != batch {
                return Err(shape_err("concat", format!("[{batch}, m]"), s));
            }
            width += s[1];
        }
        let mut out = Tensor::zeros(&[batch, width]);
        let mut offset = 0;
        for &v in inputs {
            let m = self.shape(v)[1];
            for (dst, src) in out
                .data_mut()
                .chunks_exact_mut(width)
                .zip(self.nodes[v.0].value.data().chunks_exact(m))
            {
                dst[offset..offset + m].copy_from_slice(src);
            }
            offset += m;
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(out, Op::Concat { inputs: inputs.to_vec() }, needs))
    }

    /// Mean softmax cross-entropy. Returns the scalar loss node and the
    /// row-wise probabilities.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<(Var, Tensor<T>)> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(shape_err("softmax_xent", format!("logits [{}, classes]", labels.len()), &ls));
        }
        let classes = ls[1];
        if classes < 2 {
            return Err(TensorError::InvalidArgument {
                op: "softmax_xent",
                message: format!("need at least 2 classes, got {classes}"),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange { label, classes });
        }
        let probs = kernels::softmax_rows(self.value(logits).data(), classes);
        let logits_data = self.value(logits).data();
        let mut loss = 0.0f64;
        for (row, &label) in logits_data.chunks_exact(classes).zip(labels) {
            // log-sum-exp form keeps -ln p finite even when p underflows
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            loss += lse - row[label].as_f64();
        }
        loss /= labels.len() as f64;
        let probs_t = Tensor::new(ls.clone(), probs.clone()).expect("same shape");
        let needs = self.needs(logits);
        let var = self.push(
            Tensor::scalar(T::from_f64_lossy(loss)),
            Op::SoftmaxXent {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            needs,
        );
        Ok((var, probs_t))
    }

    /// `Σ x ⊙ w` with constant weights; used to scalarize outputs.
    pub fn weighted_sum(&mut self, input: Var, weights: Vec<T>) -> Result<Var> {
        let n = self.value(input).numel();
        if weights.len() != n {
            return Err(shape_err("weighted_sum", format!("{n} weights"), &[weights.len()]));
        }
        let s: f64 = self
            .value(input)
            .data()
            .iter()
            .zip(&weights)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum();
        let needs = self.needs(input);
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::WeightedSum { input, weights }, needs))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let n = self.value(loss).numel();
        if n != 1 {
            return Err(TensorError::NonScalarLoss(n));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![T::one()]).expect("scalar"));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn grad_buffer(&self, var: Var) -> Option<Tensor<T>> {
        self.needs(var).then(|| Tensor::zeros(self.shape(var)))
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                kernel,
                bias,
                padded,
                pad_left,
                dims,
            } => {
                let x = padded.as_ref().unwrap_or_else(|| self.value(*input));
                let mut gx = self.needs(*input).then(|| Tensor::zeros(x.shape()));
                let mut gw = self.grad_buffer(*kernel);
                let mut gb = bias.and_then(|b| self.grad_buffer(b));
                kernels::conv1d_backward(
                    x.data(),
                    self.value(*kernel).data(),
                    *dims,
                    g.data(),
                    gx.as_mut().map(|t| t.data_mut()),
                    gw.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                if let Some(gx) = gx {
                    let gx = if padded.is_some() {
                        crop_time(&gx, *pad_left, self.shape(*input)[1])
                    } else {
                        gx
                    };
                    accumulate(grads, *input, gx);
                }
                if let Some(gw) = gw {
                    accumulate(grads, *kernel, gw);
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    accumulate(grads, *b, gb);
                }
            }
            Op::AvgPool { input, size, stride } => {
                if let Some(mut gx) = self.grad_buffer(*input) {
                    let s = self.shape(*input);
                    kernels::avgpool_backward(g.data(), s[0], s[1], s[2], *size, *stride, gx.data_mut());
                    accumulate(grads, *input, gx);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let features = inv_std.len();
                let mut gx = self.grad_buffer(*input);
                let mut gg = self.grad_buffer(*gamma);
                let mut gb = self.grad_buffer(*beta);
                kernels::batchnorm_train_backward(
                    g.data(),
                    xhat,
                    inv_std,
                    self.value(*gamma).data(),
                    features,
                    gx.as_mut().map(|t| t.data_mut()),
                    gg.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                for (v, t) in [(*input, gx), (*gamma, gg), (*beta, gb)] {
                    if let Some(t) = t {
                        accumulate(grads, v, t);
                    }
                }
            }
            Op::Affine {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let features = inv_std.len();
                let gamma_v = self.value(*gamma).data();
                if let Some(mut gx) = self.grad_buffer(*input) {
                    for (grow, orow) in g.data().chunks_exact(features).zip(gx.data_mut().chunks_exact_mut(features)) {
                        for f in 0..features {
                            orow[f] = grow[f] * gamma_v[f] * inv_std[f];
                        }
                    }
                    accumulate(grads, *input, gx);
                }
                if let Some(mut gg) = self.grad_buffer(*gamma) {
                    let mut acc = vec![0.0f64; features];
                    for (grow, hrow) in g.data().chunks_exact(features).zip(xhat.chunks_exact(features)) {
                        for f in 0..features {
                            acc[f] += grow[f].as_f64() * hrow[f].as_f64();
                        }
                    }
                    for (d, a) in gg.data_mut().iter_mut().zip(acc) {
                        *d = T::from_f64_lossy(a);
                    }
                    accumulate(grads, *gamma, gg);
                }
                if let Some(mut gb) = self.grad_buffer(*beta) {
                    let mut acc = vec![0.0f64; features];
                    for grow in g.data().chunks_exact(features) {
                        for f in 0..features {
                            acc[f] += grow[f].as_f64();
                        }
                    }
                    for (d, a) in gb.data_mut().iter_mut().zip(acc) {
                        *d = T::from_f64_lossy(a);
                    }
                    accumulate(grads, *beta, gb);
                }
            }
            Op::Relu { input } => {
                if self.needs(*input) {
                    let x = self.value(*input).data();
                    let data = g
                        .data()
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(grads, *input, Tensor::new(g.shape().to_vec(), data).expect("shape"));
                }
            }
            Op::Dense { input, weights, bias } => {
                let xs = self.shape(*input);
                let (rows, m_in) = (xs[0], xs[1]);
                let m_out = self.shape(*weights)[1];
                let mut gx = self.grad_buffer(*input);
                let mut gw = self.grad_buffer(*weights);
                let mut gb = self.grad_buffer(*bias);
                kernels::dense_backward(
                    self.value(*input).data(),
                    self.value(*weights).data(),
                    g.data(),
                    rows,
                    m_in,
                    m_out,
                    gx.as_mut().map(|t| t.data_mut()),
                    gw.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                for (v, t) in [(*input, gx), (*weights, gw), (*bias, gb)] {
                    if let Some(t) = t {
                        accumulate(grads, v, t);
                    }
                }
            }
            Op::Reshape { input } => {
                if self.needs(*input) {
                    let shaped = g.clone().reshape(self.shape(*input)).expect("same element count");
                    accumulate(grads, *input, shaped);
                }
            }
            Op::Concat { inputs } => {
                let width = g.shape()[1];
                let mut offset = 0;
                for &v in inputs {
                    let m = self.shape(v)[1];
                    if self.needs(v) {
                        let mut part = Tensor::zeros(self.shape(v));
                        for (dst, src) in part.data_mut().chunks_exact_mut(m).zip(g.data().chunks_exact(width)) {
                            dst.copy_from_slice(&src[offset..offset + m]);
                        }
                        accumulate(grads, v, part);
                    }
                    offset += m;
                }
            }
            Op::SoftmaxXent { logits, probs, labels } => {
                if self.needs(*logits) {
                    let classes = self.shape(*logits)[1];
                    let scale = g.data()[0].as_f64() / labels.len() as f64;
                    let mut out = Tensor::zeros(self.shape(*logits));
                    for ((orow, prow), &label) in out
                        .data_mut()
                        .chunks_exact_mut(classes)
                        .zip(probs.chunks_exact(classes))
                        .zip(labels)
                    {
                        for (c, (o, &p)) in orow.iter_mut().zip(prow).enumerate() {
                            let target = if c == label { 1.0 } else { 0.0 };
                            *o = T::from_f64_lossy((p.as_f64() - target) * scale);
                        }
                    }
                    accumulate(grads, *logits, out);
                }
            }
            Op::WeightedSum { input, weights } => {
                if self.needs(*input) {
                    let gv = g.data()[0];
                    let data = weights.iter().map(|&w| w * gv).collect();
                    accumulate(grads, *input, Tensor::new(self.shape(*input).to_vec(), data).expect("shape"));
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn pad_time<T: Scalar>(x: &Tensor<T>, left: usize, right: usize) -> Tensor<T> {
    let s = x.shape();
    let (batch, length, ch) = (s[0], s[1], s[2]);
    let new_len = length + left + right;
    let mut out = Tensor::zeros(&[batch, new_len, ch]);
    for b in 0..batch {
        let src = &x.data()[b * length * ch..(b + 1) * length * ch];
        let dst = &mut out.data_mut()[(b * new_len + left) * ch..(b * new_len + left + length) * ch];
        dst.copy_from_slice(src);
    }
    out
}

fn crop_time<T: Scalar>(x: &Tensor<T>, left: usize, length: usize) -> Tensor<T> {
    let s = x.shape();
    let (batch, padded_len, ch) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(&[batch, length, ch]);
    for b in 0..batch {
        let src = &x.data()[(b * padded_len + left) * ch..(b * padded_len + left + length) * ch];
        out.data_mut()[b * length * ch..(b + 1) * length * ch].copy_from_slice(src);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv1d_shapes_and_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 1000, 2]));
        let k = tape.param(Tensor::zeros(&[9, 2, 4]));
        let y = tape.conv1d(x, k, None, Padding::Valid).unwrap();
        assert_eq!(tape.shape(y), [2, 992, 4]);
        let same = tape.conv1d(x, k, None, Padding::Same).unwrap();
        assert_eq!(tape.shape(same), [2, 1000, 4]);

        let short = tape.constant(Tensor::zeros(&[1, 3, 2]));
        let err = tape.conv1d(short, k, None, Padding::Valid).unwrap_err();
        assert!(matches!(err, TensorError::Shape { op: "conv1d", .. }));
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4, 1], &[1.0, -2.0, 3.5, 0.25]));
        let k = tape.constant(t(&[1, 1, 1], &[1.0]));
        let y = tape.conv1d(x, k, None, Padding::Valid).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn pooling_keeps_constants_and_rejects_short_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 5, 3], 7.0));
        let y = tape.avg_pool1d(x, 2, 1).unwrap();
        assert_eq!(tape.shape(y), [1, 4, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 7.0));
        let one = tape.constant(Tensor::zeros(&[1, 1, 1]));
        assert!(tape.avg_pool1d(one, 2, 1).is_err());
    }

    #[test]
    fn pooled_length_after_first_block() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 992, 1]));
        let y = tape.avg_pool1d(x, 2, 1).unwrap();
        assert_eq!(tape.shape(y)[1], 991);
    }

    #[test]
    fn batch_norm_two_point_batch() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 1], &[1.0, 3.0]));
        let g = tape.constant(t(&[1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let (y, stats) = tape.batch_norm(x, g, b, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), [-1.0, 1.0]);
        assert_eq!(stats.mean, [2.0]);
        assert_eq!(stats.var, [1.0]);
    }

    #[test]
    fn batch_norm_rejects_single_row_batch() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
        let g = tape.constant(t(&[2], &[1.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        assert_eq!(tape.batch_norm(x, g, b, 1e-5).unwrap_err(), TensorError::BatchTooSmall(1));
    }

    #[test]
    fn batch_norm_fixed_point_on_standardized_input() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4, 1], &[-1.0, -1.0, 1.0, 1.0]));
        let g = tape.constant(t(&[1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let (y, _) = tape.batch_norm(x, g, b, 1e-5).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(tape.value(x).data()) {
            assert!((a - e).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_infer_identity_stats_is_affine() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[0.5, -2.0]));
        let g = tape.constant(t(&[2], &[2.0, 3.0]));
        let b = tape.constant(t(&[2], &[1.0, -1.0]));
        let y = tape.batch_norm_infer(x, g, b, &[0.0, 0.0], &[1.0, 1.0], 0.0).unwrap();
        assert_eq!(tape.value(y).data(), [2.0, -7.0]);
    }

    #[test]
    fn relu_values_and_subgradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[-1.0, 2.0, 0.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), [0.0, 2.0, 0.0]);
        let s = tape.weighted_sum(y, vec![1.0, 1.0, 1.0]).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn dense_hand_arithmetic_and_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let b = tape.constant(t(&[1], &[1.0]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), [4.0]);
        let bad = tape.constant(Tensor::zeros(&[3, 1]));
        assert!(tape.dense(x, bad, b).is_err());
    }

    #[test]
    fn softmax_xent_cases() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let (loss, p) = tape.softmax_xent(z, &[0]).unwrap();
        assert_eq!(p.data(), [0.5, 0.5]);
        assert!((tape.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let big = tape.constant(t(&[1, 2], &[1000.0, 0.0]));
        let (loss, p) = tape.softmax_xent(big, &[1]).unwrap();
        assert!(p.data()[0] > 0.999_999 && p.data()[1] < 1e-6);
        assert!(tape.value(loss).data()[0].is_finite());
        assert!(matches!(
            tape.softmax_xent(z, &[2]).unwrap_err(),
            TensorError::LabelOutOfRange { label: 2, classes: 2 }
        ));
    }

    #[test]
    fn flatten_and_concat_bookkeeping() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 947, 256]));
        let f = tape.flatten(x);
        assert_eq!(tape.shape(f), [2, 242_432]);
        let a = tape.constant(Tensor::zeros(&[3, 128]));
        let b = tape.constant(Tensor::zeros(&[3, 128]));
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), [3, 256]);
        let single = tape.concat(&[a]).unwrap();
        assert_eq!(tape.value(single), tape.value(a));
        let wrong = tape.constant(Tensor::zeros(&[2, 128]));
        assert!(tape.concat(&[a, wrong]).is_err());
    }

    #[test]
    fn gradients_skip_constant_inputs() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3, 1], &[1.0, 2.0, 3.0]));
        let k = tape.param(t(&[2, 1, 1], &[0.5, -0.5]));
        let y = tape.conv1d(x, k, None, Padding::Valid).unwrap();
        let s = tape.weighted_sum(y, vec![1.0, 1.0]).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(k).unwrap().data(), [3.0, 5.0]);
    }
}
