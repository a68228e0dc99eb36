//! Three-stage training: slow subnet, fast subnet, then the joint layers on
//! top of the frozen subnets.

use eyedent_autograd::{Adam, AdamConfig, Tape, Tensor, Var};
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{Bound, Mode, NamedTensors};
use super::{ModelBundle, ModelError, Result};
use crate::signal::InputWindow;
use crate::sim::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub subnet_lr: f64,
    pub joint_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without held-out improvement before stopping.
    pub patience: usize,
    /// Trailing fraction of every training sequence held out for early
    /// stopping. Zero disables early stopping.
    pub holdout_fraction: f64,
    /// Stop a stage once inference-mode training accuracy reaches this.
    pub target_train_accuracy: Option<f64>,
    pub amsgrad: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            subnet_lr: 1e-3,
            joint_lr: 1e-4,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            holdout_fraction: 0.1,
            target_train_accuracy: None,
            amsgrad: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        for (name, lr) in [("subnet_lr", self.subnet_lr), ("joint_lr", self.joint_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.batch_size < 2 {
            return bad(format!("batch size must be at least 2 for batch norm, got {}", self.batch_size));
        }
        if !(0.0..0.5).contains(&self.holdout_fraction) {
            return bad(format!("holdout fraction must be in [0, 0.5), got {}", self.holdout_fraction));
        }
        if let Some(t) = self.target_train_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("target accuracy must be in [0, 1], got {t}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Accuracy of the training batches as they were seen (training mode).
    pub train_accuracy: f64,
    pub holdout_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: String,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub train_windows: usize,
    pub holdout_windows: usize,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose weights were kept (1-based), if any epoch ran.
    pub best_epoch: Option<usize>,
    /// Inference-mode accuracy on the training windows at the end.
    pub final_train_accuracy: Option<f64>,
    pub stop_reason: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub frozen_hash_before: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub frozen_hash_after: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub stages: Vec<StageLog>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Slow,
    Fast,
    Joint,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Slow, Stage::Fast, Stage::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Slow => "slow",
            Stage::Fast => "fast",
            Stage::Joint => "joint",
        }
    }
}

/// Where a batch of inputs comes from: raw windows for the subnets, cached
/// subnet embeddings for the joint layers.
enum Inputs<'a> {
    Windows {
        windows: &'a [&'a InputWindow],
        fast: bool,
        len: usize,
        ch: usize,
    },
    Features {
        data: &'a [f32],
        width: usize,
    },
}

impl Inputs<'_> {
    fn batch(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        Ok(match self {
            Inputs::Windows { windows, fast, len, ch } => {
                let mut data = Vec::with_capacity(idx.len() * len * ch);
                for &i in idx {
                    let w = windows[i];
                    data.extend_from_slice(if *fast { &w.fast } else { &w.slow });
                }
                Tensor::new(vec![idx.len(), *len, *ch], data)?
            }
            Inputs::Features { data, width } => {
                let mut out = Vec::with_capacity(idx.len() * width);
                for &i in idx {
                    out.extend_from_slice(&data[i * width..(i + 1) * width]);
                }
                Tensor::new(vec![idx.len(), *width], out)?
            }
        })
    }
}

/// Holds out the tail of every training sequence: windows starting in its
/// last `fraction` become the holdout set, windows straddling the cut are
/// dropped so no sample lands on both sides. Using the same relative cut for
/// every sequence keeps simultaneously recorded eyes on the same side.
/// Classes that would lose all their training windows keep everything.
fn split(windows: &[&InputWindow], labels: &[usize], classes: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut ends: std::collections::BTreeMap<usize, usize> = Default::default();
    for w in windows {
        let e = ends.entry(w.origin.sequence).or_default();
        *e = (*e).max(w.origin.start + w.len);
    }
    let side = |i: usize| -> Option<bool> {
        let w = windows[i];
        let cut = ((1.0 - fraction) * ends[&w.origin.sequence] as f64).floor() as usize;
        if fraction <= 0.0 || w.origin.start + w.len <= cut {
            Some(false)
        } else if w.origin.start >= cut {
            Some(true)
        } else {
            None
        }
    };
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for c in 0..classes {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if !idx.iter().any(|&i| side(i) == Some(false)) {
            train.extend_from_slice(&idx);
            continue;
        }
        for i in idx {
            match side(i) {
                Some(false) => train.push(i),
                Some(true) => holdout.push(i),
                None => {}
            }
        }
    }
    train.sort_unstable();
    holdout.sort_unstable();
    (train, holdout)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Forward pass returning `(logits, bound parameters)`.
type ForwardFn<N> = fn(&N, &mut Tape<f32>, Var, Mode) -> Result<(Var, Bound)>;

struct Fit<'a, N> {
    stage: Stage,
    windows: &'a [&'a InputWindow],
    lr: f64,
    cfg: &'a TrainConfig,
    inputs: Inputs<'a>,
    labels: &'a [usize],
    classes: usize,
    forward: ForwardFn<N>,
}

impl<N: NamedTensors + Clone> Fit<'_, N> {
    fn accuracy(&self, net: &N, idx: &[usize]) -> Result<f64> {
        let mut correct = 0;
        for chunk in idx.chunks(32) {
            let mut tape = Tape::new();
            let x = tape.constant(self.inputs.batch(chunk)?);
            let (logits, _) = (self.forward)(net, &mut tape, x, Mode::Infer)?;
            for (row, &i) in tape.value(logits).data().chunks_exact(self.classes).zip(chunk) {
                correct += usize::from(argmax(row) == self.labels[i]);
            }
        }
        Ok(correct as f64 / idx.len().max(1) as f64)
    }

    fn run(&self, net: &mut N) -> Result<StageLog> {
        let cfg = self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x7124, self.stage as u64));
        let (mut train, holdout) = split(self.windows, self.labels, self.classes, cfg.holdout_fraction);
        let mut log = StageLog {
            stage: self.stage.name().to_string(),
            learning_rate: self.lr,
            batch_size: cfg.batch_size,
            train_windows: train.len(),
            holdout_windows: holdout.len(),
            epochs: Vec::new(),
            best_epoch: None,
            final_train_accuracy: None,
            stop_reason: "max epochs".into(),
            frozen_hash_before: None,
            frozen_hash_after: None,
        };
        if train.len() < 2 {
            return Err(ModelError::Data(format!("{} training windows; need at least 2", train.len())));
        }
        let adam_cfg = AdamConfig {
            lr: self.lr,
            amsgrad: cfg.amsgrad,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(adam_cfg, net.trainable().iter().map(|(_, t)| t.numel()));
        let mut best: Option<(f64, N)> = None;
        let mut since_best = 0;

        for epoch in 1..=cfg.max_epochs {
            train.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut seen = 0;
            let mut correct = 0;
            for (b, idx) in train.chunks(cfg.batch_size).enumerate() {
                if idx.len() < 2 {
                    continue; // batch norm needs two rows
                }
                let mut tape = Tape::new();
                let x = tape.constant(self.inputs.batch(idx)?);
                let (logits, bound) = (self.forward)(net, &mut tape, x, Mode::Train)?;
                let labels: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
                let (loss, probs) = tape.softmax_xent(logits, &labels)?;
                let loss_value = f64::from(tape.value(loss).data()[0]);
                if !loss_value.is_finite() {
                    return Err(ModelError::Diverged {
                        stage: self.stage.name().into(),
                        epoch,
                        batch: b + 1,
                    });
                }
                for (row, &l) in probs.data().chunks_exact(self.classes).zip(&labels) {
                    correct += usize::from(argmax(row) == l);
                }
                loss_sum += loss_value * idx.len() as f64;
                seen += idx.len();
                let mut grads = tape.backward(loss)?;
                let grads: Vec<Tensor<f32>> = bound
                    .params
                    .iter()
                    .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
                    .collect();
                let mut named = net.trainable_mut();
                let mut refs: Vec<(&str, &mut Tensor<f32>)> = named.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
                adam.step(&mut refs, &grads).map_err(|e| match e {
                    eyedent_autograd::TensorError::NonFiniteGradient(_) => ModelError::Diverged {
                        stage: self.stage.name().into(),
                        epoch,
                        batch: b + 1,
                    },
                    other => other.into(),
                })?;
                drop(refs);
                drop(named);
                net.update_running_stats(&bound.stats);
            }
            let seen_f = seen.max(1) as f64;
            let holdout_accuracy = if holdout.is_empty() {
                None
            } else {
                Some(self.accuracy(net, &holdout)?)
            };
            let entry = EpochLog {
                epoch,
                loss: loss_sum / seen_f,
                train_accuracy: correct as f64 / seen_f,
                holdout_accuracy,
            };
            info!(
                "{} epoch {epoch}: loss {:.4} train acc {:.3} holdout {:?}",
                self.stage.name(),
                entry.loss,
                entry.train_accuracy,
                holdout_accuracy
            );
            log.epochs.push(entry);

            if let Some(acc) = holdout_accuracy {
                if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                    best = Some((acc, net.clone()));
                    log.best_epoch = Some(epoch);
                    since_best = 0;
                } else {
                    since_best += 1;
                }
            } else {
                log.best_epoch = Some(epoch);
            }
            if let Some(target) = cfg.target_train_accuracy {
                if correct as f64 / seen_f >= target && self.accuracy(net, &train)? >= target {
                    log.stop_reason = "target train accuracy".into();
                    log.best_epoch = Some(epoch);
                    best = None;
                    break;
                }
            }
            if holdout_accuracy.is_some() && since_best >= cfg.patience {
                log.stop_reason = "early stopping".into();
                break;
            }
        }
        if let Some((_, snapshot)) = best {
            *net = snapshot;
        }
        if !log.epochs.is_empty() {
            log.final_train_accuracy = Some(self.accuracy(net, &train)?);
        } else {
            log.best_epoch = None;
            log.stop_reason = "zero epochs".into();
        }
        Ok(log)
    }
}

fn subnet_forward(net: &super::Subnet, tape: &mut Tape<f32>, x: Var, mode: Mode) -> Result<(Var, Bound)> {
    let o = net.forward(tape, x, mode)?;
    Ok((o.logits, o.bound))
}

fn joint_forward(net: &super::JointNet, tape: &mut Tape<f32>, x: Var, mode: Mode) -> Result<(Var, Bound)> {
    let o = net.forward(tape, x, mode)?;
    Ok((o.logits, o.bound))
}

impl ModelBundle {
    fn label_indices(&self, windows: &[&InputWindow]) -> Result<Vec<usize>> {
        windows
            .iter()
            .map(|w| {
                let l = w
                    .label
                    .as_deref()
                    .ok_or_else(|| ModelError::Data("training window without a label".into()))?;
                self.label_index(l).ok_or_else(|| ModelError::UnknownLabel(l.to_string()))
            })
            .collect()
    }

    /// Runs one training stage and appends its log. The joint stage trains
    /// on subnet embeddings computed once in inference mode, so subnet
    /// weights and batch-norm statistics cannot change.
    pub fn train_stage(&mut self, stage: Stage, windows: &[&InputWindow], cfg: &TrainConfig) -> Result<&StageLog> {
        cfg.validate()?;
        let labels = self.label_indices(windows)?;
        for c in 0..self.classes() {
            if !labels.contains(&c) {
                return Err(ModelError::Data(format!("class {:?} has no training windows", self.labels[c])));
            }
        }
        let classes = self.classes();
        let (len, ch) = (self.config.window_len, self.config.slow.input_channels);
        let log = match stage {
            Stage::Slow | Stage::Fast => {
                let fit = Fit {
                    stage,
                    windows,
                    lr: cfg.subnet_lr,
                    cfg,
                    inputs: Inputs::Windows {
                        windows,
                        fast: stage == Stage::Fast,
                        len,
                        ch,
                    },
                    labels: &labels,
                    classes,
                    forward: subnet_forward,
                };
                let net = if stage == Stage::Slow { &mut self.slow } else { &mut self.fast };
                let log = fit.run(net)?;
                if stage == Stage::Slow {
                    self.trained.slow = true;
                } else {
                    self.trained.fast = true;
                }
                log
            }
            Stage::Joint => {
                if !(self.trained.slow && self.trained.fast) {
                    return Err(ModelError::Untrained("joint training (subnets not pretrained)"));
                }
                let before = self.subnet_hash();
                let width = self.config.slow.embedding_size + self.config.fast.embedding_size;
                let features = self.subnet_features(windows)?;
                let fit = Fit {
                    stage,
                    windows,
                    lr: cfg.joint_lr,
                    cfg,
                    inputs: Inputs::Features { data: &features, width },
                    labels: &labels,
                    classes,
                    forward: joint_forward,
                };
                let mut log = fit.run(&mut self.joint)?;
                self.trained.joint = true;
                log.frozen_hash_before = Some(before);
                log.frozen_hash_after = Some(self.subnet_hash());
                log
            }
        };
        self.meta.stages.push(log);
        Ok(self.meta.stages.last().expect("just pushed"))
    }

    /// The stages in order: slow, fast, joint.
    pub fn train_all(&mut self, windows: &[&InputWindow], cfg: &TrainConfig) -> Result<()> {
        for stage in Stage::ALL {
            self.train_stage(stage, windows, cfg)?;
        }
        Ok(())
    }
}
