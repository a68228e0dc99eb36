//! The two-subnet identification network: construction, training,
//! inference and checkpoints.

pub mod checkpoint;
pub mod net;
pub mod train;

use eyedent_autograd::{Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::signal::{self, InputWindow, TransformConfig, TwoScale, VelocitySequence, ZScoreStats};
use crate::sim::derive_seed;
pub use net::{BlockSpec, JointNet, Mode, NamedTensors, Subnet, SubnetConfig};
pub use train::{EpochLog, StageLog, TrainConfig, TrainingMeta};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("{stage} stage diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { stage: String, epoch: usize, batch: usize },
    #[error("model is not trained for {0}")]
    Untrained(&'static str),
    #[error("window shape: {0}")]
    WindowShape(String),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("training data: {0}")]
    Data(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub slow: SubnetConfig,
    pub fast: SubnetConfig,
    pub joint_sizes: Vec<usize>,
    pub window_len: usize,
}

impl ModelConfig {
    /// The nine-block architecture with full filter counts.
    pub fn full() -> Self {
        Self {
            slow: SubnetConfig::slow_full(),
            fast: SubnetConfig::fast_full(),
            joint_sizes: vec![256, 128],
            window_len: signal::WINDOW_LEN,
        }
    }

    /// The desk-scale profile (see [`SubnetConfig::slow_reduced`]).
    pub fn reduced() -> Self {
        Self {
            slow: SubnetConfig::slow_reduced(),
            fast: SubnetConfig::fast_reduced(),
            ..Self::full()
        }
    }

    pub fn embedding_size(&self) -> usize {
        self.slow.embedding_size + self.fast.embedding_size + self.joint_sizes.last().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageFlags {
    pub slow: bool,
    pub fast: bool,
    pub joint: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Slow,
    Fast,
    Joint,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Slow => "slow",
            Head::Fast => "fast",
            Head::Joint => "joint",
        }
    }
}

/// Fixed-length window representation: joint ⊕ fast ⊕ slow embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub norm: f64,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Self {
        let norm = values.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        Self { values, norm }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A complete model: both subnets, the joint layers, the input scaling it
/// was trained with and its class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub slow: Subnet,
    pub fast: Subnet,
    pub joint: JointNet,
    pub labels: Vec<String>,
    pub transform: TransformConfig,
    pub zscore: ZScoreStats,
    pub trained: StageFlags,
    pub meta: TrainingMeta,
}

/// Windows evaluated per inference batch.
const INFER_BATCH: usize = 32;

impl ModelBundle {
    /// Freshly initialized model. Each part draws its weights from its own
    /// seed derived from `seed`, so re-running a single stage is reproducible.
    pub fn new(config: ModelConfig, labels: Vec<String>, transform: TransformConfig, zscore: ZScoreStats, seed: u64) -> Result<Self> {
        let classes = labels.len();
        let rng = |k: u64| ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1417, k));
        let slow = Subnet::new("slow", &config.slow, config.window_len, classes, &mut rng(1))?;
        let fast = Subnet::new("fast", &config.fast, config.window_len, classes, &mut rng(2))?;
        let joint_in = config.slow.embedding_size + config.fast.embedding_size;
        let joint = JointNet::new(joint_in, &config.joint_sizes, classes, &mut rng(3))?;
        Ok(Self {
            config,
            slow,
            fast,
            joint,
            labels,
            transform,
            zscore,
            trained: StageFlags::default(),
            meta: TrainingMeta { seed, stages: Vec::new() },
        })
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Both views of `seq` under this model's scaling, cut into windows.
    pub fn windows_for(&self, seq: &VelocitySequence, stride: usize, sequence: usize) -> Vec<InputWindow> {
        let views = TwoScale::new(seq, &self.transform, &self.zscore);
        let label = (!seq.subject_id.is_empty()).then_some(seq.subject_id.as_str());
        signal::windows(&views, self.config.window_len, stride, label, sequence)
    }

    fn require(&self, head: Head) -> Result<()> {
        let ok = match head {
            Head::Slow => self.trained.slow,
            Head::Fast => self.trained.fast,
            Head::Joint => self.trained.slow && self.trained.fast && self.trained.joint,
        };
        if ok {
            Ok(())
        } else {
            Err(ModelError::Untrained(head.name()))
        }
    }

    fn check_window(&self, w: &InputWindow) -> Result<()> {
        let expect = self.config.window_len * self.config.slow.input_channels;
        if w.len != self.config.window_len || w.slow.len() != expect || w.fast.len() != expect {
            return Err(ModelError::WindowShape(format!(
                "expected {} samples × {} channels, got len {} ({} slow / {} fast values)",
                self.config.window_len,
                self.config.slow.input_channels,
                w.len,
                w.slow.len(),
                w.fast.len()
            )));
        }
        Ok(())
    }

    fn input(&self, tape: &mut Tape<f32>, windows: &[&InputWindow], fast: bool) -> Result<Var> {
        let ch = self.config.slow.input_channels;
        let mut data = Vec::with_capacity(windows.len() * self.config.window_len * ch);
        for w in windows {
            self.check_window(w)?;
            data.extend_from_slice(if fast { &w.fast } else { &w.slow });
        }
        Ok(tape.constant(Tensor::new(vec![windows.len(), self.config.window_len, ch], data)?))
    }

    /// Inference-mode pass over one batch. Returns the `(logits, embedding)`
    /// nodes of every part.
    fn infer(&self, tape: &mut Tape<f32>, windows: &[&InputWindow], need: Parts) -> Result<Outputs> {
        let mut out = Outputs::default();
        if need.slow {
            let x = self.input(tape, windows, false)?;
            let o = self.slow.forward(tape, x, Mode::Infer)?;
            out.slow = Some((o.logits, o.embedding));
        }
        if need.fast {
            let x = self.input(tape, windows, true)?;
            let o = self.fast.forward(tape, x, Mode::Infer)?;
            out.fast = Some((o.logits, o.embedding));
        }
        if need.joint {
            let (s, f) = (out.slow.expect("slow").1, out.fast.expect("fast").1);
            let x = tape.concat(&[s, f])?;
            let o = self.joint.forward(tape, x, Mode::Infer)?;
            out.joint = Some((o.logits, o.embedding));
        }
        Ok(out)
    }

    /// Class probabilities from the chosen softmax head, one row per window.
    /// Each window's output does not depend on which windows share its batch.
    pub fn predict(&self, windows: &[&InputWindow], head: Head) -> Result<Vec<Vec<f64>>> {
        self.require(head)?;
        let mut rows = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(INFER_BATCH) {
            let mut tape = Tape::new();
            let out = self.infer(&mut tape, chunk, head.into())?;
            let logits = match head {
                Head::Slow => out.slow,
                Head::Fast => out.fast,
                Head::Joint => out.joint,
            }
            .expect("requested head was computed")
            .0;
            rows.extend(tape.value(logits).data().chunks_exact(self.classes()).map(softmax));
        }
        Ok(rows)
    }

    pub fn classify(&self, window: &InputWindow) -> Result<Vec<f64>> {
        Ok(self.predict(&[window], Head::Joint)?.remove(0))
    }

    /// Embeddings (joint ⊕ fast ⊕ slow) of every window.
    pub fn embed(&self, windows: &[&InputWindow]) -> Result<Vec<EmbeddingVector>> {
        self.require(Head::Joint)?;
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(INFER_BATCH) {
            let mut tape = Tape::new();
            let o = self.infer(&mut tape, chunk, Head::Joint.into())?;
            let parts = [o.joint, o.fast, o.slow].map(|p| p.expect("all parts computed").1);
            for i in 0..chunk.len() {
                let mut values = Vec::with_capacity(self.config.embedding_size());
                for &p in &parts {
                    let t = tape.value(p);
                    let d = t.shape()[1];
                    values.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
                }
                out.push(EmbeddingVector::new(values));
            }
        }
        Ok(out)
    }

    /// Subnet embeddings `[slow ⊕ fast]` per window, the input of the joint
    /// layers.
    pub(crate) fn subnet_features(&self, windows: &[&InputWindow]) -> Result<Vec<f32>> {
        let width = self.config.slow.embedding_size + self.config.fast.embedding_size;
        let mut out = Vec::with_capacity(windows.len() * width);
        for chunk in windows.chunks(INFER_BATCH) {
            let mut tape = Tape::new();
            let parts = Parts {
                slow: true,
                fast: true,
                joint: false,
            };
            let o = self.infer(&mut tape, chunk, parts)?;
            let s = tape.value(o.slow.expect("slow").1).data().to_vec();
            let f = tape.value(o.fast.expect("fast").1).data().to_vec();
            let (ds, df) = (self.config.slow.embedding_size, self.config.fast.embedding_size);
            for i in 0..chunk.len() {
                out.extend_from_slice(&s[i * ds..(i + 1) * ds]);
                out.extend_from_slice(&f[i * df..(i + 1) * df]);
            }
        }
        Ok(out)
    }

    /// SHA-256 over every subnet tensor (names, shapes and bytes), including
    /// batch-norm running statistics.
    pub fn subnet_hash(&self) -> String {
        let mut all = self.slow.all();
        all.extend(self.fast.all());
        tensor_hash(&all)
    }
}

#[derive(Clone, Copy)]
struct Parts {
    slow: bool,
    fast: bool,
    joint: bool,
}

impl From<Head> for Parts {
    fn from(h: Head) -> Self {
        match h {
            Head::Slow => Parts {
                slow: true,
                fast: false,
                joint: false,
            },
            Head::Fast => Parts {
                slow: false,
                fast: true,
                joint: false,
            },
            Head::Joint => Parts {
                slow: true,
                fast: true,
                joint: true,
            },
        }
    }
}

#[derive(Default)]
struct Outputs {
    slow: Option<(Var, Var)>,
    fast: Option<(Var, Var)>,
    joint: Option<(Var, Var)>,
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().map(|&v| f64::from(v)).fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&v| (f64::from(v) - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

pub fn tensor_hash(tensors: &[(String, &Tensor<f32>)]) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
