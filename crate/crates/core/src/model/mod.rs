//! The end-to-end model: per-modality linear encoders and Mamba stacks,
//! alignment toward an anchor modality, concatenation, a modality-aware
//! fusion stack, and a mean-pooled linear head.

mod checkpoint;
pub mod metrics;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use metrics::{accuracy, f1_score, Confusion};
pub use train::{
    clip_grad_norm, evaluate, read_metrics_csv, train, train_with, write_metrics_csv, Adam,
    EpochMetrics, EvalResult, TrainConfig, TrainReport, METRICS_HEADER,
};

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{alignment_loss, alignment_terms, AlignConfig, AlignError};
use crate::data::{DataError, Label, Mat1Error, ModalitySpec, MultimodalSample};
use crate::moe::{segment_ids, MoEMambaLayer, MoeError, Routing};
use crate::params::{Bound, Linear, ParamStore};
use crate::ssm::{MambaConfig, MambaLayer, SsmError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("sample has {got} modalities, model expects {expected}")]
    MissingModality { expected: usize, got: usize },
    #[error("modality {name}: expected [{len}, {d_in}] features, got {got:?}")]
    FeatureShape {
        name: String,
        len: usize,
        d_in: usize,
        got: Vec<usize>,
    },
    #[error("label {label:?} does not match a {head} head")]
    LabelMismatch { label: Label, head: String },
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("split {0} is empty")]
    EmptySplit(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Ssm(#[from] SsmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Mat1(#[from] Mat1Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Logits over this many classes, cross-entropy loss.
    Classification(usize),
    /// One real output, mean absolute error.
    Regression,
}

impl Head {
    pub fn outputs(self) -> usize {
        match self {
            Head::Classification(c) => c,
            Head::Regression => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Head::Classification(_) => "classification",
            Head::Regression => "regression",
        }
    }
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Drop both alignment losses.
    pub no_alignment: bool,
    /// Vanilla Mamba layers in the fusion stack.
    pub no_moe: bool,
    /// Gate-based instead of modality-based routing.
    pub learnable_routing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// In order; the fused sequence follows this order.
    pub modalities: Vec<ModalitySpec>,
    pub d_model: usize,
    pub mamba: MambaConfig,
    pub unimodal_layers: usize,
    pub fusion_layers: usize,
    pub head: Head,
    pub align: AlignConfig,
    pub dropout: f64,
    /// Modality-aware fusion layers; vanilla Mamba layers when false.
    pub moe: bool,
    pub routing: Routing,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            modalities: ModalitySpec::default_set(),
            d_model: 16,
            mamba: MambaConfig {
                d_state: 8,
                ..MambaConfig::default()
            },
            unimodal_layers: 1,
            fusion_layers: 1,
            head: Head::Classification(2),
            align: AlignConfig::default(),
            dropout: 0.2,
            moe: true,
            routing: Routing::Deterministic,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.modalities.is_empty() {
            return bad("modalities: need at least one".into());
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if m.d_in == 0 || m.len == 0 {
                return bad(format!("modalities[{i}]: d_in and len must be >= 1"));
            }
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return bad(format!("modalities[{i}]: duplicate name {:?}", m.name));
            }
        }
        if self.d_model == 0 {
            return bad("d_model must be >= 1".into());
        }
        if self.unimodal_layers == 0 || self.fusion_layers == 0 {
            return bad("unimodal_layers and fusion_layers must be >= 1".into());
        }
        if self.mamba.d_state == 0 || self.mamba.d_conv == 0 || self.mamba.expand == 0 {
            return bad("mamba: d_state, d_conv and expand must be >= 1".into());
        }
        if !(self.mamba.dt_min > 0.0 && self.mamba.dt_min <= self.mamba.dt_max) {
            return bad("mamba: need 0 < dt_min <= dt_max".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout = {} outside [0, 1)", self.dropout));
        }
        if let Head::Classification(c) = self.head {
            if c < 2 {
                return bad(format!("head: classification needs >= 2 classes, got {c}"));
            }
        }
        self.align
            .validate()
            .map_err(|e| ModelError::Config(format!("align: {e}")))?;
        if self.modalities.len() > 1 {
            self.align
                .anchor_for(self.modalities.len())
                .map_err(|e| ModelError::Config(format!("align.anchor: {e}")))?;
        }
        Ok(())
    }

    /// This config with the ablation switches applied.
    pub fn ablated(&self, a: &Ablation) -> ModelConfig {
        let mut c = self.clone();
        if a.no_alignment {
            c.align.lambda_ot = 0.0;
            c.align.lambda_mmd = 0.0;
        }
        if a.no_moe {
            c.moe = false;
        }
        if a.learnable_routing {
            c.routing = Routing::Learnable;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FusionLayer {
    Moe(MoEMambaLayer),
    Vanilla(MambaLayer),
}

impl FusionLayer {
    pub fn forward(&self, p: &Bound, x: &Tensor, ids: &[usize]) -> Result<Tensor, ModelError> {
        Ok(match self {
            FusionLayer::Moe(l) => l.forward(p, x, ids)?,
            FusionLayer::Vanilla(l) => l.forward(p, x)?,
        })
    }
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `H_m`, `[T_m, d_model]` each.
    pub reps: Vec<Tensor>,
    /// Fused sequence `[sum T_m, d_model]`.
    pub fused: Tensor,
    /// `[1, classes]` logits or `[1, 1]` value.
    pub output: Tensor,
}

/// Scalar loss terms of one sample, as plain numbers.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub task: f64,
    pub ot: f64,
    pub mmd: f64,
}

#[derive(Debug, Clone)]
pub struct AlignMamba {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoders: Vec<Linear>,
    pub unimodal: Vec<Vec<MambaLayer>>,
    pub fusion: Vec<FusionLayer>,
    pub head: Linear,
}

/// Inverted dropout as a product with a constant mask.
fn dropout(x: &Tensor, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor, ModelError> {
    let Some(rng) = rng else {
        return Ok(x.clone());
    };
    if p == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - p);
    let mask = Tensor::from_fn(x.shape(), |_| if rng.gen::<f64>() < p { 0.0 } else { keep });
    Ok(x.mul(&mask)?)
}

impl AlignMamba {
    pub fn new(config: ModelConfig, seed: u64) -> Result<AlignMamba, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let mut encoders = Vec::new();
        let mut unimodal = Vec::new();
        for m in &config.modalities {
            encoders.push(Linear::new(
                &mut store,
                &mut rng,
                &format!("enc.{}", m.name),
                m.d_in,
                d,
                true,
                1.0,
            ));
            unimodal.push(
                (0..config.unimodal_layers)
                    .map(|l| {
                        MambaLayer::new(
                            &mut store,
                            &mut rng,
                            &format!("uni.{}.{l}", m.name),
                            d,
                            &config.mamba,
                        )
                    })
                    .collect(),
            );
        }
        let k = config.modalities.len();
        let fusion = (0..config.fusion_layers)
            .map(|l| {
                let name = format!("fusion.{l}");
                if config.moe {
                    FusionLayer::Moe(MoEMambaLayer::new(
                        &mut store,
                        &mut rng,
                        &name,
                        d,
                        k,
                        &config.mamba,
                        config.routing,
                    ))
                } else {
                    FusionLayer::Vanilla(MambaLayer::new(
                        &mut store,
                        &mut rng,
                        &name,
                        d,
                        &config.mamba,
                    ))
                }
            })
            .collect();
        let head = Linear::new(
            &mut store,
            &mut rng,
            "head",
            d,
            config.head.outputs(),
            true,
            1.0,
        );
        Ok(AlignMamba {
            config,
            store,
            encoders,
            unimodal,
            fusion,
            head,
        })
    }

    pub fn check_sample(&self, sample: &MultimodalSample) -> Result<(), ModelError> {
        let mods = &self.config.modalities;
        if sample.features.len() != mods.len() {
            return Err(ModelError::MissingModality {
                expected: mods.len(),
                got: sample.features.len(),
            });
        }
        for (m, x) in mods.iter().zip(&sample.features) {
            if x.shape() != [m.len, m.d_in] {
                return Err(ModelError::FeatureShape {
                    name: m.name.clone(),
                    len: m.len,
                    d_in: m.d_in,
                    got: x.shape().to_vec(),
                });
            }
        }
        match (self.config.head, sample.label) {
            (Head::Classification(c), Label::Class(k)) if k < c => Ok(()),
            (Head::Regression, Label::Value(_)) => Ok(()),
            (head, label) => Err(ModelError::LabelMismatch {
                label,
                head: head.name().to_string(),
            }),
        }
    }

    /// `H_m = stack_m(encoder_m(X_m))` for every modality. Dropout on the
    /// encoder output when `rng` is given.
    pub fn encode(
        &self,
        p: &Bound,
        features: &[Tensor],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Tensor>, ModelError> {
        if features.len() != self.encoders.len() {
            return Err(ModelError::MissingModality {
                expected: self.encoders.len(),
                got: features.len(),
            });
        }
        let mut reps = Vec::with_capacity(features.len());
        for ((enc, stack), x) in self.encoders.iter().zip(&self.unimodal).zip(features) {
            let mut h = dropout(&enc.forward(p, x)?, self.config.dropout, rng.as_deref_mut())?;
            for layer in stack {
                h = layer.forward(p, &h)?;
            }
            reps.push(h);
        }
        Ok(reps)
    }

    /// Concatenates the reps in configured order and runs the fusion stack.
    pub fn fuse(&self, p: &Bound, reps: &[Tensor]) -> Result<Tensor, ModelError> {
        for (h, m) in reps.iter().zip(&self.config.modalities) {
            if h.rank() != 2 || h.shape()[1] != self.config.d_model {
                return Err(ModelError::FeatureShape {
                    name: m.name.clone(),
                    len: h.shape().first().copied().unwrap_or(0),
                    d_in: self.config.d_model,
                    got: h.shape().to_vec(),
                });
            }
        }
        let lengths: Vec<usize> = reps.iter().map(|h| h.shape()[0]).collect();
        let ids = segment_ids(&lengths);
        let mut z = Tensor::concat(reps, 0)?;
        for layer in &self.fusion {
            z = layer.forward(p, &z, &ids)?;
        }
        Ok(z)
    }

    /// Mean-pool over time, then the linear head.
    pub fn predict(
        &self,
        p: &Bound,
        z: &Tensor,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, ModelError> {
        let pooled = dropout(&z.mean(&[0])?, self.config.dropout, rng)?;
        Ok(self.head.forward(p, &pooled)?)
    }

    pub fn forward(
        &self,
        p: &Bound,
        sample: &MultimodalSample,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward, ModelError> {
        self.check_sample(sample)?;
        let reps = self.encode(p, &sample.features, rng.as_deref_mut())?;
        let fused = self.fuse(p, &reps)?;
        let output = self.predict(p, &fused, rng)?;
        Ok(Forward {
            reps,
            fused,
            output,
        })
    }

    /// Cross-entropy over logits, or absolute error.
    pub fn task_loss(&self, output: &Tensor, label: Label) -> Result<Tensor, ModelError> {
        match (self.config.head, label) {
            (Head::Classification(c), Label::Class(k)) if k < c => {
                Ok(output.log_softmax(1)?.pick(&[k])?.sum_all()?.neg()?)
            }
            (Head::Regression, Label::Value(y)) => Ok(output.add_scalar(-y)?.abs()?.sum_all()?),
            (head, label) => Err(ModelError::LabelMismatch {
                label,
                head: head.name().to_string(),
            }),
        }
    }

    /// Weighted alignment term; zero with fewer than two modalities.
    pub fn align_loss(&self, reps: &[Tensor]) -> Result<Tensor, ModelError> {
        if reps.len() < 2 {
            return Ok(Tensor::scalar(0.0));
        }
        Ok(alignment_loss(reps, &self.config.align)?)
    }

    /// `L_task + lambda_ot * L_ot + lambda_mmd * L_mmd`.
    pub fn total_loss(&self, fwd: &Forward, label: Label) -> Result<Tensor, ModelError> {
        Ok(self
            .task_loss(&fwd.output, label)?
            .add(&self.align_loss(&fwd.reps)?)?)
    }

    /// Unweighted terms for logging.
    pub fn loss_parts(&self, fwd: &Forward, label: Label) -> Result<LossParts, ModelError> {
        let task = self.task_loss(&fwd.output, label)?.item()?;
        if fwd.reps.len() < 2 {
            return Ok(LossParts {
                task,
                ot: 0.0,
                mmd: 0.0,
            });
        }
        let t = alignment_terms(&fwd.reps, &self.config.align)?;
        Ok(LossParts {
            task,
            ot: t.ot.item()?,
            mmd: t.mmd.item()?,
        })
    }

    /// Predicted class, or the regression value.
    pub fn decide(&self, output: &Tensor) -> Label {
        match self.config.head {
            Head::Classification(_) => {
                let row = output.data();
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                Label::Class(best)
            }
            Head::Regression => Label::Value(output.data()[0]),
        }
    }
}
