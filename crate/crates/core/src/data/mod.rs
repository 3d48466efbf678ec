//! Synthetic multimodal datasets and their on-disk layout.

pub mod mat1;
mod store;
mod synth;

pub use mat1::{from_bytes, load_mat1, save_mat1, to_bytes, Mat1Error};
pub use store::{load_dataset, manifest_path, save_dataset, Manifest, SampleEntry, MANIFEST_FILE};
pub use synth::{generate, SynthConfig};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("output directory {0} is not empty (pass --force to overwrite)")]
    DirNotEmpty(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Mat1(#[from] Mat1Error),
}

/// One input stream: its name, feature width and sequence length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    pub d_in: usize,
    pub len: usize,
}

impl ModalitySpec {
    pub fn new(name: &str, d_in: usize, len: usize) -> ModalitySpec {
        ModalitySpec {
            name: name.to_string(),
            d_in,
            len,
        }
    }

    /// Audio, video and language streams at toy sizes; language last.
    pub fn default_set() -> Vec<ModalitySpec> {
        vec![
            ModalitySpec::new("A", 12, 8),
            ModalitySpec::new("V", 10, 8),
            ModalitySpec::new("L", 16, 8),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Class(usize),
    Value(f64),
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Value(_) => None,
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Label::Class(c) => c as f64,
            Label::Value(v) => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|sp| sp.name() == s)
    }
}

/// Per-modality feature sequences `[T_m, d_in]` and a label.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    pub features: Vec<Tensor>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub modalities: Vec<ModalitySpec>,
    pub task: Task,
    /// 1 for regression.
    pub num_classes: usize,
    pub samples: Vec<MultimodalSample>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    pub fn split(&self, split: Split) -> Vec<&MultimodalSample> {
        self.indices(split)
            .into_iter()
            .map(|i| &self.samples[i])
            .collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
