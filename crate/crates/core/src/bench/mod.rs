//! Forward-pass timing and peak-allocation sweeps over sequence length.
//!
//! Three fusion kernels are compared: a vanilla Mamba layer, the merged
//! modality-aware layer, and a single-head attention layer that builds the
//! full `T x T` score matrix. All run in `f32` on the calling thread with
//! batch size 1. Peak bytes come from [`crate::mem`], so the process must
//! install [`crate::mem::CountingAllocator`].

mod analysis;
mod attention;
mod report;

pub use analysis::{check_trends, loglog_slope, summarize, Check, Growth, KernelSummary, Point};
pub use attention::AttentionBaseline;
pub use report::{emit_csv, emit_svg, read_csv, CSV_HEADER};

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mem::{self, OutOfMemory};
use crate::moe::infer::MoEMambaKernel;
use crate::moe::{segment_ids, MoEMambaLayer, ModalityId, Routing};
use crate::params::ParamStore;
use crate::ssm::infer::MambaKernel;
use crate::ssm::{MambaConfig, MambaLayer};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no samples to write")]
    Empty,
    #[error("unknown kernel {0:?} (expected mamba_fusion, moe_mamba_fusion or attention_fusion)")]
    UnknownKernel(String),
    #[error("invalid sweep: {0}")]
    InvalidConfig(String),
    #[error("the counting allocator is not installed; peak bytes cannot be measured")]
    AllocatorMissing,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: unexpected header {found:?}")]
    Header { path: PathBuf, found: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    MambaFusion,
    MoeMambaFusion,
    AttentionFusion,
}

impl KernelKind {
    pub const ALL: [KernelKind; 3] = [
        KernelKind::MambaFusion,
        KernelKind::MoeMambaFusion,
        KernelKind::AttentionFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::MambaFusion => "mamba_fusion",
            KernelKind::MoeMambaFusion => "moe_mamba_fusion",
            KernelKind::AttentionFusion => "attention_fusion",
        }
    }

    /// How the kernel is expected to scale in time.
    pub fn expected_growth(self) -> Growth {
        match self {
            KernelKind::AttentionFusion => Growth::Quadratic,
            _ => Growth::Linear,
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelKind {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        KernelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| BenchError::UnknownKernel(s.to_string()))
    }
}

/// One timed forward pass. OOM rows carry the time and bytes reached before
/// the refused allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSample {
    pub kernel: KernelKind,
    pub length: usize,
    pub trial: usize,
    pub time_ms: f64,
    pub peak_bytes: usize,
    pub oom: bool,
}

pub const DEFAULT_LENGTHS: [usize; 5] = [1024, 2048, 4096, 8192, 16384];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub kernels: Vec<KernelKind>,
    /// Strictly ascending.
    pub lengths: Vec<usize>,
    pub trials: usize,
    pub d_model: usize,
    /// Segments for the modality-aware kernel.
    pub modalities: usize,
    /// Per-pass allocation cap; passes over it are recorded as OOM.
    pub mem_budget: Option<usize>,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            kernels: KernelKind::ALL.to_vec(),
            lengths: DEFAULT_LENGTHS.to_vec(),
            trials: 10,
            d_model: 128,
            modalities: 3,
            mem_budget: Some(1 << 30),
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::InvalidConfig(m));
        if self.kernels.is_empty() {
            return bad("no kernels".into());
        }
        if self.lengths.is_empty() || self.lengths.contains(&0) {
            return bad("lengths must be nonempty and positive".into());
        }
        if self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "lengths must be strictly ascending, got {:?}",
                self.lengths
            ));
        }
        if self.trials < 3 {
            return bad(format!("trials must be at least 3, got {}", self.trials));
        }
        if self.d_model == 0 || self.modalities == 0 {
            return bad("d_model and modalities must be positive".into());
        }
        Ok(())
    }
}

/// A built forward-only kernel, ready to time.
pub enum FusionKernel {
    Mamba(MambaKernel<f32>),
    MoeMamba(MoEMambaKernel<f32>),
    Attention(AttentionBaseline<f32>),
}

impl FusionKernel {
    pub fn build(kind: KernelKind, d_model: usize, modalities: usize, seed: u64) -> FusionKernel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = MambaConfig::default();
        match kind {
            KernelKind::MambaFusion => {
                let layer = MambaLayer::new(&mut store, &mut rng, "fusion", d_model, &cfg);
                FusionKernel::Mamba(MambaKernel::from_layer(&layer, &store))
            }
            KernelKind::MoeMambaFusion => {
                let layer = MoEMambaLayer::new(
                    &mut store,
                    &mut rng,
                    "fusion",
                    d_model,
                    modalities,
                    &cfg,
                    Routing::Deterministic,
                );
                let k = MoEMambaKernel::from_layer(&layer, &store)
                    .expect("deterministic routing merges");
                FusionKernel::MoeMamba(k)
            }
            KernelKind::AttentionFusion => {
                FusionKernel::Attention(AttentionBaseline::new(&mut rng, d_model))
            }
        }
    }

    /// `x: [ids.len(), d_model]`.
    pub fn forward(&self, x: &[f32], ids: &[ModalityId]) -> Result<Vec<f32>, OutOfMemory> {
        match self {
            FusionKernel::Mamba(k) => k.forward(x, ids.len()),
            FusionKernel::MoeMamba(k) => k.forward(x, ids),
            FusionKernel::Attention(k) => k.forward(x, ids.len()),
        }
    }
}

/// Modality ids for a fused sequence of `t_len` tokens split into
/// `modalities` near-equal contiguous segments.
pub fn even_segments(t_len: usize, modalities: usize) -> Vec<ModalityId> {
    let base = t_len / modalities;
    let lengths: Vec<usize> = (0..modalities)
        .map(|m| base + usize::from(m < t_len % modalities))
        .collect();
    segment_ids(&lengths)
}

fn random_input(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

/// One timed pass under the budget: `(elapsed ms, peak bytes, oom)`.
fn timed_pass(
    kernel: &FusionKernel,
    x: &[f32],
    ids: &[ModalityId],
    budget: Option<usize>,
) -> (f64, usize, bool) {
    mem::set_budget(budget);
    let ((ms, oom), peak) = mem::measure(|| {
        let start = Instant::now();
        let out = kernel.forward(x, ids);
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let oom = out.is_err();
        drop(std::hint::black_box(out));
        (ms, oom)
    });
    mem::set_budget(None);
    (ms, peak, oom)
}

/// Times every kernel at every length. Each (kernel, length) cell gets one
/// discarded warmup pass, then `trials` measured passes taken round-robin
/// over all cells, so a slow stretch on the machine is spread across
/// lengths instead of landing on one. A kernel that runs out of memory gets
/// a single OOM row at that length and is not run at longer lengths.
/// Rows come back grouped by kernel, length and trial.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<BenchSample>, BenchError> {
    run_sweep_with(cfg, |_| {})
}

/// [`run_sweep`] with a callback per finished row.
pub fn run_sweep_with(
    cfg: &SweepConfig,
    mut on_sample: impl FnMut(&BenchSample),
) -> Result<Vec<BenchSample>, BenchError> {
    cfg.validate()?;
    if !mem::is_installed() {
        return Err(BenchError::AllocatorMissing);
    }
    let kernels: Vec<FusionKernel> = cfg
        .kernels
        .iter()
        .enumerate()
        .map(|(ki, &kind)| {
            FusionKernel::build(
                kind,
                cfg.d_model,
                cfg.modalities,
                cfg.seed.wrapping_add(ki as u64),
            )
        })
        .collect();
    let mut samples = Vec::new();
    let mut cells = Vec::new();
    for (ki, &kind) in cfg.kernels.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x42_454e_4348);
        for &length in &cfg.lengths {
            let x = random_input(&mut rng, length * cfg.d_model);
            let ids = even_segments(length, cfg.modalities);
            let (ms, peak, oom) = timed_pass(&kernels[ki], &x, &ids, cfg.mem_budget);
            if oom {
                let s = BenchSample {
                    kernel: kind,
                    length,
                    trial: 0,
                    time_ms: ms,
                    peak_bytes: peak,
                    oom: true,
                };
                on_sample(&s);
                samples.push(s);
                break;
            }
            cells.push((ki, length, x, ids));
        }
    }
    for trial in 0..cfg.trials {
        for (ki, length, x, ids) in &cells {
            let (time_ms, peak_bytes, oom) = timed_pass(&kernels[*ki], x, ids, cfg.mem_budget);
            let s = BenchSample {
                kernel: cfg.kernels[*ki],
                length: *length,
                trial,
                time_ms,
                peak_bytes,
                oom,
            };
            on_sample(&s);
            samples.push(s);
        }
    }
    let rank = |k: KernelKind| cfg.kernels.iter().position(|&c| c == k);
    samples.sort_by_key(|s| (rank(s.kernel), s.length, s.trial));
    Ok(samples)
}

/// Relative slowdown of the merged modality-aware layer against a vanilla
/// layer of the same width: `median(moe) / median(vanilla) - 1`. Passes are
/// interleaved so drift hits both equally.
pub fn moe_overhead(
    d_model: usize,
    t_len: usize,
    modalities: usize,
    trials: usize,
    seed: u64,
) -> f64 {
    let vanilla = FusionKernel::build(KernelKind::MambaFusion, d_model, modalities, seed);
    let moe = FusionKernel::build(KernelKind::MoeMambaFusion, d_model, modalities, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_input(&mut rng, t_len * d_model);
    let ids = even_segments(t_len, modalities);
    let time = |k: &FusionKernel| {
        let start = Instant::now();
        drop(std::hint::black_box(k.forward(&x, &ids)));
        start.elapsed().as_secs_f64()
    };
    time(&vanilla);
    time(&moe);
    let (mut tv, mut tm) = (Vec::with_capacity(trials), Vec::with_capacity(trials));
    for _ in 0..trials {
        tv.push(time(&vanilla));
        tm.push(time(&moe));
    }
    analysis::median(&mut tm) / analysis::median(&mut tv) - 1.0
}
