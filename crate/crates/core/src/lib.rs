//! Multimodal sequence fusion built on selective state-space layers.
//!
//! Unimodal token sequences are encoded by per-modality Mamba stacks,
//! regularized toward an anchor modality with an entropic optimal-transport
//! distance and a Gaussian-kernel MMD, concatenated, and fused by
//! modality-aware Mamba layers whose input and output projections are
//! deterministically routed mixtures of experts.
//!
//! | module | contents |
//! |--------|----------|
//! | [`tensor`] | dense tensors and the reverse-mode tape |
//! | [`ssm`] | discretization, sequential/parallel scans, Mamba layer |
//! | [`align`] | cosine cost, log-domain Sinkhorn, MMD, alignment loss |
//! | [`moe`] | modality-routed expert projections and the fusion layer |
//! | [`model`] | end-to-end model, objective, trainer, checkpoints |
//! | [`data`] | synthetic multimodal data and the MAT1 tensor format |
//! | [`bench`] | linear-vs-quadratic fusion benchmarks |

pub mod align;
pub mod bench;
pub mod data;
pub mod mem;
pub mod model;
pub mod moe;
pub mod params;
pub mod ssm;
pub mod tensor;

#[cfg(test)]
#[global_allocator]
static ALLOC: mem::CountingAllocator = mem::CountingAllocator;
