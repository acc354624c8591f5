//! Open-set few-shot classification of hyperspectral image pixels with
//! unknown-class discovery.
//!
//! The library trains a spectral-spatial embedding network with a class-anchor
//! open-set head (known-class classification plus rejection) and a trainable
//! prototype head whose prototypes are grouped by Jaccard-similarity Louvain
//! clustering. Rejected samples are clustered into discovered unknown classes
//! via the prototype groups.
//!
//! Main pieces:
//! - [`dataset`]: on-disk cube container, patch extraction, band normalization
//! - [`sampler`]: episodic support/query sampling and weak/strong augmentation
//! - [`nn`]: the 3-D residual feature extractor with manual backprop
//! - [`anchors`]: class-anchor losses and nearest-anchor classification
//! - [`prototypes`]: prototype assignments, contrastive losses, grouping
//! - [`louvain`]: modularity-based community detection over prototypes
//! - [`assignment`]: exact linear-sum assignment (Hungarian)
//! - [`train`]: pre-training and episodic training loops
//! - [`eval`]: prediction, the three accuracy metrics, map rendering
//! - [`synth`]: deterministic synthetic cube generator for desk-scale runs

pub mod anchors;
pub mod assignment;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod louvain;
pub mod nn;
pub mod npy;
pub mod prototypes;
pub mod render;
pub mod sampler;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

use ndarray::LinalgScalar;
use ndarray::ScalarOperand;

/// Element type for all tensor math. Training normally runs in `f32`;
/// the numerical test suites instantiate `f64`.
pub trait Real:
    num_traits::Float
    + LinalgScalar
    + ScalarOperand
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
}

/// Scalar width tag used by checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(x: f32) -> Self {
        x
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(x: f32) -> Self {
        x as f64
    }
}
