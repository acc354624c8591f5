//! Hand-rolled neural network layers with explicit forward/backward passes
//! on `ndarray` tensors. Convolutions lower to per-sample im2col + GEMM;
//! everything is single-threaded and deterministic.
//!
//! Parameters and their gradient accumulators are exposed through a visitor
//! (`visit_params`) so optimizers and checkpoints can enumerate them by name
//! without the layers knowing either exists.

pub mod extractor;
pub mod layers;

pub use extractor::{patches_to_batch, ExtractorConfig, FeatureExtractor};

use crate::Real;

/// Visitor over (name, parameter values, gradient accumulator).
pub type ParamVisitor<'a, 'b, T> = &'a mut dyn FnMut(&str, &mut [T], &mut [T]);

/// Visitor over (name, buffer values) — running statistics and other
/// non-trained state that still belongs in checkpoints.
pub type BufferVisitor<'a, 'b, T> = &'a mut dyn FnMut(&str, &mut [T]);

pub(crate) fn ceil_div(a: usize, b: usize) -> usize {
    (a + b - 1) / b
}

/// He-normal initialization: std = sqrt(2 / fan_in). Values are drawn in
/// f64 and narrowed so that f32 and f64 models start from the same weights.
pub(crate) fn he_normal<T: Real>(
    n: usize,
    fan_in: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<T> {
    use rand_distr::Distribution;
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = rand_distr::Normal::new(0.0f64, std).expect("std > 0");
    (0..n).map(|_| T::from_f64(normal.sample(rng))).collect()
}
