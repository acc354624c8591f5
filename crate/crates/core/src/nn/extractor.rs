//! The spectral-spatial feature extractor: a 1×1 band-mixing convolution
//! followed by two residual 3-D convolution blocks with max pooling, a
//! final valid 3-D convolution, and a fully connected head mapping the
//! flattened embedding to logit space (one logit per known class plus one
//! for the shared unknown class).

use ndarray::{Array2, Array4, Array5};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BandConv, BatchNorm, Conv3d, Linear, MaxPool3d};
use super::{BufferVisitor, ParamVisitor};
use crate::dataset::Patch;
use crate::{Error, Real, Result};

/// Residual block: three (conv3d 3×3×3 same-pad → BN → ReLU) units with a
/// skip connection over the whole block. When the channel count changes,
/// the skip goes through a bias-free 1×1×1 projection. No activation is
/// applied after the addition.
pub struct ResidualBlock3d<T: Real> {
    convs: Vec<Conv3d<T>>,
    bns: Vec<BatchNorm<T>>,
    projection: Option<Conv3d<T>>,
}

impl<T: Real> ResidualBlock3d<T> {
    pub fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let chans = [cin, cout, cout, cout];
        let convs = (0..3)
            .map(|i| Conv3d::new(chans[i], chans[i + 1], 3, 1, true, rng))
            .collect();
        let bns = (0..3).map(|_| BatchNorm::new(cout, true)).collect();
        let projection =
            (cin != cout).then(|| Conv3d::new(cin, cout, 1, 0, false, rng));
        ResidualBlock3d {
            convs,
            bns,
            projection,
        }
    }

    pub fn forward(&mut self, x: Array5<T>, train: bool) -> Array5<T> {
        let skip = match &mut self.projection {
            Some(proj) => proj.forward(x.clone(), train),
            None => x.clone(),
        };
        let mut h = x;
        for (conv, bn) in self.convs.iter_mut().zip(&mut self.bns) {
            h = conv.forward(h, train);
            let (n, c, d, hh, w) = h.dim();
            let flat = bn.forward(
                h.into_shape((n, c, d * hh * w)).expect("contiguous"),
                train,
            );
            h = flat.into_shape((n, c, d, hh, w)).expect("contiguous");
        }
        h + skip
    }

    pub fn backward(&mut self, dout: Array5<T>) -> Array5<T> {
        let dskip = match &mut self.projection {
            Some(proj) => proj.backward(dout.clone()),
            None => dout.clone(),
        };
        let mut dh = dout;
        for (conv, bn) in self.convs.iter_mut().zip(&mut self.bns).rev() {
            let (n, c, d, hh, w) = dh.dim();
            let dflat = bn.backward(dh.into_shape((n, c, d * hh * w)).expect("contiguous"));
            dh = conv.backward(dflat.into_shape((n, c, d, hh, w)).expect("contiguous"));
        }
        dh + dskip
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamVisitor<T>) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.visit_params(&format!("{prefix}.conv{i}"), f);
        }
        for (i, bn) in self.bns.iter_mut().enumerate() {
            bn.visit_params(&format!("{prefix}.bn{i}"), f);
        }
        if let Some(proj) = &mut self.projection {
            proj.visit_params(&format!("{prefix}.proj"), f);
        }
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: BufferVisitor<T>) {
        for (i, bn) in self.bns.iter_mut().enumerate() {
            bn.visit_buffers(&format!("{prefix}.bn{i}"), f);
        }
    }
}

/// Architecture hyperparameters. The published geometry is
/// `reduced_bands=100, block_channels=(8,16), final_channels=32` on 9×9
/// patches, giving a 160-dimensional flattened embedding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub bands: usize,
    pub patch: usize,
    pub reduced_bands: usize,
    pub block_channels: (usize, usize),
    pub final_channels: usize,
    pub n_logits: usize,
}

impl ExtractorConfig {
    pub fn published(bands: usize, n_logits: usize) -> Self {
        ExtractorConfig {
            bands,
            patch: 9,
            reduced_bands: 100,
            block_channels: (8, 16),
            final_channels: 32,
            n_logits,
        }
    }

    /// Shapes after each stage; errors when pooling/valid convolution
    /// collapse a dimension to nothing.
    pub fn geometry(&self) -> Result<Geometry> {
        let ceil = super::ceil_div;
        let (d0, s0) = (self.reduced_bands, self.patch);
        let (d1, s1) = (ceil(d0, 4), ceil(s0, 2));
        let (d2, s2) = (ceil(d1, 4), ceil(s1, 2));
        if d2 < 3 || s2 < 3 {
            return Err(Error::InvalidConfig(format!(
                "volume {}x{}x{} after the second pool is too small for a valid 3x3x3 convolution",
                d2, s2, s2
            )));
        }
        let (d3, s3) = (d2 - 2, s2 - 2);
        Ok(Geometry {
            after_pool1: (d1, s1, s1),
            after_pool2: (d2, s2, s2),
            after_final: (d3, s3, s3),
            flat_dim: self.final_channels * d3 * s3 * s3,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub after_pool1: (usize, usize, usize),
    pub after_pool2: (usize, usize, usize),
    pub after_final: (usize, usize, usize),
    pub flat_dim: usize,
}

/// Convert patches (P, P, B) into a network batch [n, B, P, P].
pub fn patches_to_batch<T: Real>(patches: &[&Patch]) -> Array4<T> {
    let n = patches.len();
    if n == 0 {
        return Array4::zeros((0, 0, 0, 0));
    }
    let (p, _, b) = patches[0].values.dim();
    let mut batch = Array4::<T>::zeros((n, b, p, p));
    for (i, patch) in patches.iter().enumerate() {
        for ((r, c, k), &v) in patch.values.indexed_iter() {
            batch[[i, k, r, c]] = T::from_f32(v);
        }
    }
    batch
}

pub struct FeatureExtractor<T: Real> {
    pub config: ExtractorConfig,
    geometry: Geometry,
    band_conv: BandConv<T>,
    band_bn: BatchNorm<T>,
    block1: ResidualBlock3d<T>,
    pool1: MaxPool3d<T>,
    block2: ResidualBlock3d<T>,
    pool2: MaxPool3d<T>,
    final_conv: Conv3d<T>,
    final_bn: BatchNorm<T>,
    fc: Linear<T>,
    flat_cache: Option<(usize, usize, usize, usize, usize)>,
}

impl<T: Real> FeatureExtractor<T> {
    pub fn new(config: ExtractorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let geometry = config.geometry()?;
        let (ch1, ch2) = config.block_channels;
        Ok(FeatureExtractor {
            band_conv: BandConv::new(config.bands, config.reduced_bands, rng),
            band_bn: BatchNorm::new(config.reduced_bands, true),
            block1: ResidualBlock3d::new(1, ch1, rng),
            pool1: MaxPool3d::new((4, 2, 2)),
            block2: ResidualBlock3d::new(ch1, ch2, rng),
            pool2: MaxPool3d::new((4, 2, 2)),
            final_conv: Conv3d::new(ch2, config.final_channels, 3, 0, true, rng),
            final_bn: BatchNorm::new(config.final_channels, true),
            fc: Linear::new(geometry.flat_dim, config.n_logits, rng),
            geometry,
            config,
            flat_cache: None,
        })
    }

    /// Dimensionality of the flattened (penultimate) embedding.
    pub fn penult_dim(&self) -> usize {
        self.geometry.flat_dim
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    /// Forward pass on [n, B, P, P]; returns (penultimate [n, F],
    /// logits [n, N]). Training mode caches activations for backward and
    /// updates batch-norm running statistics.
    pub fn forward(&mut self, x: Array4<T>, train: bool) -> (Array2<T>, Array2<T>) {
        let n = x.dim().0;
        let reduced = self.band_conv.forward(x, train);
        let (_, r, p, q) = reduced.dim();
        let reduced = self
            .band_bn
            .forward(reduced.into_shape((n, r, p * q)).expect("contiguous"), train)
            .into_shape((n, 1, r, p, q))
            .expect("contiguous");

        let h = self.block1.forward(reduced, train);
        let h = self.pool1.forward(h, train);
        let h = self.block2.forward(h, train);
        let h = self.pool2.forward(h, train);
        let h = self.final_conv.forward(h, train);
        let (nn, c, d, hh, w) = h.dim();
        let h = self
            .final_bn
            .forward(h.into_shape((nn, c, d * hh * w)).expect("contiguous"), train);
        if train {
            self.flat_cache = Some((nn, c, d, hh, w));
        }
        let penult = h.into_shape((nn, c * d * hh * w)).expect("contiguous");
        let logits = self.fc.forward(penult.clone(), train);
        (penult, logits)
    }

    /// Backward pass accumulating parameter gradients. `d_penult` and
    /// `d_logits` are the loss gradients w.r.t. the two forward outputs.
    pub fn backward(&mut self, d_penult: Array2<T>, d_logits: Array2<T>) {
        let (n, c, d, hh, w) = self.flat_cache.take().expect("backward without forward");
        let d_flat = self.fc.backward(d_logits) + d_penult;
        let dh = self
            .final_bn
            .backward(d_flat.into_shape((n, c, d * hh * w)).expect("contiguous"));
        let dh = self
            .final_conv
            .backward(dh.into_shape((n, c, d, hh, w)).expect("contiguous"));
        let dh = self.pool2.backward(dh);
        let dh = self.block2.backward(dh);
        let dh = self.pool1.backward(dh);
        let dh = self.block1.backward(dh);
        let (_, _, r, p, q) = dh.dim();
        let dreduced = self
            .band_bn
            .backward(dh.into_shape((n, r, p * q)).expect("contiguous"));
        let _ = self
            .band_conv
            .backward(dreduced.into_shape((n, r, p, q)).expect("contiguous"));
    }

    pub fn visit_params(&mut self, f: ParamVisitor<T>) {
        self.band_conv.visit_params("band_conv", f);
        self.band_bn.visit_params("band_bn", f);
        self.block1.visit_params("block1", f);
        self.block2.visit_params("block2", f);
        self.final_conv.visit_params("final_conv", f);
        self.final_bn.visit_params("final_bn", f);
        self.fc.visit_params("fc", f);
    }

    pub fn visit_buffers(&mut self, f: BufferVisitor<T>) {
        self.band_bn.visit_buffers("band_bn", f);
        self.block1.visit_buffers("block1", f);
        self.block2.visit_buffers("block2", f);
        self.final_bn.visit_buffers("final_bn", f);
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, _, grad| {
            grad.iter_mut().for_each(|g| *g = T::zero());
        });
    }

    pub fn count_parameters(&mut self) -> usize {
        let mut total = 0usize;
        self.visit_params(&mut |_, param, _| total += param.len());
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn published_geometry_flattens_to_160() {
        for bands in [200usize, 103, 204, 274, 20] {
            let cfg = ExtractorConfig::published(bands, 12);
            let geo = cfg.geometry().unwrap();
            assert_eq!(geo.after_pool1, (25, 5, 5));
            assert_eq!(geo.after_pool2, (7, 3, 3));
            assert_eq!(geo.after_final, (5, 1, 1));
            assert_eq!(geo.flat_dim, 160, "bands={}", bands);
        }
    }

    #[test]
    fn forward_shapes_match_geometry() {
        let cfg = ExtractorConfig {
            bands: 20,
            patch: 9,
            reduced_bands: 36,
            block_channels: (4, 8),
            final_channels: 16,
            n_logits: 6,
        };
        let geo = cfg.geometry().unwrap();
        assert_eq!(geo.flat_dim, 16); // 36→9→3→1 spectral, 9→5→3→1 spatial
        let mut net = FeatureExtractor::<f32>::new(cfg, &mut rng()).unwrap();
        let x = Array4::<f32>::ones((3, 20, 9, 9));
        let (penult, logits) = net.forward(x, false);
        assert_eq!(penult.dim(), (3, 16));
        assert_eq!(logits.dim(), (3, 6));
        assert!(penult.iter().all(|v| v.is_finite()));
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn too_small_volume_is_rejected() {
        let cfg = ExtractorConfig {
            bands: 20,
            patch: 9,
            reduced_bands: 32, // 32→8→2 < 3 in the spectral axis
            block_channels: (4, 8),
            final_channels: 16,
            n_logits: 6,
        };
        assert!(cfg.geometry().is_err());
        assert!(FeatureExtractor::<f32>::new(cfg, &mut rng()).is_err());
    }

    #[test]
    fn published_ip_parameter_count() {
        // 200 input bands, 11 known classes + 1 unknown anchor.
        let cfg = ExtractorConfig::published(200, 12);
        let mut net = FeatureExtractor::<f32>::new(cfg, &mut rng()).unwrap();
        assert_eq!(net.count_parameters(), 57_456);
    }

    #[test]
    fn parameter_names_are_unique() {
        let cfg = ExtractorConfig {
            bands: 8,
            patch: 9,
            reduced_bands: 36,
            block_channels: (2, 3),
            final_channels: 4,
            n_logits: 4,
        };
        let mut net = FeatureExtractor::<f64>::new(cfg, &mut rng()).unwrap();
        let mut names = Vec::new();
        net.visit_params(&mut |name, _, _| names.push(name.to_string()));
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        let mut buffers = Vec::new();
        net.visit_buffers(&mut |name, _| buffers.push(name.to_string()));
        assert!(buffers.iter().all(|b| !names.contains(b)));
    }

    #[test]
    fn patch_batch_transposes_band_axis() {
        let values = ndarray::Array3::from_shape_fn((3, 3, 2), |(r, c, k)| {
            (r * 10 + c + k * 100) as f32
        });
        let patch = Patch {
            values,
            center: (1, 1),
            label: 2,
        };
        let batch = patches_to_batch::<f64>(&[&patch]);
        assert_eq!(batch.dim(), (1, 2, 3, 3));
        assert_eq!(batch[[0, 0, 2, 1]], 21.0);
        assert_eq!(batch[[0, 1, 0, 2]], 102.0);
    }
}
