//! Synthetic hyperspectral scenes for benchmarks and integration tests:
//! Voronoi-blob spatial layout, smooth per-class spectral signatures with a
//! guaranteed separation margin, and additive Gaussian noise — all
//! deterministic in the seed.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassSplit, HsiCube};
use crate::{Error, Result};

/// Minimum labeled pixels per class; site layouts that starve a class below
/// this are resampled.
const MIN_CLASS_PIXELS: usize = 128;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub n_classes: usize,
    /// Voronoi sites per class; more sites → smaller, more scattered blobs.
    pub sites_per_class: usize,
    /// Per-band additive noise standard deviation.
    pub noise_sigma: f64,
    /// Required pairwise signature distance, in units of σ.
    pub min_separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            height: 64,
            width: 64,
            bands: 20,
            n_classes: 8,
            sites_per_class: 4,
            noise_sigma: 0.05,
            min_separation: 4.0,
            seed: 7,
        }
    }
}

pub struct SyntheticData {
    pub cube: HsiCube,
    /// Noise-free class signatures, one row per class, [n_classes, bands].
    pub signatures: Array2<f64>,
}

/// Convenience split: the first `n_classes − n_unknown` class ids are known,
/// the rest unknown.
pub fn default_split(n_classes: usize, n_unknown: usize) -> Result<ClassSplit> {
    if n_unknown == 0 || n_unknown + 2 > n_classes {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 known and 1 unknown class, got {n_classes} total / {n_unknown} unknown"
        )));
    }
    let known: Vec<u16> = (1..=(n_classes - n_unknown) as u16).collect();
    let unknown: Vec<u16> = ((n_classes - n_unknown + 1) as u16..=n_classes as u16).collect();
    ClassSplit::new(known, unknown)
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.n_classes < 2 || spec.bands < 2 || spec.sites_per_class == 0 {
        return Err(Error::InvalidConfig(format!(
            "degenerate synthetic spec: {} classes, {} bands, {} sites/class",
            spec.n_classes, spec.bands, spec.sites_per_class
        )));
    }
    if spec.height * spec.width < spec.n_classes * MIN_CLASS_PIXELS {
        return Err(Error::InvalidConfig(format!(
            "{}x{} scene cannot give {} classes {} pixels each",
            spec.height, spec.width, spec.n_classes, MIN_CLASS_PIXELS
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let signatures = sample_signatures(spec, &mut rng)?;
    let labels = sample_layout(spec, &mut rng)?;

    let normal = Normal::new(0.0f64, spec.noise_sigma).map_err(|_| {
        Error::InvalidConfig(format!("bad noise sigma {}", spec.noise_sigma))
    })?;
    let mut data = Array3::<f32>::zeros((spec.height, spec.width, spec.bands));
    for y in 0..spec.height {
        for x in 0..spec.width {
            let class = labels[[y, x]] as usize - 1;
            for b in 0..spec.bands {
                data[[y, x, b]] = (signatures[[class, b]] + normal.sample(&mut rng)) as f32;
            }
        }
    }

    let cube = HsiCube {
        name: "synthetic".into(),
        data,
        labels,
        class_names: (1..=spec.n_classes).map(|c| format!("class_{c}")).collect(),
    };
    cube.validate()?;
    Ok(SyntheticData { cube, signatures })
}

/// Smooth signatures: a class-specific primary Gaussian bump spread across
/// the spectrum, a random secondary bump, a ramp, and an offset. Resampled
/// until every pair is at least `min_separation`·σ apart in L2 — with iid
/// per-band noise, the projection onto the line between two class means has
/// std exactly σ, so this is the usual k-sigma separation.
fn sample_signatures(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    let b = spec.bands;
    let c = spec.n_classes;
    let required = spec.min_separation * spec.noise_sigma;
    for _attempt in 0..200 {
        let mut sig = Array2::<f64>::zeros((c, b));
        for class in 0..c {
            let mu0 = (class as f64 + 0.5) / c as f64;
            let w0 = rng.gen_range(0.06..0.12);
            let mu1 = rng.gen_range(0.0..1.0);
            let w1 = rng.gen_range(0.08..0.2);
            let a1 = rng.gen_range(0.2..0.5);
            let ramp = rng.gen_range(-0.3..0.3);
            let offset = rng.gen_range(0.2..0.8);
            for band in 0..b {
                let t = band as f64 / (b - 1) as f64;
                let bump0 = (-((t - mu0) / w0).powi(2) / 2.0).exp();
                let bump1 = a1 * (-((t - mu1) / w1).powi(2) / 2.0).exp();
                sig[[class, band]] = bump0 + bump1 + ramp * t + offset;
            }
        }
        if min_pairwise_distance(&sig) >= required {
            return Ok(sig);
        }
    }
    Err(Error::InvalidConfig(format!(
        "could not construct {} signatures separated by {:.3} over {} bands",
        c, required, b
    )))
}

fn min_pairwise_distance(sig: &Array2<f64>) -> f64 {
    let mut min = f64::INFINITY;
    for i in 0..sig.nrows() {
        for j in (i + 1)..sig.nrows() {
            let d: f64 = sig
                .row(i)
                .iter()
                .zip(sig.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            min = min.min(d.sqrt());
        }
    }
    min
}

/// Nearest-site Voronoi labels (squared grid distance, ties to the lower
/// site index). Layouts leaving any class under MIN_CLASS_PIXELS are
/// resampled.
fn sample_layout(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Array2<u16>> {
    for _attempt in 0..64 {
        // Site order interleaves classes so early indices don't favor one.
        let mut sites: Vec<(usize, usize, u16)> = Vec::new();
        for _round in 0..spec.sites_per_class {
            for class in 0..spec.n_classes {
                let y = rng.gen_range(0..spec.height);
                let x = rng.gen_range(0..spec.width);
                sites.push((y, x, class as u16 + 1));
            }
        }
        let mut labels = Array2::<u16>::zeros((spec.height, spec.width));
        let mut counts = vec![0usize; spec.n_classes];
        for y in 0..spec.height {
            for x in 0..spec.width {
                let mut best = 0usize;
                let mut best_d = usize::MAX;
                for (s, &(sy, sx, _)) in sites.iter().enumerate() {
                    let dy = y.abs_diff(sy);
                    let dx = x.abs_diff(sx);
                    let d = dy * dy + dx * dx;
                    if d < best_d {
                        best_d = d;
                        best = s;
                    }
                }
                let label = sites[best].2;
                labels[[y, x]] = label;
                counts[label as usize - 1] += 1;
            }
        }
        if counts.iter().all(|&n| n >= MIN_CLASS_PIXELS) {
            return Ok(labels);
        }
    }
    Err(Error::InvalidConfig(format!(
        "could not place {} classes with at least {} pixels each on a {}x{} grid",
        spec.n_classes, MIN_CLASS_PIXELS, spec.height, spec.width
    )))
}
