//! Hyperspectral scene container: load/save, patch extraction, band
//! normalization, and known/unknown class splits.
//!
//! On-disk format is a directory with `manifest.json`, `data.bin`
//! (little-endian f32, row-major over (row, col, band)) and `labels.bin`
//! (little-endian i16, row-major). Label 0 is unlabeled background; class
//! ids are 1-based.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A hyperspectral scene: H×W×B reflectance plus an H×W label map.
#[derive(Clone, Debug)]
pub struct HsiCube {
    pub name: String,
    /// (row, col, band)
    pub data: Array3<f32>,
    /// 0 = unlabeled background, 1..=C = class ids.
    pub labels: Array2<u16>,
    pub class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    name: String,
    height: usize,
    width: usize,
    bands: usize,
    dtype: String,
    label_dtype: String,
    class_names: Vec<String>,
}

impl HsiCube {
    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn bands(&self) -> usize {
        self.data.shape()[2]
    }

    /// Number of classes C (label values run 0..=C).
    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let lshape = self.labels.shape();
        if lshape != [h, w] {
            return Err(Error::ShapeMismatch {
                context: format!("labels of cube '{}'", self.name),
                expected: format!("{}x{}", h, w),
                actual: format!("{}x{}", lshape[0], lshape[1]),
            });
        }
        let c = self.class_count();
        for ((row, col), &label) in self.labels.indexed_iter() {
            if usize::from(label) > c {
                return Err(Error::LabelOutOfRange {
                    label: i64::from(label),
                    max: c,
                    row,
                    col,
                });
            }
        }
        if let Some(((row, col, band), _)) =
            self.data.indexed_iter().find(|(_, v)| !v.is_finite())
        {
            return Err(Error::NonFinite {
                context: format!(
                    "cube '{}' at (row {}, col {}, band {})",
                    self.name, row, col, band
                ),
            });
        }
        Ok(())
    }

    /// All labeled pixel coordinates, row-major order.
    pub fn labeled_pixels(&self) -> Vec<(usize, usize)> {
        self.labels
            .indexed_iter()
            .filter(|(_, &l)| l != 0)
            .map(|((r, c), _)| (r, c))
            .collect()
    }

    /// Labeled pixel coordinates of one class, row-major order.
    pub fn pixels_of_class(&self, class: u16) -> Vec<(usize, usize)> {
        self.labels
            .indexed_iter()
            .filter(|(_, &l)| l == class)
            .map(|((r, c), _)| (r, c))
            .collect()
    }
}

/// A P×P×B spatial-spectral patch centered on a labeled pixel.
#[derive(Clone, Debug)]
pub struct Patch {
    /// (row, col, band)
    pub values: Array3<f32>,
    pub center: (usize, usize),
    /// 0 means "no label".
    pub label: u16,
}

impl Patch {
    pub fn size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn bands(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Which class ids are treated as known vs unknown.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub known_ids: Vec<u16>,
    pub unknown_ids: Vec<u16>,
}

impl ClassSplit {
    pub fn new(known_ids: Vec<u16>, unknown_ids: Vec<u16>) -> Result<Self> {
        let split = ClassSplit {
            known_ids,
            unknown_ids,
        };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        if self.known_ids.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 known classes, got {}",
                self.known_ids.len()
            )));
        }
        if self.unknown_ids.is_empty() {
            return Err(Error::InvalidConfig(
                "need at least 1 unknown class".into(),
            ));
        }
        for id in self.known_ids.iter().chain(&self.unknown_ids) {
            if *id == 0 {
                return Err(Error::InvalidConfig(
                    "class id 0 is reserved for background".into(),
                ));
            }
        }
        for k in &self.known_ids {
            if self.unknown_ids.contains(k) {
                return Err(Error::InvalidConfig(format!(
                    "class {} listed as both known and unknown",
                    k
                )));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in self.known_ids.iter().chain(&self.unknown_ids) {
            if !seen.insert(*id) {
                return Err(Error::InvalidConfig(format!("duplicate class id {}", id)));
            }
        }
        Ok(())
    }

    /// Logit-space dimensionality: one anchor per known class plus the
    /// shared unknown anchor.
    pub fn n_logits(&self) -> usize {
        self.known_ids.len() + 1
    }

    /// Index of the unknown anchor (last row).
    pub fn unknown_anchor_index(&self) -> usize {
        self.known_ids.len()
    }

    /// Anchor index for a class id: position within `known_ids` for known
    /// classes, the unknown anchor index for unknown classes.
    pub fn anchor_index(&self, class: u16) -> Option<usize> {
        if let Some(pos) = self.known_ids.iter().position(|&k| k == class) {
            Some(pos)
        } else if self.unknown_ids.contains(&class) {
            Some(self.unknown_anchor_index())
        } else {
            None
        }
    }

    pub fn is_known(&self, class: u16) -> bool {
        self.known_ids.contains(&class)
    }
}

/// Load a cube from its container directory. Non-finite data values are an
/// error unless `impute_nan` is set, in which case they are replaced by the
/// mean of the finite values of the same band.
pub fn load_cube(dir: &Path, impute_nan: bool) -> Result<HsiCube> {
    let manifest_path = dir.join("manifest.json");
    let raw = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&raw).map_err(|e| Error::Manifest {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.dtype != "float32" {
        return Err(Error::Manifest {
            path: manifest_path.clone(),
            reason: format!("unsupported dtype '{}'", manifest.dtype),
        });
    }
    if manifest.label_dtype != "int16" {
        return Err(Error::Manifest {
            path: manifest_path.clone(),
            reason: format!("unsupported label_dtype '{}'", manifest.label_dtype),
        });
    }
    let (h, w, b) = (manifest.height, manifest.width, manifest.bands);

    let data_path = dir.join("data.bin");
    let data_bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let expected = h * w * b * 4;
    if data_bytes.len() != expected {
        return Err(Error::ShapeMismatch {
            context: format!("{}", data_path.display()),
            expected: format!("{} bytes ({}x{}x{} f32)", expected, h, w, b),
            actual: format!("{} bytes", data_bytes.len()),
        });
    }
    let floats: Vec<f32> = data_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut data = Array3::from_shape_vec((h, w, b), floats).expect("shape checked above");

    let labels_path = dir.join("labels.bin");
    let label_bytes = fs::read(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let expected = h * w * 2;
    if label_bytes.len() != expected {
        return Err(Error::ShapeMismatch {
            context: format!("{}", labels_path.display()),
            expected: format!("{} bytes ({}x{} i16)", expected, h, w),
            actual: format!("{} bytes", label_bytes.len()),
        });
    }
    let mut labels = Array2::<u16>::zeros((h, w));
    let c = manifest.class_names.len();
    for (idx, chunk) in label_bytes.chunks_exact(2).enumerate() {
        let v = i16::from_le_bytes([chunk[0], chunk[1]]);
        let (row, col) = (idx / w, idx % w);
        if v < 0 || v as usize > c {
            return Err(Error::LabelOutOfRange {
                label: i64::from(v),
                max: c,
                row,
                col,
            });
        }
        labels[[row, col]] = v as u16;
    }

    if impute_nan {
        impute_band_means(&mut data);
    }

    let cube = HsiCube {
        name: manifest.name,
        data,
        labels,
        class_names: manifest.class_names,
    };
    cube.validate()?;
    Ok(cube)
}

/// Write a cube to the container directory (bit-exact round trip).
pub fn save_cube(cube: &HsiCube, dir: &Path) -> Result<()> {
    cube.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        name: cube.name.clone(),
        height: cube.height(),
        width: cube.width(),
        bands: cube.bands(),
        dtype: "float32".into(),
        label_dtype: "int16".into(),
        class_names: cube.class_names.clone(),
    };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;

    let data_path = dir.join("data.bin");
    let mut out = Vec::with_capacity(cube.data.len() * 4);
    for v in cube.data.iter() {
        out.write_all(&v.to_le_bytes()).expect("vec write");
    }
    fs::write(&data_path, out).map_err(|e| Error::io(&data_path, e))?;

    let labels_path = dir.join("labels.bin");
    let mut out = Vec::with_capacity(cube.labels.len() * 2);
    for v in cube.labels.iter() {
        out.write_all(&(*v as i16).to_le_bytes()).expect("vec write");
    }
    fs::write(&labels_path, out).map_err(|e| Error::io(&labels_path, e))?;
    Ok(())
}

fn impute_band_means(data: &mut Array3<f32>) {
    let bands = data.shape()[2];
    for band in 0..bands {
        let mut lane = data.index_axis_mut(Axis(2), band);
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for v in lane.iter() {
            if v.is_finite() {
                sum += *v as f64;
                count += 1;
            }
        }
        let mean = if count > 0 { (sum / count as f64) as f32 } else { 0.0 };
        for v in lane.iter_mut() {
            if !v.is_finite() {
                *v = mean;
            }
        }
    }
}

/// Mirror-reflect an out-of-range index about the array edges
/// (reflection about the edge pixel, no edge duplication).
fn mirror_index(mut i: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Extract the P×P×B patch centered at `center`; positions outside the cube
/// are mirror-padded. The patch label is the center pixel's label.
pub fn extract_patch(cube: &HsiCube, center: (usize, usize), p: usize) -> Result<Patch> {
    if p % 2 == 0 || p == 0 {
        return Err(Error::InvalidConfig(format!(
            "patch size must be odd and positive, got {}",
            p
        )));
    }
    let (h, w, b) = (cube.height(), cube.width(), cube.bands());
    let (cr, cc) = center;
    if cr >= h || cc >= w {
        return Err(Error::InvalidConfig(format!(
            "patch center ({}, {}) outside {}x{} cube",
            cr, cc, h, w
        )));
    }
    let half = (p / 2) as isize;
    let mut values = Array3::<f32>::zeros((p, p, b));
    for dr in -half..=half {
        let src_r = mirror_index(cr as isize + dr, h);
        for dc in -half..=half {
            let src_c = mirror_index(cc as isize + dc, w);
            let dst = (
                (dr + half) as usize,
                (dc + half) as usize,
            );
            values
                .slice_mut(ndarray::s![dst.0, dst.1, ..])
                .assign(&cube.data.slice(ndarray::s![src_r, src_c, ..]));
        }
    }
    Ok(Patch {
        values,
        center,
        label: cube.labels[[cr, cc]],
    })
}

/// Per-band z-score over labeled pixels (falls back to all pixels when the
/// cube has no labels at all). Zero-variance bands map to all-zero.
pub fn band_normalize(cube: &HsiCube) -> HsiCube {
    let mut out = cube.clone();
    let labeled: Vec<(usize, usize)> = cube.labeled_pixels();
    let use_all = labeled.is_empty();
    let bands = cube.bands();
    for band in 0..bands {
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        let mut n = 0usize;
        if use_all {
            for v in cube.data.index_axis(Axis(2), band).iter() {
                sum += *v as f64;
                sq += (*v as f64) * (*v as f64);
                n += 1;
            }
        } else {
            for &(r, c) in &labeled {
                let v = cube.data[[r, c, band]] as f64;
                sum += v;
                sq += v * v;
                n += 1;
            }
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        let std = var.sqrt();
        let mut lane = out.data.index_axis_mut(Axis(2), band);
        if std < 1e-12 {
            lane.fill(0.0);
        } else {
            let (m, s) = (mean as f32, std as f32);
            lane.mapv_inplace(|v| (v - m) / s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;

    fn toy_cube(h: usize, w: usize, b: usize) -> HsiCube {
        let data = Array3::from_shape_fn((h, w, b), |(r, c, k)| {
            (r * 100 + c * 10 + k) as f32
        });
        let mut labels = Array2::<u16>::zeros((h, w));
        for ((r, c), l) in labels.indexed_iter_mut() {
            *l = ((r + c) % 3) as u16; // labels 0..2
        }
        HsiCube {
            name: "toy".into(),
            data,
            labels,
            class_names: vec!["a".into(), "b".into()],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cube = toy_cube(7, 5, 4);
        let dir = tempfile::tempdir().unwrap();
        save_cube(&cube, dir.path()).unwrap();
        let back = load_cube(dir.path(), false).unwrap();
        assert_eq!(cube.name, back.name);
        assert_eq!(cube.class_names, back.class_names);
        assert_eq!(cube.labels, back.labels);
        assert!(cube
            .data
            .iter()
            .zip(back.data.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn degenerate_all_background_cube_is_legal() {
        let mut cube = toy_cube(2, 2, 3);
        cube.labels.fill(0);
        let dir = tempfile::tempdir().unwrap();
        save_cube(&cube, dir.path()).unwrap();
        let back = load_cube(dir.path(), false).unwrap();
        assert_eq!(back.labeled_pixels().len(), 0);
        assert_eq!(back.height(), 2);
        assert_eq!(back.bands(), 3);
    }

    #[test]
    fn label_shape_mismatch_is_rejected() {
        let cube = toy_cube(4, 4, 2);
        let dir = tempfile::tempdir().unwrap();
        save_cube(&cube, dir.path()).unwrap();
        // Truncate labels.bin by one row.
        let labels_path = dir.path().join("labels.bin");
        let bytes = fs::read(&labels_path).unwrap();
        fs::write(&labels_path, &bytes[..bytes.len() - 4 * 2]).unwrap();
        let err = load_cube(dir.path(), false).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut cube = toy_cube(3, 3, 2);
        cube.labels[[1, 1]] = 9;
        assert!(matches!(
            cube.validate(),
            Err(Error::LabelOutOfRange { label: 9, .. })
        ));
    }

    #[test]
    fn non_finite_data_is_rejected_unless_imputed() {
        let mut cube = toy_cube(3, 3, 2);
        cube.data[[0, 1, 1]] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        // save_cube validates, so write the broken cube manually.
        let ok = toy_cube(3, 3, 2);
        save_cube(&ok, dir.path()).unwrap();
        let data_path = dir.path().join("data.bin");
        let mut bytes = fs::read(&data_path).unwrap();
        let idx = (0 * 3 * 2 + 1 * 2 + 1) * 4;
        bytes[idx..idx + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&data_path, &bytes).unwrap();

        assert!(matches!(
            load_cube(dir.path(), false),
            Err(Error::NonFinite { .. })
        ));
        let fixed = load_cube(dir.path(), true).unwrap();
        assert!(fixed.data.iter().all(|v| v.is_finite()));
        // Imputed with the band mean of the remaining finite values.
        let band: Vec<f64> = ok
            .data
            .index_axis(Axis(2), 1)
            .indexed_iter()
            .filter(|((r, c), _)| !(*r == 0 && *c == 1))
            .map(|(_, v)| *v as f64)
            .collect();
        let mean = band.iter().sum::<f64>() / band.len() as f64;
        assert!((fixed.data[[0, 1, 1]] as f64 - mean).abs() < 1e-4);
    }

    #[test]
    fn interior_patch_is_exact_window() {
        let cube = toy_cube(20, 20, 3);
        let p = extract_patch(&cube, (10, 10), 9).unwrap();
        let window = cube.data.slice(s![6..15, 6..15, ..]);
        assert_eq!(p.values, window.to_owned());
        assert_eq!(p.label, cube.labels[[10, 10]]);
    }

    #[test]
    fn corner_patch_mirrors_and_keeps_center() {
        let cube = toy_cube(12, 12, 2);
        let p = extract_patch(&cube, (0, 0), 9).unwrap();
        assert_eq!(
            p.values.slice(s![4, 4, ..]).to_owned(),
            cube.data.slice(s![0, 0, ..]).to_owned()
        );
        // Mirror about the edge pixel: offset -1 reflects to +1.
        assert_eq!(
            p.values.slice(s![3, 4, ..]).to_owned(),
            cube.data.slice(s![1, 0, ..]).to_owned()
        );
        assert_eq!(
            p.values.slice(s![0, 4, ..]).to_owned(),
            cube.data.slice(s![4, 0, ..]).to_owned()
        );
    }

    #[test]
    fn constant_cube_gives_constant_patches() {
        let mut cube = toy_cube(6, 6, 2);
        cube.data.fill(3.0);
        let p = extract_patch(&cube, (0, 5), 5).unwrap();
        assert!(p.values.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn even_patch_size_is_rejected() {
        let cube = toy_cube(6, 6, 2);
        assert!(extract_patch(&cube, (1, 1), 8).is_err());
        assert!(extract_patch(&cube, (9, 1), 5).is_err());
    }

    #[test]
    fn two_point_band_standardizes_to_unit() {
        // One band, two labeled pixels valued 1 and 3.
        let mut data = Array3::<f32>::zeros((1, 2, 1));
        data[[0, 0, 0]] = 1.0;
        data[[0, 1, 0]] = 3.0;
        let mut labels = Array2::<u16>::zeros((1, 2));
        labels[[0, 0]] = 1;
        labels[[0, 1]] = 1;
        let cube = HsiCube {
            name: "two".into(),
            data,
            labels,
            class_names: vec!["a".into()],
        };
        let norm = band_normalize(&cube);
        assert!((norm.data[[0, 0, 0]] - (-1.0)).abs() < 1e-6);
        assert!((norm.data[[0, 1, 0]] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_band_maps_to_zero() {
        let mut cube = toy_cube(4, 4, 2);
        cube.data.index_axis_mut(Axis(2), 0).fill(7.5);
        let norm = band_normalize(&cube);
        assert!(norm
            .data
            .index_axis(Axis(2), 0)
            .iter()
            .all(|&v| v == 0.0));
        // The other band is untouched by the constant rule.
        assert!(norm
            .data
            .index_axis(Axis(2), 1)
            .iter()
            .any(|&v| v != 0.0));
    }

    #[test]
    fn normalization_is_idempotent() {
        let cube = toy_cube(10, 10, 4);
        let once = band_normalize(&cube);
        let twice = band_normalize(&once);
        for (a, b) in once.data.iter().zip(twice.data.iter()) {
            assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn split_validation() {
        assert!(ClassSplit::new(vec![1, 2], vec![3]).is_ok());
        assert!(ClassSplit::new(vec![1], vec![2]).is_err());
        assert!(ClassSplit::new(vec![1, 2], vec![]).is_err());
        assert!(ClassSplit::new(vec![1, 2], vec![2]).is_err());
        assert!(ClassSplit::new(vec![1, 2, 2], vec![3]).is_err());
        assert!(ClassSplit::new(vec![0, 1], vec![2]).is_err());

        let s = ClassSplit::new(vec![4, 2, 7], vec![1, 3]).unwrap();
        assert_eq!(s.n_logits(), 4);
        assert_eq!(s.anchor_index(4), Some(0));
        assert_eq!(s.anchor_index(2), Some(1));
        assert_eq!(s.anchor_index(1), Some(3));
        assert_eq!(s.anchor_index(3), Some(3));
        assert_eq!(s.anchor_index(9), None);
    }
}
