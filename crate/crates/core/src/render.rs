//! Color handling for classification maps: a fixed palette for dataset
//! classes, reserved distinct colors for discovered clusters, and PNG
//! output.

use std::path::Path;

use crate::{Error, Result};

/// Unlabeled pixels render black.
pub const BACKGROUND: [u8; 3] = [0, 0, 0];

const BASE_PALETTE: [[u8; 3]; 20] = [
    [70, 130, 180],
    [255, 127, 80],
    [60, 179, 113],
    [218, 112, 214],
    [255, 215, 0],
    [100, 149, 237],
    [205, 92, 92],
    [144, 238, 144],
    [186, 85, 211],
    [244, 164, 96],
    [32, 178, 170],
    [255, 105, 180],
    [128, 128, 0],
    [0, 191, 255],
    [210, 105, 30],
    [154, 205, 50],
    [138, 43, 226],
    [250, 128, 114],
    [0, 139, 139],
    [255, 99, 71],
];

/// Colors for dataset classes 1..=n (index class-1). Beyond the base table
/// the palette extends with hue-rotated colors that stay distinct.
pub fn class_palette(n: usize) -> Vec<[u8; 3]> {
    let mut colors: Vec<[u8; 3]> = BASE_PALETTE.iter().take(n).copied().collect();
    if n > colors.len() {
        let extra = distinct_colors(n - colors.len(), &colors);
        colors.extend(extra);
    }
    colors
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

fn too_close(a: [u8; 3], b: [u8; 3]) -> bool {
    a.iter()
        .zip(&b)
        .map(|(&x, &y)| (x as i32 - y as i32).abs())
        .max()
        .unwrap_or(0)
        < 24
}

/// Deterministically generate `n` colors, pairwise distinct and distinct
/// from everything in `avoid` (and from the background). Uses golden-angle
/// hue steps with brightness alternation, nudging the hue on collision.
pub fn distinct_colors(n: usize, avoid: &[[u8; 3]]) -> Vec<[u8; 3]> {
    let mut taken: Vec<[u8; 3]> = avoid.to_vec();
    taken.push(BACKGROUND);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut hue = (i as f64) * 137.508;
        let value = if i % 2 == 0 { 1.0 } else { 0.62 };
        let mut color = hsv_to_rgb(hue, 0.95, value);
        let mut tries = 0;
        while taken.iter().any(|&t| too_close(color, t)) {
            hue += 7.0;
            tries += 1;
            // Widen the search if one brightness ring is saturated.
            let v = if tries > 60 { 0.8 } else { value };
            color = hsv_to_rgb(hue, 0.95, v);
            assert!(tries < 200, "color space exhausted");
        }
        taken.push(color);
        out.push(color);
    }
    out
}

/// Write an RGB image as PNG.
pub fn save_png(image: &image::RgbImage, path: &Path) -> Result<()> {
    image
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn base_palette_is_distinct_and_nonblack() {
        let colors = class_palette(20);
        let set: BTreeSet<[u8; 3]> = colors.iter().copied().collect();
        assert_eq!(set.len(), 20);
        assert!(!set.contains(&BACKGROUND));
    }

    #[test]
    fn extended_palette_stays_distinct() {
        let colors = class_palette(40);
        let set: BTreeSet<[u8; 3]> = colors.iter().copied().collect();
        assert_eq!(set.len(), 40);
    }

    #[test]
    fn cluster_colors_avoid_class_colors() {
        let classes = class_palette(16);
        let clusters = distinct_colors(35, &classes);
        assert_eq!(clusters.len(), 35);
        let mut all: Vec<[u8; 3]> = classes.clone();
        all.extend(&clusters);
        let set: BTreeSet<[u8; 3]> = all.iter().copied().collect();
        assert_eq!(set.len(), all.len());
        // Reserved colors are not merely unequal: they keep a margin from
        // every class color.
        for c in &clusters {
            for k in &classes {
                assert!(!too_close(*c, *k));
            }
        }
    }

    #[test]
    fn hsv_conversion_hits_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [255, 0, 0]);
        assert_eq!(hsv_to_rgb(120.0, 1.0, 1.0), [0, 255, 0]);
        assert_eq!(hsv_to_rgb(240.0, 1.0, 1.0), [0, 0, 255]);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = distinct_colors(10, &[]);
        let b = distinct_colors(10, &[]);
        assert_eq!(a, b);
    }
}
