//! Test-time path: nearest-anchor prediction with rejection, routing of
//! rejected samples to discovered prototype groups, the three accuracy
//! metrics (known / unknown / all), classification-map rendering, and raw
//! embedding export.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::s;
use serde::Serialize;

use crate::anchors;
use crate::assignment::max_value_assignment;
use crate::config::PrototypeSpace;
use crate::dataset::{extract_patch, ClassSplit, HsiCube, Patch};
use crate::nn::patches_to_batch;
use crate::prototypes;
use crate::render;
use crate::train::TrainState;
use crate::{Error, Real, Result};

const BATCH: usize = 256;

/// Un-augmented evaluation patches with their ground-truth class ids.
pub struct TestSet {
    pub patches: Vec<Patch>,
    pub truth: Vec<u16>,
}

/// Extract evaluation patches for the given per-class pixel lists
/// (deterministic order: class ascending, then pixel list order).
pub fn build_test_set(
    cube: &HsiCube,
    pixels: &BTreeMap<u16, Vec<(usize, usize)>>,
    patch: usize,
) -> Result<TestSet> {
    let mut patches = Vec::new();
    let mut truth = Vec::new();
    for (&class, list) in pixels {
        for &center in list {
            patches.push(extract_patch(cube, center, patch)?);
            truth.push(class);
        }
    }
    Ok(TestSet { patches, truth })
}

/// Per-sample outcome: either a known class or a discovered cluster,
/// selected by the rejection flag.
#[derive(Clone, Debug, Serialize)]
pub struct Prediction {
    pub rejected: bool,
    /// Dataset class id; set exactly when not rejected.
    pub known_class: Option<u16>,
    /// Discovered group id; set exactly when rejected.
    pub cluster: Option<usize>,
    pub distances: Vec<f64>,
    pub group_probs: Vec<f64>,
}

/// Batched eval-mode prediction over arbitrary patches.
pub fn predict<T: Real>(state: &mut TrainState<T>, patches: &[Patch]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(patches.len());
    let space = state.config.model.prototype_space;
    for chunk in patches.chunks(BATCH) {
        let refs: Vec<&Patch> = chunk.iter().collect();
        let x = patches_to_batch::<T>(&refs);
        let (penult, logits) = state.extractor.forward(x, false);
        let d = anchors::distances_batch(&logits, &state.anchors)?;
        let embeddings = match space {
            PrototypeSpace::Penultimate => &penult,
            PrototypeSpace::Logit => &logits,
        };
        let p = prototypes::assign(embeddings, &state.prototypes)?;
        let q = prototypes::group_probabilities(&p, &state.groups);
        let (clusters, fallback) = prototypes::discover(&q, &state.groups);
        let mut used_fallback = false;
        for i in 0..chunk.len() {
            let class_idx = anchors::classify(logits.row(i), &state.anchors)?;
            let rejected = class_idx == state.anchors.unknown_index();
            if rejected && fallback {
                used_fallback = true;
            }
            out.push(Prediction {
                rejected,
                known_class: (!rejected).then(|| state.split.known_ids[class_idx]),
                cluster: rejected.then(|| clusters[i]),
                distances: d.row(i).iter().map(|&v| v.to_f64()).collect(),
                group_probs: q.row(i).iter().map(|&v| v.to_f64()).collect(),
            });
        }
        if used_fallback {
            state.discover_fallbacks += 1;
        }
    }
    Ok(out)
}

/// Fraction of known-class samples predicted as exactly their class;
/// rejected known samples count as wrong. None when no known samples.
pub fn known_accuracy(preds: &[Prediction], truth: &[u16], split: &ClassSplit) -> Option<f64> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for (pred, &class) in preds.iter().zip(truth) {
        if !split.is_known(class) {
            continue;
        }
        total += 1;
        if pred.known_class == Some(class) {
            correct += 1;
        }
    }
    (total > 0).then(|| correct as f64 / total as f64)
}

/// Contingency table of discovered clusters (rows, in `cluster_ids` order)
/// against true unknown classes (columns, in `split.unknown_ids` order),
/// over unknown-truth samples that were rejected.
fn unknown_contingency(
    preds: &[Prediction],
    truth: &[u16],
    split: &ClassSplit,
) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut cluster_ids: Vec<usize> = preds
        .iter()
        .zip(truth)
        .filter(|(p, &c)| p.rejected && !split.is_known(c))
        .filter_map(|(p, _)| p.cluster)
        .collect();
    cluster_ids.sort_unstable();
    cluster_ids.dedup();
    let row_of: BTreeMap<usize, usize> =
        cluster_ids.iter().enumerate().map(|(r, &c)| (c, r)).collect();
    let col_of: BTreeMap<u16, usize> = split
        .unknown_ids
        .iter()
        .enumerate()
        .map(|(j, &u)| (u, j))
        .collect();
    let mut table = vec![vec![0usize; split.unknown_ids.len()]; cluster_ids.len()];
    for (pred, &class) in preds.iter().zip(truth) {
        if let (Some(cluster), Some(&col)) = (pred.cluster, col_of.get(&class)) {
            table[row_of[&cluster]][col] += 1;
        }
    }
    (cluster_ids, table)
}

/// Best one-to-one cluster/class matching on a contingency table; returns
/// (matched count, per-row assigned column).
fn best_match(table: &[Vec<usize>]) -> (usize, Vec<Option<usize>>) {
    if table.is_empty() || table[0].is_empty() {
        return (0, vec![None; table.len()]);
    }
    let rows = table.len();
    let cols = table[0].len();
    let mut values = ndarray::Array2::<f64>::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            values[[r, c]] = table[r][c] as f64;
        }
    }
    let assignment = max_value_assignment(&values);
    let matched = assignment
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| table[r][c]))
        .sum();
    (matched, assignment)
}

/// Assignment-matched clustering accuracy over unknown-class samples.
/// Unknown samples predicted as known count as unmatched. None when the
/// test set has no unknown samples.
pub fn unknown_accuracy(preds: &[Prediction], truth: &[u16], split: &ClassSplit) -> Option<f64> {
    let total = truth.iter().filter(|&&c| !split.is_known(c)).count();
    if total == 0 {
        return None;
    }
    let (_, table) = unknown_contingency(preds, truth, split);
    let (matched, _) = best_match(&table);
    Some(matched as f64 / total as f64)
}

/// Combined accuracy: known classes pinned to their own labels, discovered
/// clusters optimally assigned to the remaining (unknown) true classes.
pub fn all_accuracy(preds: &[Prediction], truth: &[u16], split: &ClassSplit) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let known_correct = preds
        .iter()
        .zip(truth)
        .filter(|(p, &c)| split.is_known(c) && p.known_class == Some(c))
        .count();
    let (_, table) = unknown_contingency(preds, truth, split);
    let (matched, _) = best_match(&table);
    (known_correct + matched) as f64 / preds.len() as f64
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub known_acc: Option<f64>,
    pub unknown_acc: Option<f64>,
    pub all_acc: f64,
    /// The model's class-count estimate (number of prototype groups).
    pub predicted_class_count: usize,
    pub n_known_samples: usize,
    pub n_unknown_samples: usize,
    /// Fraction of unknown-truth samples rejected by the anchor head.
    pub rejected_unknown_fraction: Option<f64>,
    /// Fraction of known-truth samples falsely rejected.
    pub false_reject_fraction: Option<f64>,
    /// Recall per class id: known classes under their own label, unknown
    /// classes under the optimal cluster assignment.
    pub per_class_acc: BTreeMap<u16, f64>,
    /// Known-truth rows (known_ids order) × predicted (known_ids order,
    /// last column = rejected).
    pub known_confusion: Vec<Vec<usize>>,
    /// Rejected unknown-truth samples: clusters × unknown_ids.
    pub cluster_contingency: Vec<Vec<usize>>,
    pub cluster_ids: Vec<usize>,
}

/// Run the full open-set evaluation on a held-out test set.
pub fn evaluate<T: Real>(state: &mut TrainState<T>, test: &TestSet) -> Result<EvalReport> {
    if test.patches.is_empty() {
        return Err(Error::EmptySampleSet("evaluation test set".into()));
    }
    let preds = predict(state, &test.patches)?;
    Ok(score(&preds, &test.truth, &state.split, state.groups.n_groups))
}

/// Compute every metric from predictions alone (no model access).
pub fn score(
    preds: &[Prediction],
    truth: &[u16],
    split: &ClassSplit,
    n_groups: usize,
) -> EvalReport {
    assert_eq!(preds.len(), truth.len(), "one truth label per prediction");
    let n_known = truth.iter().filter(|&&c| split.is_known(c)).count();
    let n_unknown = truth.len() - n_known;

    let rejected_unknown = preds
        .iter()
        .zip(truth)
        .filter(|(p, &c)| !split.is_known(c) && p.rejected)
        .count();
    let rejected_known = preds
        .iter()
        .zip(truth)
        .filter(|(p, &c)| split.is_known(c) && p.rejected)
        .count();

    // Known-class confusion: truth row → predicted column (last = reject).
    let ck = split.known_ids.len();
    let mut known_confusion = vec![vec![0usize; ck + 1]; ck];
    for (pred, &class) in preds.iter().zip(truth) {
        if let Some(row) = split.known_ids.iter().position(|&k| k == class) {
            let col = match pred.known_class {
                Some(predicted) => split
                    .known_ids
                    .iter()
                    .position(|&k| k == predicted)
                    .expect("prediction uses known ids"),
                None => ck,
            };
            known_confusion[row][col] += 1;
        }
    }

    let (cluster_ids, cluster_contingency) = unknown_contingency(preds, truth, split);
    let (_, assignment) = best_match(&cluster_contingency);

    let mut per_class_acc = BTreeMap::new();
    for (row, &class) in split.known_ids.iter().enumerate() {
        let total: usize = known_confusion[row].iter().sum();
        if total > 0 {
            per_class_acc.insert(class, known_confusion[row][row] as f64 / total as f64);
        }
    }
    for (col, &class) in split.unknown_ids.iter().enumerate() {
        let total = truth.iter().filter(|&&c| c == class).count();
        if total == 0 {
            continue;
        }
        let matched = assignment
            .iter()
            .enumerate()
            .find(|(_, assigned)| **assigned == Some(col))
            .map(|(row, _)| cluster_contingency[row][col])
            .unwrap_or(0);
        per_class_acc.insert(class, matched as f64 / total as f64);
    }

    EvalReport {
        known_acc: known_accuracy(preds, truth, split),
        unknown_acc: unknown_accuracy(preds, truth, split),
        all_acc: all_accuracy(preds, truth, split),
        predicted_class_count: n_groups,
        n_known_samples: n_known,
        n_unknown_samples: n_unknown,
        rejected_unknown_fraction: (n_unknown > 0)
            .then(|| rejected_unknown as f64 / n_unknown as f64),
        false_reject_fraction: (n_known > 0).then(|| rejected_known as f64 / n_known as f64),
        per_class_acc,
        known_confusion,
        cluster_contingency,
        cluster_ids,
    }
}

/// Render the per-labeled-pixel classification map: known classes in the
/// dataset palette, discovered clusters in reserved distinct colors,
/// background black. The cube must be normalized the same way as training.
pub fn render_map<T: Real>(
    state: &mut TrainState<T>,
    cube: &HsiCube,
) -> Result<image::RgbImage> {
    let labeled = cube.labeled_pixels();
    let mut patches = Vec::with_capacity(labeled.len());
    for &center in &labeled {
        patches.push(extract_patch(cube, center, state.config.model.patch)?);
    }
    let preds = predict(state, &patches)?;

    let class_colors = render::class_palette(cube.class_count());
    let mut cluster_ids: Vec<usize> = preds.iter().filter_map(|p| p.cluster).collect();
    cluster_ids.sort_unstable();
    cluster_ids.dedup();
    let cluster_colors = render::distinct_colors(cluster_ids.len(), &class_colors);

    let mut image = image::RgbImage::from_pixel(
        cube.width() as u32,
        cube.height() as u32,
        image::Rgb(render::BACKGROUND),
    );
    for (&(y, x), pred) in labeled.iter().zip(&preds) {
        let color = match (pred.known_class, pred.cluster) {
            (Some(class), _) => class_colors[class as usize - 1],
            (None, Some(cluster)) => {
                let idx = cluster_ids.binary_search(&cluster).expect("collected above");
                cluster_colors[idx]
            }
            (None, None) => render::BACKGROUND,
        };
        image.put_pixel(x as u32, y as u32, image::Rgb(color));
    }
    Ok(image)
}

/// Write penultimate + logit embeddings with labels as CSV (shortest
/// round-trip float formatting, so values re-read bit-exactly).
pub fn export_embeddings<T: Real>(
    state: &mut TrainState<T>,
    patches: &[Patch],
    labels: &[u16],
    path: &Path,
) -> Result<()> {
    assert_eq!(patches.len(), labels.len(), "one label per patch");
    let penult_dim = state.extractor.penult_dim();
    let n_logits = state.anchors.n();
    let mut out = String::new();
    for i in 0..penult_dim {
        out.push_str(&format!("penult_{i},"));
    }
    for i in 0..n_logits {
        out.push_str(&format!("logit_{i},"));
    }
    out.push_str("label\n");

    for (chunk_idx, chunk) in patches.chunks(BATCH).enumerate() {
        let refs: Vec<&Patch> = chunk.iter().collect();
        let x = patches_to_batch::<T>(&refs);
        let (penult, logits) = state.extractor.forward(x, false);
        for i in 0..chunk.len() {
            for &v in penult.slice(s![i, ..]).iter() {
                out.push_str(&format!("{},", v.to_f64()));
            }
            for &v in logits.slice(s![i, ..]).iter() {
                out.push_str(&format!("{},", v.to_f64()));
            }
            out.push_str(&format!("{}\n", labels[chunk_idx * BATCH + i]));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
