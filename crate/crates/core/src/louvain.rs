//! Louvain community detection on a weighted undirected graph, used to
//! cluster prototypes by Jaccard similarity. Deterministic: nodes are
//! swept in ascending index order, ties keep the current community (then
//! the smallest community id), and every pass is a full local-move phase
//! followed by graph aggregation.
//!
//! Convention: the adjacency matrix is symmetric with `a[i][i]` equal to
//! TWICE the self-loop weight, so degrees are plain row sums. The input
//! similarity matrix has its diagonal zeroed before the first pass.

use ndarray::Array2;

#[derive(Clone, Debug)]
pub struct LouvainResult {
    /// Original node → compact group id (0-based, dense).
    pub labels: Vec<usize>,
    pub n_groups: usize,
    /// Modularity of `labels` on the input graph.
    pub modularity: f64,
    /// Modularity after each pass; non-decreasing by construction.
    pub pass_modularities: Vec<f64>,
}

/// Modularity Q = (1/2m)·Σ_ij (a_ij − γ·k_i·k_j/2m)·δ(g_i, g_j) over the
/// matrix convention above. Returns 0 for an empty graph.
pub fn modularity(adj: &Array2<f64>, labels: &[usize], resolution: f64) -> f64 {
    let n = adj.nrows();
    assert_eq!(labels.len(), n, "one label per node");
    let degrees: Vec<f64> = (0..n).map(|i| adj.row(i).sum()).collect();
    let two_m: f64 = degrees.iter().sum();
    if two_m <= 0.0 {
        return 0.0;
    }
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if labels[i] == labels[j] {
                q += adj[[i, j]] - resolution * degrees[i] * degrees[j] / two_m;
            }
        }
    }
    q / two_m
}

/// One local-move phase: sweep nodes in ascending order, moving each to the
/// candidate community with the largest modularity gain until a full sweep
/// makes no move. Returns (community per node, whether anything moved).
fn one_level(adj: &Array2<f64>, resolution: f64) -> (Vec<usize>, bool) {
    let n = adj.nrows();
    let degrees: Vec<f64> = (0..n).map(|i| adj.row(i).sum()).collect();
    let two_m: f64 = degrees.iter().sum();
    let mut community: Vec<usize> = (0..n).collect();
    if two_m <= 0.0 || n == 0 {
        return (community, false);
    }
    let mut sigma_tot: Vec<f64> = degrees.clone();
    let mut moved_any = false;
    let mut w_ic = vec![0.0f64; n];

    loop {
        let mut moved_this_sweep = false;
        for i in 0..n {
            let c_old = community[i];
            let mut candidates: Vec<usize> = Vec::new();
            for j in 0..n {
                if j != i && adj[[i, j]] > 0.0 {
                    let c = community[j];
                    if w_ic[c] == 0.0 {
                        candidates.push(c);
                    }
                    w_ic[c] += adj[[i, j]];
                }
            }
            if !candidates.contains(&c_old) {
                candidates.push(c_old);
            }
            candidates.sort_unstable();

            sigma_tot[c_old] -= degrees[i];
            let gain = |c: usize, w_ic: &[f64], sigma_tot: &[f64]| {
                w_ic[c] - resolution * degrees[i] * sigma_tot[c] / two_m
            };
            let mut best_c = c_old;
            let mut best_gain = gain(c_old, &w_ic, &sigma_tot);
            for &c in &candidates {
                let g = gain(c, &w_ic, &sigma_tot);
                if g > best_gain + 1e-15 || (c == c_old && g >= best_gain) {
                    best_gain = g;
                    best_c = c;
                }
            }
            sigma_tot[best_c] += degrees[i];
            if best_c != c_old {
                community[i] = best_c;
                moved_this_sweep = true;
                moved_any = true;
            }
            for &c in &candidates {
                w_ic[c] = 0.0;
            }
            w_ic[c_old] = 0.0;
        }
        if !moved_this_sweep {
            break;
        }
    }
    (community, moved_any)
}

/// Relabel communities to dense 0-based ids in order of first appearance.
fn compact(community: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::BTreeMap::new();
    let mut labels = Vec::with_capacity(community.len());
    for &c in community {
        let next = map.len();
        let id = *map.entry(c).or_insert(next);
        labels.push(id);
    }
    (labels, map.len())
}

/// Merge nodes of one community into single nodes, summing edge weights.
/// Internal weight lands on the diagonal (in the ×2 convention).
fn aggregate(adj: &Array2<f64>, labels: &[usize], n_groups: usize) -> Array2<f64> {
    let n = adj.nrows();
    let mut coarse = Array2::<f64>::zeros((n_groups, n_groups));
    for i in 0..n {
        for j in 0..n {
            coarse[[labels[i], labels[j]]] += adj[[i, j]];
        }
    }
    coarse
}

/// Full Louvain: repeated (local move, aggregate) passes until no move
/// improves modularity. An all-zero graph yields all-singleton groups.
pub fn louvain(similarity: &Array2<f64>, resolution: f64) -> LouvainResult {
    let n = similarity.nrows();
    assert_eq!(similarity.ncols(), n, "similarity matrix must be square");
    let mut base = similarity.clone();
    for i in 0..n {
        base[[i, i]] = 0.0;
    }

    let mut global: Vec<usize> = (0..n).collect();
    let mut current = base.clone();
    let mut pass_modularities = Vec::new();
    let mut last_q = f64::NEG_INFINITY;

    loop {
        let (community, moved) = one_level(&current, resolution);
        let (level_labels, n_groups) = compact(&community);
        for g in global.iter_mut() {
            *g = level_labels[*g];
        }
        let q = modularity(&base, &global, resolution);
        debug_assert!(
            pass_modularities.is_empty() || q >= last_q - 1e-9,
            "modularity decreased across a pass: {} -> {}",
            last_q,
            q
        );
        last_q = q;
        pass_modularities.push(q);
        if !moved || n_groups == current.nrows() {
            let (labels, n_groups) = compact(&global);
            return LouvainResult {
                modularity: modularity(&base, &labels, resolution),
                labels,
                n_groups,
                pass_modularities,
            };
        }
        current = aggregate(&current, &level_labels, n_groups);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clique_pair() -> Array2<f64> {
        // Two 4-cliques, weight 1 inside, none across.
        let mut s = Array2::<f64>::zeros((8, 8));
        for block in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    if i != j {
                        s[[block * 4 + i, block * 4 + j]] = 1.0;
                    }
                }
            }
        }
        s
    }

    #[test]
    fn two_cliques_split_exactly() {
        let result = louvain(&clique_pair(), 1.0);
        assert_eq!(result.n_groups, 2);
        for i in 0..4 {
            assert_eq!(result.labels[i], result.labels[0]);
            assert_eq!(result.labels[4 + i], result.labels[4]);
        }
        assert_ne!(result.labels[0], result.labels[4]);
        // Q for the planted split: 1 − 2·(1/2)² = 0.5.
        assert!((result.modularity - 0.5).abs() < 1e-12);
    }

    #[test]
    fn all_zero_graph_gives_singletons() {
        let s = Array2::<f64>::zeros((5, 5));
        let result = louvain(&s, 1.0);
        assert_eq!(result.n_groups, 5);
        assert_eq!(result.labels, vec![0, 1, 2, 3, 4]);
        assert_eq!(result.modularity, 0.0);
    }

    #[test]
    fn complete_graph_merges_to_one_group() {
        let n = 8;
        let mut s = Array2::<f64>::from_elem((n, n), 1.0);
        for i in 0..n {
            s[[i, i]] = 0.0;
        }
        let result = louvain(&s, 1.0);
        assert_eq!(result.n_groups, 1);
        assert!(result.modularity.abs() < 1e-12);
    }

    #[test]
    fn diagonal_is_ignored() {
        let mut s = clique_pair();
        for i in 0..8 {
            s[[i, i]] = 1.0; // as Jaccard would produce
        }
        let result = louvain(&s, 1.0);
        assert_eq!(result.n_groups, 2);
    }

    #[test]
    fn pass_modularities_never_decrease() {
        // A noisy three-block graph to force multiple passes.
        let mut s = Array2::<f64>::zeros((9, 9));
        for b in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        s[[b * 3 + i, b * 3 + j]] = 1.0;
                    }
                }
            }
        }
        // Weak bridges.
        s[[0, 3]] = 0.2;
        s[[3, 0]] = 0.2;
        s[[3, 6]] = 0.2;
        s[[6, 3]] = 0.2;
        let result = louvain(&s, 1.0);
        for pair in result.pass_modularities.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-9);
        }
        assert_eq!(result.n_groups, 3);
    }

    #[test]
    fn higher_resolution_splits_more() {
        let mut s = Array2::<f64>::from_elem((6, 6), 0.5);
        for i in 0..6 {
            s[[i, i]] = 0.0;
        }
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        s[[b * 3 + i, b * 3 + j]] = 1.0;
                    }
                }
            }
        }
        let coarse = louvain(&s, 0.5);
        let fine = louvain(&s, 2.0);
        assert!(fine.n_groups >= coarse.n_groups);
    }

    #[test]
    fn labels_are_dense_and_first_appearance_ordered() {
        let result = louvain(&clique_pair(), 1.0);
        assert_eq!(result.labels[0], 0);
        let max = *result.labels.iter().max().unwrap();
        assert_eq!(max + 1, result.n_groups);
    }
}
