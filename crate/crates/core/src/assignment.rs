//! Exact minimum-cost assignment (Hungarian algorithm, O(n³) shortest
//! augmenting path formulation). Rectangular instances are padded to square
//! with a constant, which leaves the optimal matching of the real entries
//! unchanged, so callers get the optimal min(rows, cols)-sized matching.

use ndarray::Array2;

/// For each row, the assigned column under a minimum-cost perfect matching
/// of the padded square problem; `None` marks rows matched to padding.
pub fn min_cost_assignment(cost: &Array2<f64>) -> Vec<Option<usize>> {
    let (rows, cols) = cost.dim();
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    let n = rows.max(cols);
    let mut padded = Array2::<f64>::zeros((n, n));
    for i in 0..rows {
        for j in 0..cols {
            padded[[i, j]] = cost[[i, j]];
        }
    }

    // Potentials u, v and column matching p, 1-based with a virtual 0 slot.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = padded[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![None; rows];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i <= rows && j <= cols {
            assignment[i - 1] = Some(j - 1);
        }
    }
    assignment
}

/// Maximum-total assignment (e.g. contingency-table matching): negates the
/// matrix and reuses the minimizer.
pub fn max_value_assignment(value: &Array2<f64>) -> Vec<Option<usize>> {
    min_cost_assignment(&value.mapv(|v| -v))
}

/// Total cost of an assignment under a cost matrix.
pub fn assignment_cost(cost: &Array2<f64>, assignment: &[Option<usize>]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| cost[[i, j]]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all ways to injectively map the smaller side
    /// into the larger one.
    fn brute_force_min(cost: &Array2<f64>) -> f64 {
        let (rows, cols) = cost.dim();
        fn recurse(
            cost: &Array2<f64>,
            row: usize,
            used: &mut Vec<bool>,
            picked: usize,
            quota: usize,
            acc: f64,
            best: &mut f64,
        ) {
            let rows = cost.nrows();
            if picked == quota || row == rows {
                if picked == quota {
                    *best = best.min(acc);
                }
                return;
            }
            // Skip this row entirely (it may be matched to padding).
            if rows - row - 1 + picked >= quota {
                recurse(cost, row + 1, used, picked, quota, acc, best);
            }
            for j in 0..cost.ncols() {
                if !used[j] {
                    used[j] = true;
                    recurse(cost, row + 1, used, picked + 1, quota, acc + cost[[row, j]], best);
                    used[j] = false;
                }
            }
        }
        let quota = rows.min(cols);
        let mut best = f64::INFINITY;
        recurse(cost, 0, &mut vec![false; cols], 0, quota, 0.0, &mut best);
        best
    }

    #[test]
    fn forced_and_identity_optimum() {
        // Class 1's mass sits on group 2 and vice versa → swap map.
        let cost = arr2(&[[0.0, -1.0], [-1.0, 0.0]]);
        let a = min_cost_assignment(&cost);
        assert_eq!(a, vec![Some(1), Some(0)]);

        let cost = arr2(&[[1.0, 2.0], [2.0, 1.0]]);
        let a = min_cost_assignment(&cost);
        assert_eq!(a, vec![Some(0), Some(1)]);
    }

    #[test]
    fn three_by_three_matches_brute_force() {
        let cost = arr2(&[[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]]);
        let a = min_cost_assignment(&cost);
        assert_eq!(assignment_cost(&cost, &a), brute_force_min(&cost));
    }

    #[test]
    fn random_instances_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..200 {
            let rows = rng.gen_range(2..=5);
            let cols = rng.gen_range(2..=5);
            let cost = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-5.0..5.0));
            let a = min_cost_assignment(&cost);
            let got = assignment_cost(&cost, &a);
            let want = brute_force_min(&cost);
            assert!(
                (got - want).abs() < 1e-9,
                "trial {}: {} vs {} on {:?}",
                trial,
                got,
                want,
                cost
            );
            // The assignment must be injective and full-sized.
            let assigned: Vec<usize> = a.iter().flatten().copied().collect();
            let unique: std::collections::BTreeSet<_> = assigned.iter().collect();
            assert_eq!(unique.len(), assigned.len());
            assert_eq!(assigned.len(), rows.min(cols));
        }
    }

    #[test]
    fn max_value_flips_the_objective() {
        let value = arr2(&[[10.0, 0.0], [0.0, 10.0]]);
        let a = max_value_assignment(&value);
        assert_eq!(a, vec![Some(0), Some(1)]);
    }

    #[test]
    fn empty_inputs() {
        let cost = Array2::<f64>::zeros((0, 3));
        assert!(min_cost_assignment(&cost).is_empty());
        let cost = Array2::<f64>::zeros((2, 0));
        assert_eq!(min_cost_assignment(&cost), vec![None, None]);
    }
}
