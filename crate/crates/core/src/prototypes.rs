//! Trainable prototypes and the unknown-class discovery machinery: soft
//! assignments with temperature, the four discovery losses (with analytic
//! gradients w.r.t. both embeddings and the prototype matrix), top-3
//! association sets, the Jaccard similarity graph, Louvain grouping, and
//! the Hungarian known-class/group alignment.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::assignment::min_cost_assignment;
use crate::louvain::louvain;
use crate::{Error, Real, Result};

/// Clamp floor for logs/divisions; gradients vanish in the clamped region.
const EPS: f64 = 1e-12;

/// w trainable prototypes in an E-dimensional embedding space.
pub struct PrototypeSet<T: Real> {
    pub c: Array2<T>, // [w, E]
    pub dc: Array2<T>,
    pub tau: f64,
}

impl<T: Real> PrototypeSet<T> {
    /// Rows drawn from a unit Gaussian and L2-normalized.
    pub fn new(w: usize, e: usize, tau: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if w < 3 {
            return Err(Error::InvalidConfig(format!(
                "need at least 3 prototypes for top-3 association sets, got {w}"
            )));
        }
        if !(tau > 0.0) {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {tau}")));
        }
        let normal = rand_distr::Normal::new(0.0f64, 1.0).expect("unit normal");
        let mut c = Array2::<T>::zeros((w, e));
        for mut row in c.outer_iter_mut() {
            let mut norm = 0.0f64;
            let vals: Vec<f64> = (0..e).map(|_| normal.sample(rng)).collect();
            for v in &vals {
                norm += v * v;
            }
            let norm = norm.sqrt().max(EPS);
            for (slot, v) in row.iter_mut().zip(vals) {
                *slot = T::from_f64(v / norm);
            }
        }
        Ok(PrototypeSet {
            c,
            dc: Array2::zeros((w, e)),
            tau,
        })
    }

    pub fn w(&self) -> usize {
        self.c.nrows()
    }

    pub fn dim(&self) -> usize {
        self.c.ncols()
    }

    pub fn visit_params(&mut self, f: crate::nn::ParamVisitor<T>) {
        f(
            "prototypes",
            self.c.as_slice_mut().expect("standard layout"),
            self.dc.as_slice_mut().expect("standard layout"),
        );
    }

    pub fn zero_grads(&mut self) {
        self.dc.fill(T::zero());
    }
}

/// Row-stochastic soft assignment p_i = softmax(z_i·Cᵀ/τ).
pub fn assign<T: Real>(z: &Array2<T>, protos: &PrototypeSet<T>) -> Result<Array2<T>> {
    if z.ncols() != protos.dim() {
        return Err(Error::DimensionMismatch(format!(
            "embeddings have {} dims, prototypes {}",
            z.ncols(),
            protos.dim()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "prototype assignment input".into(),
        });
    }
    let inv_tau = T::from_f64(1.0 / protos.tau);
    let mut u = z.dot(&protos.c.t());
    u.mapv_inplace(|v| v * inv_tau);
    for mut row in u.outer_iter_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
        let mut denom = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            denom = denom + *v;
        }
        for v in row.iter_mut() {
            *v = *v / denom;
        }
    }
    Ok(u)
}

/// Backward through `assign`: given dL/dp, returns dL/dz and accumulates
/// dL/dC into the prototype gradient.
pub fn assign_backward<T: Real>(
    z: &Array2<T>,
    protos: &mut PrototypeSet<T>,
    p: &Array2<T>,
    dp: &Array2<T>,
) -> Array2<T> {
    // Softmax backward: du = p ∘ (dp − rowdot(dp, p)).
    let mut du = Array2::<T>::zeros(p.raw_dim());
    for i in 0..p.nrows() {
        let pi = p.row(i);
        let dpi = dp.row(i);
        let dot = pi.dot(&dpi);
        for k in 0..p.ncols() {
            du[[i, k]] = pi[k] * (dpi[k] - dot);
        }
    }
    let inv_tau = T::from_f64(1.0 / protos.tau);
    let dz = du.dot(&protos.c).mapv(|v| v * inv_tau);
    let dc = du.t().dot(z).mapv(|v| v * inv_tau);
    protos.dc = &protos.dc + &dc;
    dz
}

/// A partition of prototypes into groups plus the Hungarian alignment of
/// known classes to groups. Group ids are dense and 0-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrototypeGroups {
    pub partition: Vec<usize>,
    pub n_groups: usize,
    /// known-class position (index into the known-id ordering) → group id.
    pub known_map: Vec<Option<usize>>,
}

impl PrototypeGroups {
    pub fn singletons(w: usize) -> Self {
        PrototypeGroups {
            partition: (0..w).collect(),
            n_groups: w,
            known_map: Vec::new(),
        }
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_groups];
        for &g in &self.partition {
            sizes[g] += 1;
        }
        sizes
    }

    /// Groups not claimed by any known class, ascending.
    pub fn unknown_groups(&self) -> Vec<usize> {
        let known: std::collections::BTreeSet<usize> =
            self.known_map.iter().flatten().copied().collect();
        (0..self.n_groups).filter(|g| !known.contains(g)).collect()
    }

    /// Indicator matrix G [w, N_g] with G[k, partition[k]] = 1.
    pub fn indicator<T: Real>(&self) -> Array2<T> {
        let mut g = Array2::<T>::zeros((self.partition.len(), self.n_groups));
        for (k, &grp) in self.partition.iter().enumerate() {
            g[[k, grp]] = T::one();
        }
        g
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.n_groups];
        for &g in &self.partition {
            if g >= self.n_groups {
                return Err(Error::InvalidConfig(format!(
                    "partition names group {} but only {} groups exist",
                    g, self.n_groups
                )));
            }
            seen[g] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidConfig("partition is not surjective onto groups".into()));
        }
        let mapped: Vec<usize> = self.known_map.iter().flatten().copied().collect();
        let unique: std::collections::BTreeSet<_> = mapped.iter().collect();
        if unique.len() != mapped.len() {
            return Err(Error::InvalidConfig("known_map assigns one group to two classes".into()));
        }
        Ok(())
    }
}

/// Group marginal q = p·G; rows keep their unit sum.
pub fn group_probabilities<T: Real>(p: &Array2<T>, groups: &PrototypeGroups) -> Array2<T> {
    let mut q = Array2::<T>::zeros((p.nrows(), groups.n_groups));
    for i in 0..p.nrows() {
        for (k, &g) in groups.partition.iter().enumerate() {
            q[[i, g]] = q[[i, g]] + p[[i, k]];
        }
    }
    q
}

/// Prototype similarity loss: −(1/M) Σ log(p_i · p′_{π(i)}), where π maps
/// each sample to its positive strong view. Returns (loss, dp, dp′).
pub fn loss_ps<T: Real>(
    p_weak: &Array2<T>,
    p_strong: &Array2<T>,
    positives: &[usize],
) -> (T, Array2<T>, Array2<T>) {
    let m = p_weak.nrows();
    assert_eq!(positives.len(), m, "one positive per weak view");
    let inv_m = T::from_f64(1.0 / m.max(1) as f64);
    let eps = T::from_f64(EPS);
    let mut loss = T::zero();
    let mut dpw = Array2::<T>::zeros(p_weak.raw_dim());
    let mut dps = Array2::<T>::zeros(p_strong.raw_dim());
    for i in 0..m {
        let pi = p_weak.row(i);
        let pj = p_strong.row(positives[i]);
        let dot = pi.dot(&pj);
        if dot < eps {
            loss = loss - eps.ln();
            continue; // clamped region: zero gradient
        }
        loss = loss - dot.ln();
        let scale = inv_m / dot;
        for k in 0..p_weak.ncols() {
            dpw[[i, k]] = dpw[[i, k]] - scale * pj[k];
            dps[[positives[i], k]] = dps[[positives[i], k]] - scale * pi[k];
        }
    }
    (loss * inv_m, dpw, dps)
}

/// Prototype group similarity loss: symmetric cross-entropy between paired
/// group distributions, −(1/M) Σ (q′_i·log q_i + q_i·log q′_i).
/// Returns (loss, dp_weak, dp_strong) already chained through q = p·G.
pub fn loss_pgs<T: Real>(
    p_weak: &Array2<T>,
    p_strong: &Array2<T>,
    positives: &[usize],
    groups: &PrototypeGroups,
) -> (T, Array2<T>, Array2<T>) {
    let m = p_weak.nrows();
    assert_eq!(positives.len(), m, "one positive per weak view");
    let q = group_probabilities(p_weak, groups);
    let qs = group_probabilities(p_strong, groups);
    let inv_m = T::from_f64(1.0 / m.max(1) as f64);
    let eps = T::from_f64(EPS);
    let ng = groups.n_groups;
    let mut loss = T::zero();
    let mut dq = Array2::<T>::zeros((m, ng));
    let mut dqs = Array2::<T>::zeros((m, ng));
    for i in 0..m {
        let pi = positives[i];
        for g in 0..ng {
            let a = q[[i, g]];
            let b = qs[[pi, g]];
            let log_a = if a < eps { eps.ln() } else { a.ln() };
            let log_b = if b < eps { eps.ln() } else { b.ln() };
            loss = loss - (b * log_a + a * log_b);
            let mut da = T::zero() - log_b;
            if a >= eps {
                da = da - b / a;
            }
            dq[[i, g]] = dq[[i, g]] + da * inv_m;
            let mut db = T::zero() - log_a;
            if b >= eps {
                db = db - a / b;
            }
            dqs[[pi, g]] = dqs[[pi, g]] + db * inv_m;
        }
    }
    // Chain dq → dp through the indicator: dp[i, k] = dq[i, partition[k]].
    let mut dpw = Array2::<T>::zeros(p_weak.raw_dim());
    let mut dps = Array2::<T>::zeros(p_strong.raw_dim());
    for i in 0..m {
        for (k, &g) in groups.partition.iter().enumerate() {
            dpw[[i, k]] = dq[[i, g]];
            dps[[i, k]] = dqs[[i, g]];
        }
    }
    (loss * inv_m, dpw, dps)
}

/// Per-prototype prior: 1/(N_g · |group of k|), which sums to 1 over k.
pub fn prototype_prior(groups: &PrototypeGroups) -> Array1<f64> {
    let sizes = groups.group_sizes();
    Array1::from_iter(
        groups
            .partition
            .iter()
            .map(|&g| 1.0 / (groups.n_groups as f64 * sizes[g] as f64)),
    )
}

/// Regularization: KL(mean_i p_i ‖ prior). Returns (loss, dp).
pub fn loss_reg<T: Real>(p_weak: &Array2<T>, groups: &PrototypeGroups) -> (T, Array2<T>) {
    let m = p_weak.nrows();
    let w = p_weak.ncols();
    let prior = prototype_prior(groups);
    let inv_m = T::from_f64(1.0 / m.max(1) as f64);
    let eps = T::from_f64(EPS);
    let mut mean = Array1::<T>::zeros(w);
    for i in 0..m {
        for k in 0..w {
            mean[k] = mean[k] + p_weak[[i, k]];
        }
    }
    mean.mapv_inplace(|v| v * inv_m);

    let mut loss = T::zero();
    let mut dmean = Array1::<T>::zeros(w);
    for k in 0..w {
        let mk = mean[k];
        if mk < eps {
            continue; // lim_{m→0} m·log(m/prior) = 0, zero gradient
        }
        let ratio_log = mk.ln() - T::from_f64(prior[k].ln());
        loss = loss + mk * ratio_log;
        dmean[k] = ratio_log + T::one();
    }
    let mut dp = Array2::<T>::zeros(p_weak.raw_dim());
    for i in 0..m {
        for k in 0..w {
            dp[[i, k]] = dmean[k] * inv_m;
        }
    }
    (loss, dp)
}

/// Known-class discovery loss over the D support samples:
/// −(1/D) Σ (log q_i^{(map(y_i))} + log q′_i^{(map(y_i))}).
/// Classes without a matched group are skipped; the skip count is returned.
pub fn loss_kcd<T: Real>(
    p_weak_support: &Array2<T>,
    p_strong_support: &Array2<T>,
    y_support: &[usize],
    groups: &PrototypeGroups,
) -> (T, Array2<T>, Array2<T>, usize) {
    let d = p_weak_support.nrows();
    assert_eq!(y_support.len(), d, "one label per support row");
    let q = group_probabilities(p_weak_support, groups);
    let qs = group_probabilities(p_strong_support, groups);
    let inv_d = T::from_f64(1.0 / d.max(1) as f64);
    let eps = T::from_f64(EPS);
    let ng = groups.n_groups;
    let mut loss = T::zero();
    let mut dq = Array2::<T>::zeros((d, ng));
    let mut dqs = Array2::<T>::zeros((d, ng));
    let mut skipped = 0usize;
    for i in 0..d {
        let mapped = groups.known_map.get(y_support[i]).copied().flatten();
        let g = match mapped {
            Some(g) => g,
            None => {
                skipped += 1;
                continue;
            }
        };
        for (val, grad) in [(q[[i, g]], &mut dq), (qs[[i, g]], &mut dqs)] {
            if val < eps {
                loss = loss - eps.ln();
            } else {
                loss = loss - val.ln();
                grad[[i, g]] = grad[[i, g]] - inv_d / val;
            }
        }
    }
    let mut dpw = Array2::<T>::zeros(p_weak_support.raw_dim());
    let mut dps = Array2::<T>::zeros(p_strong_support.raw_dim());
    for i in 0..d {
        for (k, &g) in groups.partition.iter().enumerate() {
            dpw[[i, k]] = dq[[i, g]];
            dps[[i, k]] = dqs[[i, g]];
        }
    }
    (loss * inv_d, dpw, dps, skipped)
}

/// Γ(c_k): for each prototype, the samples having it among their top-`top_k`
/// assignment probabilities (ties broken toward the lower prototype index).
pub fn association_sets<T: Real>(p: &Array2<T>, top_k: usize) -> Vec<Vec<usize>> {
    let (m, w) = p.dim();
    let mut gamma = vec![Vec::new(); w];
    let mut order: Vec<usize> = Vec::with_capacity(w);
    for i in 0..m {
        order.clear();
        order.extend(0..w);
        // Descending probability, ascending index on ties.
        order.sort_by(|&a, &b| {
            p[[i, b]]
                .partial_cmp(&p[[i, a]])
                .expect("assignments are finite")
                .then(a.cmp(&b))
        });
        for &k in order.iter().take(top_k.min(w)) {
            gamma[k].push(i);
        }
    }
    gamma
}

/// Jaccard similarity s_ij = |Γ_i ∩ Γ_j| / |Γ_i ∪ Γ_j|; both-empty → 0.
/// Association lists must be ascending (as produced by `association_sets`).
pub fn jaccard_matrix(gamma: &[Vec<usize>]) -> Array2<f64> {
    let w = gamma.len();
    let mut s = Array2::<f64>::zeros((w, w));
    for i in 0..w {
        for j in i..w {
            let (a, b) = (&gamma[i], &gamma[j]);
            if a.is_empty() && b.is_empty() {
                continue;
            }
            let mut inter = 0usize;
            let (mut x, mut y) = (0usize, 0usize);
            while x < a.len() && y < b.len() {
                match a[x].cmp(&b[y]) {
                    std::cmp::Ordering::Less => x += 1,
                    std::cmp::Ordering::Greater => y += 1,
                    std::cmp::Ordering::Equal => {
                        inter += 1;
                        x += 1;
                        y += 1;
                    }
                }
            }
            let union = a.len() + b.len() - inter;
            let sim = inter as f64 / union as f64;
            s[[i, j]] = sim;
            s[[j, i]] = sim;
        }
    }
    s
}

/// Full regroup step: top-3 association sets → Jaccard graph → Louvain.
/// The known_map of the result is empty; callers align it afterwards.
pub fn group_prototypes<T: Real>(
    p_weak: &Array2<T>,
    top_k: usize,
    resolution: f64,
) -> PrototypeGroups {
    let gamma = association_sets(p_weak, top_k);
    let s = jaccard_matrix(&gamma);
    let result = louvain(&s, resolution);
    PrototypeGroups {
        partition: result.labels,
        n_groups: result.n_groups,
        known_map: Vec::new(),
    }
}

/// Hungarian alignment of known classes to groups. `y_support` holds known
/// class positions (0-based); cost(class, group) = −mean support q^{(g)}.
pub fn match_known_groups<T: Real>(
    q_support: &Array2<T>,
    y_support: &[usize],
    n_classes: usize,
    groups: &PrototypeGroups,
) -> Vec<Option<usize>> {
    let ng = groups.n_groups;
    let mut sums = Array2::<f64>::zeros((n_classes, ng));
    let mut counts = vec![0usize; n_classes];
    for (i, &y) in y_support.iter().enumerate() {
        counts[y] += 1;
        for g in 0..ng {
            sums[[y, g]] += q_support[[i, g]].to_f64();
        }
    }
    let mut cost = Array2::<f64>::zeros((n_classes, ng));
    for c in 0..n_classes {
        for g in 0..ng {
            cost[[c, g]] = if counts[c] > 0 {
                -sums[[c, g]] / counts[c] as f64
            } else {
                0.0
            };
        }
    }
    min_cost_assignment(&cost)
}

/// Route rejected samples to discovered (non-known) groups by restricted
/// argmax over q. With no unknown groups at all, every sample falls back to
/// cluster 0 and the flag is raised.
pub fn discover<T: Real>(q: &Array2<T>, groups: &PrototypeGroups) -> (Vec<usize>, bool) {
    let unknown = groups.unknown_groups();
    if unknown.is_empty() {
        return (vec![0; q.nrows()], q.nrows() > 0);
    }
    let labels = q
        .outer_iter()
        .map(|row| {
            let mut best = unknown[0];
            for &g in &unknown[1..] {
                if row[g] > row[best] {
                    best = g;
                }
            }
            best
        })
        .collect();
    (labels, false)
}

/// The model's class-count estimate is simply the number of groups.
pub fn estimate_class_count(groups: &PrototypeGroups) -> usize {
    groups.n_groups
}
