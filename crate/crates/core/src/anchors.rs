//! Class anchors in logit space: a frozen scaled-identity anchor matrix,
//! the open-set classification and class-anchor losses (with analytic
//! gradients w.r.t. the logit embeddings), the softmin anchor update used
//! during pre-training, and nearest-anchor classification.
//!
//! Anchors are never gradient-trained; row N−1 (the unknown anchor) is
//! never updated at all.

use ndarray::{Array1, Array2, ArrayView1};

use crate::{Error, Real, Result};

/// N anchors in an N-dimensional logit space, initialized to φ·I.
#[derive(Clone, Debug)]
pub struct AnchorSet<T: Real> {
    pub a: Array2<T>, // [N, N]
    pub phi: T,
}

/// Floor used when dividing by a distance or taking a log of a
/// probability-like quantity.
pub(crate) const EPS: f64 = 1e-12;

pub fn init_anchors<T: Real>(n: usize, phi: f64) -> Result<AnchorSet<T>> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 anchors (1 known class + unknown), got {}",
            n
        )));
    }
    if !(phi > 0.0) {
        return Err(Error::InvalidConfig(format!("anchor scale must be positive, got {phi}")));
    }
    let mut a = Array2::<T>::zeros((n, n));
    for i in 0..n {
        a[[i, i]] = T::from_f64(phi);
    }
    Ok(AnchorSet {
        a,
        phi: T::from_f64(phi),
    })
}

impl<T: Real> AnchorSet<T> {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn unknown_index(&self) -> usize {
        self.n() - 1
    }
}

/// Euclidean distances from one embedding to every anchor.
pub fn distances<T: Real>(z: ArrayView1<T>, anchors: &AnchorSet<T>) -> Result<Array1<T>> {
    let n = anchors.n();
    if z.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "embedding has {} dims, anchors live in {}",
            z.len(),
            n
        )));
    }
    let mut d = Array1::<T>::zeros(n);
    for (j, row) in anchors.a.outer_iter().enumerate() {
        let mut acc = T::zero();
        for (zi, ai) in z.iter().zip(row.iter()) {
            let diff = *zi - *ai;
            acc = acc + diff * diff;
        }
        d[j] = acc.sqrt();
    }
    Ok(d)
}

/// Distance matrix [M, N] for a batch of embeddings.
pub fn distances_batch<T: Real>(z: &Array2<T>, anchors: &AnchorSet<T>) -> Result<Array2<T>> {
    let m = z.nrows();
    let n = anchors.n();
    let mut d = Array2::<T>::zeros((m, n));
    for (i, row) in z.outer_iter().enumerate() {
        d.row_mut(i).assign(&distances(row, anchors)?);
    }
    Ok(d)
}

fn check_labels<T: Real>(y: &[usize], n: usize, z: &Array2<T>) -> Result<()> {
    if y.len() != z.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} embeddings",
            y.len(),
            z.nrows()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&label| label >= n) {
        return Err(Error::InvalidConfig(format!(
            "label {} out of anchor range 0..{}",
            bad, n
        )));
    }
    if z.is_empty() && y.is_empty() {
        return Err(Error::EmptySampleSet("anchor loss on empty batch".into()));
    }
    Ok(())
}

/// Open-set classification loss: mean over the batch of
/// −log softmax(−d_i)_{y_i}, with its gradient w.r.t. the embeddings.
pub fn loss_osc<T: Real>(
    z: &Array2<T>,
    anchors: &AnchorSet<T>,
    y: &[usize],
) -> Result<(T, Array2<T>)> {
    let n = anchors.n();
    check_labels(y, n, z)?;
    let m = z.nrows();
    let d = distances_batch(z, anchors)?;
    let inv_m = T::from_f64(1.0 / m as f64);
    let mut loss = T::zero();
    let mut dz = Array2::<T>::zeros(z.raw_dim());
    for i in 0..m {
        let di = d.row(i);
        // softmin(d) = softmax(−d); shift by the min distance for stability.
        let dmin = di.iter().cloned().fold(T::infinity(), |a, b| if b < a { b } else { a });
        let mut denom = T::zero();
        let mut s = Array1::<T>::zeros(n);
        for j in 0..n {
            let e = (dmin - di[j]).exp();
            s[j] = e;
            denom = denom + e;
        }
        s.mapv_inplace(|v| v / denom);
        // −log s_y = d_y − dmin + log denom
        loss = loss + (di[y[i]] - dmin) + denom.ln();

        // ∂L_i/∂d_j = (δ_{jy} − s_j); chain through d_j = ‖z − a_j‖.
        for j in 0..n {
            let mut g = -s[j];
            if j == y[i] {
                g = g + T::one();
            }
            let g = g * inv_m;
            let dij = di[j];
            if dij.to_f64() > EPS {
                let scale = g / dij;
                let aj = anchors.a.row(j);
                for (k, zk) in z.row(i).iter().enumerate() {
                    dz[[i, k]] = dz[[i, k]] + scale * (*zk - aj[k]);
                }
            }
        }
    }
    Ok((loss * inv_m, dz))
}

/// Class-anchor loss: mean over the batch of
/// log(1 + Σ_{j≠y} e^{d_y − d_j}) + γ·d_y, with its embedding gradient.
pub fn loss_ca<T: Real>(
    z: &Array2<T>,
    anchors: &AnchorSet<T>,
    y: &[usize],
    gamma: f64,
) -> Result<(T, Array2<T>)> {
    let n = anchors.n();
    check_labels(y, n, z)?;
    let m = z.nrows();
    let d = distances_batch(z, anchors)?;
    let gamma_t = T::from_f64(gamma);
    let inv_m = T::from_f64(1.0 / m as f64);
    let mut loss = T::zero();
    let mut dz = Array2::<T>::zeros(z.raw_dim());
    for i in 0..m {
        let di = d.row(i);
        let yi = y[i];
        let dy = di[yi];
        // log(1 + Σ_{j≠y} e^{dy−dj}) via a log-sum-exp over {0} ∪ {dy−dj}.
        let mut shift = T::zero();
        for j in 0..n {
            if j != yi && dy - di[j] > shift {
                shift = dy - di[j];
            }
        }
        let mut total = (T::zero() - shift).exp(); // the "1 +" term
        let mut terms = Array1::<T>::zeros(n);
        for j in 0..n {
            if j == yi {
                continue;
            }
            let e = (dy - di[j] - shift).exp();
            terms[j] = e;
            total = total + e;
        }
        loss = loss + shift + total.ln() + gamma_t * dy;

        // ∂L/∂d_y = Σ_{j≠y} e^{dy−dj}/(1+Σ) + γ; ∂L/∂d_j = −e^{dy−dj}/(1+Σ).
        let mut grad_dy = gamma_t;
        for j in 0..n {
            if j == yi {
                continue;
            }
            grad_dy = grad_dy + terms[j] / total;
        }
        for j in 0..n {
            let g = if j == yi { grad_dy } else { T::zero() - terms[j] / total } * inv_m;
            let dij = di[j];
            if dij.to_f64() > EPS {
                let scale = g / dij;
                let aj = anchors.a.row(j);
                for (k, zk) in z.row(i).iter().enumerate() {
                    dz[[i, k]] = dz[[i, k]] + scale * (*zk - aj[k]);
                }
            }
        }
    }
    Ok((loss * inv_m, dz))
}

/// Softmin anchor update (pre-training): the class anchor becomes the mean
/// over the class's samples of d_i ∘ (1 − softmin(d_i)).
pub fn update_anchor<T: Real>(class_distances: &Array2<T>) -> Result<Array1<T>> {
    let m = class_distances.nrows();
    if m == 0 {
        return Err(Error::EmptySampleSet("anchor update with no class samples".into()));
    }
    let n = class_distances.ncols();
    let mut acc = Array1::<T>::zeros(n);
    for i in 0..m {
        let di = class_distances.row(i);
        let dmin = di.iter().cloned().fold(T::infinity(), |a, b| if b < a { b } else { a });
        let mut denom = T::zero();
        let mut s = Array1::<T>::zeros(n);
        for j in 0..n {
            let e = (dmin - di[j]).exp();
            s[j] = e;
            denom = denom + e;
        }
        for j in 0..n {
            acc[j] = acc[j] + di[j] * (T::one() - s[j] / denom);
        }
    }
    let inv_m = T::from_f64(1.0 / m as f64);
    Ok(acc.mapv(|v| v * inv_m))
}

/// Apply the softmin update to every known-class anchor given per-class
/// batches of distance vectors. The unknown anchor row is left untouched.
pub fn update_known_anchors<T: Real>(
    anchors: &mut AnchorSet<T>,
    per_class: &[(usize, Array2<T>)],
) -> Result<()> {
    let unknown = anchors.unknown_index();
    for (anchor_idx, dists) in per_class {
        if *anchor_idx >= unknown {
            return Err(Error::InvalidConfig(format!(
                "anchor update targets row {} but only rows 0..{} are known classes",
                anchor_idx, unknown
            )));
        }
        let new_row = update_anchor(dists)?;
        anchors.a.row_mut(*anchor_idx).assign(&new_row);
    }
    Ok(())
}

/// Nearest-anchor classification (0-based anchor index). Returning
/// `anchors.unknown_index()` means "reject: route to discovery". Ties keep
/// the smallest index, so a tie against the unknown anchor stays known.
pub fn classify<T: Real>(z: ArrayView1<T>, anchors: &AnchorSet<T>) -> Result<usize> {
    let d = distances(z, anchors)?;
    let mut best = 0usize;
    for j in 1..d.len() {
        if d[j] < d[best] {
            best = j;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{arr2, Axis};

    #[test]
    fn init_is_scaled_identity() {
        let anchors = init_anchors::<f64>(3, 10.0).unwrap();
        assert_eq!(anchors.a.row(0).to_vec(), vec![10.0, 0.0, 0.0]);
        assert_eq!(anchors.a.row(1).to_vec(), vec![0.0, 10.0, 0.0]);
        assert_eq!(anchors.a.row(2).to_vec(), vec![0.0, 0.0, 10.0]);

        let id = init_anchors::<f64>(2, 1.0).unwrap();
        assert_eq!(id.a, arr2(&[[1.0, 0.0], [0.0, 1.0]]));

        // Pairwise anchor distance φ√2.
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let dij = distances(anchors.a.row(i), &anchors).unwrap()[j];
                    assert_relative_eq!(dij, 10.0 * 2.0f64.sqrt(), epsilon = 1e-12);
                }
            }
        }

        assert!(init_anchors::<f64>(1, 10.0).is_err());
        assert!(init_anchors::<f64>(3, 0.0).is_err());
        assert!(init_anchors::<f64>(3, -1.0).is_err());
    }

    #[test]
    fn distance_examples() {
        let anchors = init_anchors::<f64>(3, 10.0).unwrap();
        // On-anchor: [0, φ√2, φ√2].
        let d = distances(anchors.a.row(1), &anchors).unwrap();
        assert_relative_eq!(d[1], 0.0);
        assert_relative_eq!(d[0], 10.0 * 2.0f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(d[2], 10.0 * 2.0f64.sqrt(), epsilon = 1e-12);

        // Origin: all φ.
        let z = Array1::<f64>::zeros(3);
        let d = distances(z.view(), &anchors).unwrap();
        assert!(d.iter().all(|&v| (v - 10.0).abs() < 1e-12));

        // N=2, φ=10, z=[5,0] → [5, √125].
        let anchors2 = init_anchors::<f64>(2, 10.0).unwrap();
        let z = ndarray::arr1(&[5.0, 0.0]);
        let d = distances(z.view(), &anchors2).unwrap();
        assert_relative_eq!(d[0], 5.0, epsilon = 1e-12);
        assert_relative_eq!(d[1], 125.0f64.sqrt(), epsilon = 1e-12);
        assert!((d[1] - 11.1803).abs() < 1e-4);

        // Dimension mismatch is an error.
        let z = ndarray::arr1(&[1.0, 2.0, 3.0]);
        assert!(distances(z.view(), &anchors2).is_err());
    }

    #[test]
    fn loss_osc_oracle_values() {
        let anchors = init_anchors::<f64>(3, 10.0).unwrap();
        // z on anchor 0 → d = [0, φ√2, φ√2] ≈ [0, 14.1421, 14.1421].
        let z = anchors.a.row(0).to_owned().insert_axis(Axis(0));
        let (loss, _) = loss_osc(&z, &anchors, &[0]).unwrap();
        let expected = (1.0 + 2.0 * (-10.0 * 2.0f64.sqrt()).exp()).ln();
        assert_relative_eq!(loss, expected, epsilon = 1e-12);
        assert!((loss - 1.445e-6).abs() < 1e-8);

        // All-equal distances, N=4 → log 4 (place z at the center).
        let anchors4 = init_anchors::<f64>(4, 10.0).unwrap();
        let z = Array2::<f64>::from_elem((1, 4), 0.0);
        let (loss, _) = loss_osc(&z, &anchors4, &[2]).unwrap();
        assert_relative_eq!(loss, 4.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn loss_osc_is_permutation_invariant() {
        let anchors = init_anchors::<f64>(4, 7.0).unwrap();
        let z = arr2(&[[1.0, -2.0, 0.5, 3.0], [0.0, 1.0, 2.0, -1.0]]);
        let (base, _) = loss_osc(&z, &anchors, &[1, 3]).unwrap();
        // Swap coordinates 1 and 3 everywhere (anchors are symmetric).
        let mut z2 = z.clone();
        z2.swap([0, 1], [0, 3]);
        z2.swap([1, 1], [1, 3]);
        let (permuted, _) = loss_osc(&z2, &anchors, &[3, 1]).unwrap();
        assert_relative_eq!(base, permuted, epsilon = 1e-12);
    }

    #[test]
    fn loss_ca_oracle_values() {
        // On-anchor: term1 = log(1 + (N−1)e^{−φ√2}), term2 = 0.
        let anchors = init_anchors::<f64>(3, 10.0).unwrap();
        let z = anchors.a.row(0).to_owned().insert_axis(Axis(0));
        let (loss, _) = loss_ca(&z, &anchors, &[0], 0.8).unwrap();
        let expected = (1.0 + 2.0 * (-10.0 * 2.0f64.sqrt()).exp()).ln();
        assert_relative_eq!(loss, expected, epsilon = 1e-12);
        assert!((loss - 1.445e-6).abs() < 1e-8);

        // γ=0, all distances equal → log N.
        let anchors4 = init_anchors::<f64>(4, 10.0).unwrap();
        let z = Array2::<f64>::zeros((1, 4));
        let (loss, _) = loss_ca(&z, &anchors4, &[1], 0.0).unwrap();
        assert_relative_eq!(loss, 4.0f64.ln(), epsilon = 1e-12);

        // Larger γ strictly increases the loss when z ≠ a_y.
        let z = arr2(&[[1.0, 2.0, 3.0, 4.0]]);
        let (lo, _) = loss_ca(&z, &anchors4, &[0], 0.1).unwrap();
        let (hi, _) = loss_ca(&z, &anchors4, &[0], 0.9).unwrap();
        assert!(hi > lo);
    }

    #[test]
    fn loss_ca_lower_bound() {
        let anchors = init_anchors::<f64>(3, 5.0).unwrap();
        let z = arr2(&[[1.0, -1.0, 2.0], [4.0, 0.0, 1.0]]);
        let gamma = 0.8;
        let (loss, _) = loss_ca(&z, &anchors, &[0, 2], gamma).unwrap();
        let d = distances_batch(&z, &anchors).unwrap();
        let bound = gamma * (d[[0, 0]] + d[[1, 2]]) / 2.0;
        assert!(loss >= bound);
        assert!(loss >= 0.0);
    }

    #[test]
    fn update_anchor_examples() {
        // d = [0, 20]: softmin ≈ [1, 0] so the update ≈ [0, 20].
        let d = arr2(&[[0.0, 20.0]]);
        let a = update_anchor::<f64>(&d).unwrap();
        assert!((a[0] - 0.0).abs() < 1e-6);
        assert!((a[1] - 20.0).abs() < 1e-6);

        // Uniform [φ, φ] → [φ/2, φ/2].
        let d = arr2(&[[10.0, 10.0]]);
        let a = update_anchor::<f64>(&d).unwrap();
        assert_relative_eq!(a[0], 5.0, epsilon = 1e-12);
        assert_relative_eq!(a[1], 5.0, epsilon = 1e-12);

        // Mean idempotence: two identical samples = one sample.
        let one = arr2(&[[3.0, 1.0, 4.0]]);
        let two = arr2(&[[3.0, 1.0, 4.0], [3.0, 1.0, 4.0]]);
        let ua = update_anchor::<f64>(&one).unwrap();
        let ub = update_anchor::<f64>(&two).unwrap();
        for (x, y) in ua.iter().zip(ub.iter()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }

        // Non-negative output.
        assert!(ua.iter().all(|&v| v >= 0.0));

        // Empty set errors.
        let empty = Array2::<f64>::zeros((0, 3));
        assert!(update_anchor(&empty).is_err());
    }

    #[test]
    fn update_known_anchors_never_touches_unknown_row() {
        let mut anchors = init_anchors::<f64>(3, 10.0).unwrap();
        let before_unknown = anchors.a.row(2).to_owned();
        let d0 = arr2(&[[1.0, 8.0, 9.0]]);
        let d1 = arr2(&[[7.0, 0.5, 9.0]]);
        update_known_anchors(&mut anchors, &[(0, d0), (1, d1)]).unwrap();
        assert_eq!(anchors.a.row(2).to_owned(), before_unknown);
        assert!(anchors.a.row(0)[0] != 10.0); // row 0 did move

        // Updating the unknown row is rejected.
        let d2 = arr2(&[[1.0, 2.0, 3.0]]);
        assert!(update_known_anchors(&mut anchors, &[(2, d2)]).is_err());
    }

    #[test]
    fn classify_examples_and_tie_rule() {
        let anchors = init_anchors::<f64>(4, 10.0).unwrap();
        assert_eq!(classify(anchors.a.row(1), &anchors).unwrap(), 1);

        // Equidistant to anchor 0 and the unknown anchor → class 0.
        let mut z = Array1::<f64>::zeros(4);
        z[0] = 5.0;
        z[3] = 5.0;
        assert_eq!(classify(z.view(), &anchors).unwrap(), 0);

        // On the unknown anchor → rejected.
        let mut z = Array1::<f64>::zeros(4);
        z[3] = 10.0;
        assert_eq!(classify(z.view(), &anchors).unwrap(), 3);
        assert_eq!(anchors.unknown_index(), 3);
    }
}
