//! Loss functions with analytic gradients.

use crate::nn::Scalar;
use ndarray::Array2;

/// Weighted L1 control loss per sample, averaged over the batch:
/// `w0*|db| + w1*|dg| + w2*|ds|`. Returns (loss, d pred).
pub fn control_loss<T: Scalar>(pred: &Array2<T>, gt: &Array2<T>, w: [f64; 3]) -> (T, Array2<T>) {
    assert_eq!(pred.dim(), gt.dim());
    assert_eq!(pred.ncols(), 3);
    let n = pred.nrows();
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut loss = T::zero();
    let mut grad = Array2::<T>::zeros(pred.dim());
    for i in 0..n {
        for k in 0..3 {
            let wk = T::from_f64(w[k]);
            let d = pred[(i, k)] - gt[(i, k)];
            loss += wk * d.abs() * inv_n;
            grad[(i, k)] = wk * inv_n * T::from_f64(sign(d.to_f64()));
        }
    }
    (loss, grad)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Squared-Euclidean embedding mimicking loss, averaged over the batch:
/// `w0*||chi_hat - chi||^2 + w1*||xi_hat - xi||^2`.
/// Rows where `mask` is false contribute nothing (unannotated frames).
/// Returns (loss, d chi_hat, d xi_hat).
pub fn mimic_loss<T: Scalar>(
    chi_hat: &Array2<T>,
    chi: &Array2<T>,
    xi_hat: &Array2<T>,
    xi: &Array2<T>,
    w: [f64; 2],
    mask: &[bool],
) -> (T, Array2<T>, Array2<T>) {
    assert_eq!(chi_hat.dim(), chi.dim());
    assert_eq!(xi_hat.dim(), xi.dim());
    let n = chi_hat.nrows();
    assert_eq!(mask.len(), n);
    let inv_n = T::from_f64(1.0 / n as f64);
    let w0 = T::from_f64(w[0]);
    let w1 = T::from_f64(w[1]);
    let two = T::from_f64(2.0);
    let mut loss = T::zero();
    let mut dchi = Array2::<T>::zeros(chi_hat.dim());
    let mut dxi = Array2::<T>::zeros(xi_hat.dim());
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        for k in 0..chi_hat.ncols() {
            let d = chi_hat[(i, k)] - chi[(i, k)];
            loss += w0 * d * d * inv_n;
            dchi[(i, k)] = two * w0 * d * inv_n;
        }
        for k in 0..xi_hat.ncols() {
            let d = xi_hat[(i, k)] - xi[(i, k)];
            loss += w1 * d * d * inv_n;
            dxi[(i, k)] = two * w1 * d * inv_n;
        }
    }
    (loss, dchi, dxi)
}

/// Plain L1 regression loss (summed over dims, averaged over the batch);
/// used for the intention estimation targets.
pub fn l1_loss<T: Scalar>(pred: &Array2<T>, gt: &Array2<T>) -> (T, Array2<T>) {
    assert_eq!(pred.dim(), gt.dim());
    let n = pred.nrows();
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut loss = T::zero();
    let mut grad = Array2::<T>::zeros(pred.dim());
    for ((i, k), &p) in pred.indexed_iter() {
        let d = p - gt[(i, k)];
        loss += d.abs() * inv_n;
        grad[(i, k)] = inv_n * T::from_f64(sign(d.to_f64()));
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn control_loss_identity_is_zero() {
        let p = array![[0.3, 0.5, -0.2]];
        let (l, g) = control_loss::<f64>(&p, &p, [1.0, 1.0, 2.0]);
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn control_loss_direct_arithmetic() {
        let pred = array![[0.2, 0.5, -0.1]];
        let gt = array![[0.0, 0.6, -0.1]];
        let (l, _) = control_loss::<f64>(&pred, &gt, [1.0, 1.0, 1.0]);
        assert!((l - 0.3).abs() < 1e-12);
    }

    #[test]
    fn control_loss_homogeneous_in_weights() {
        let pred = array![[0.2, 0.5, -0.1], [0.9, 0.0, 0.4]];
        let gt = array![[0.0, 0.6, -0.3], [0.5, 0.2, 0.4]];
        let (l1, _) = control_loss::<f64>(&pred, &gt, [1.0, 1.0, 2.0]);
        let (l3, _) = control_loss::<f64>(&pred, &gt, [3.0, 3.0, 6.0]);
        assert!((l3 - 3.0 * l1).abs() < 1e-12);
    }

    #[test]
    fn mimic_loss_zero_for_equal_embeddings() {
        let chi = Array2::<f64>::from_elem((2, 8), 0.7);
        let xi = Array2::<f64>::from_elem((2, 4), -0.2);
        let (l, d1, d2) = mimic_loss(&chi, &chi, &xi, &xi, [0.03, 0.03], &[true, true]);
        assert_eq!(l, 0.0);
        assert!(d1.iter().chain(d2.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn mimic_loss_unit_vector_gives_weight() {
        // chi_hat - chi is a unit vector, xi_hat == xi: loss = w0 = 0.03.
        let mut chi_hat = Array2::<f64>::zeros((1, 512));
        chi_hat[(0, 17)] = 1.0;
        let chi = Array2::<f64>::zeros((1, 512));
        let xi = Array2::<f64>::from_elem((1, 128), 0.4);
        let (l, _, _) = mimic_loss(&chi_hat, &chi, &xi, &xi, [0.03, 0.03], &[true]);
        assert!((l - 0.03).abs() < 1e-12);
    }

    #[test]
    fn mimic_loss_seg_only_when_intent_weight_zero() {
        let chi_hat = Array2::<f64>::from_elem((1, 4), 1.0);
        let chi = Array2::<f64>::zeros((1, 4));
        let xi_hat = Array2::<f64>::from_elem((1, 2), 5.0);
        let xi = Array2::<f64>::zeros((1, 2));
        let (l, _, dxi) = mimic_loss(&chi_hat, &chi, &xi_hat, &xi, [0.03, 0.0], &[true]);
        assert!((l - 0.12).abs() < 1e-12, "only the seg term contributes");
        assert!(dxi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mimic_loss_respects_annotation_mask() {
        let chi_hat = Array2::<f64>::from_elem((2, 4), 1.0);
        let chi = Array2::<f64>::zeros((2, 4));
        let xi = Array2::<f64>::zeros((2, 2));
        let (l, d, _) = mimic_loss(&chi_hat, &chi, &xi, &xi, [1.0, 1.0], &[true, false]);
        assert!((l - 2.0).abs() < 1e-12, "only row 0 counts, averaged over batch of 2");
        assert!(d.row(1).iter().all(|&v| v == 0.0));
    }
}
