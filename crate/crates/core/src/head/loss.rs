//! Segmentation losses, the prototype dispersion loss and their weighted sum.
//!
//! Predictions and targets are per-frame probability vectors of equal length.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{HpanError, Result};
use crate::matrix::Matrix;
use crate::pgam::{cosine_matrix, cosine_matrix_backward};
use crate::scalar::Scalar;

pub const PROB_CLAMP: f64 = 1e-7;

fn check_pair<T>(pred: &[Vec<T>], gt: &[Vec<T>]) -> Result<usize> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(HpanError::shape(format!(
            "{} predicted frames for {} targets",
            pred.len(),
            gt.len()
        )));
    }
    let mut n = 0;
    for (t, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.len() != g.len() {
            return Err(HpanError::shape(format!(
                "frame {t}: {} predictions for {} targets",
                p.len(),
                g.len()
            )));
        }
        n += p.len();
    }
    if n == 0 {
        return Err(HpanError::shape("no pixels to score"));
    }
    Ok(n)
}

/// Mean binary cross-entropy; predictions are clamped to `[1e-7, 1 - 1e-7]`.
pub fn ce_loss<T: Scalar>(pred: &[Vec<T>], gt: &[Vec<T>]) -> Result<T> {
    let n = check_pair(pred, gt)?;
    let lo = T::of(PROB_CLAMP);
    let hi = T::one() - lo;
    let mut total = T::zero();
    for (p, g) in pred.iter().zip(gt) {
        for (&yh, &y) in p.iter().zip(g) {
            let yh = yh.max(lo).min(hi);
            total -= y * yh.ln() + (T::one() - y) * (T::one() - yh).ln();
        }
    }
    Ok(total / T::of_usize(n))
}

/// Gradient of [`ce_loss`] with respect to the predictions; zero where the
/// clamp is active.
pub fn ce_loss_grad<T: Scalar>(pred: &[Vec<T>], gt: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
    let n = T::of_usize(check_pair(pred, gt)?);
    let lo = T::of(PROB_CLAMP);
    let hi = T::one() - lo;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            p.iter()
                .zip(g)
                .map(|(&yh, &y)| {
                    if yh < lo || yh > hi {
                        T::zero()
                    } else {
                        (-(y / yh) + (T::one() - y) / (T::one() - yh)) / n
                    }
                })
                .collect()
        })
        .collect())
}

/// One minus the mean per-frame soft IoU. A frame whose soft union is zero
/// scores IoU 1.
pub fn iou_loss<T: Scalar>(pred: &[Vec<T>], gt: &[Vec<T>]) -> Result<T> {
    check_pair(pred, gt)?;
    let mut sum = T::zero();
    for (p, g) in pred.iter().zip(gt) {
        let (inter, union) = soft_counts(p, g);
        sum += if union == T::zero() { T::one() } else { inter / union };
    }
    Ok(T::one() - sum / T::of_usize(pred.len()))
}

fn soft_counts<T: Scalar>(p: &[T], g: &[T]) -> (T, T) {
    let mut inter = T::zero();
    let mut union = T::zero();
    for (&yh, &y) in p.iter().zip(g) {
        inter += y * yh;
        union += y + yh - y * yh;
    }
    (inter, union)
}

pub fn iou_loss_grad<T: Scalar>(pred: &[Vec<T>], gt: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
    check_pair(pred, gt)?;
    let frames = T::of_usize(pred.len());
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let (inter, union) = soft_counts(p, g);
            if union == T::zero() {
                return vec![T::zero(); p.len()];
            }
            // d(I/U)/dyh = (y U - I (1 - y)) / U^2
            p.iter()
                .zip(g)
                .map(|(_, &y)| -(y * union - inter * (T::one() - y)) / (union * union) / frames)
                .collect()
        })
        .collect())
}

/// `lambda / (N (N - 1)) * sum_{i != j} cos(p_i, p_j)` over prototype rows.
pub fn proto_loss<T: Scalar>(prototypes: &Matrix<T>, lambda: T) -> Result<T> {
    let n = prototypes.rows();
    if n < 2 {
        return Err(HpanError::shape(format!(
            "prototype loss needs at least 2 prototypes, got {n}"
        )));
    }
    let s = cosine_matrix(prototypes, prototypes);
    let mut off = T::zero();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                off += s[(i, j)];
            }
        }
    }
    Ok(lambda * off / T::of_usize(n * (n - 1)))
}

pub fn proto_loss_grad<T: Scalar>(prototypes: &Matrix<T>, lambda: T) -> Result<Matrix<T>> {
    let n = prototypes.rows();
    if n < 2 {
        return Err(HpanError::shape(format!(
            "prototype loss needs at least 2 prototypes, got {n}"
        )));
    }
    let w = lambda / T::of_usize(n * (n - 1));
    let d_sim = Matrix::from_fn(n, n, |i, j| if i == j { T::zero() } else { w });
    let (mut a, b) = cosine_matrix_backward(prototypes, prototypes, &d_sim);
    a.add_assign(&b);
    Ok(a)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_iou: f64,
    pub lambda_proto: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ce: 5.0,
            lambda_iou: 1.0,
            lambda_proto: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda_ce, self.lambda_iou, self.lambda_proto]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(HpanError::Config(format!(
                "loss weights must be finite and >= 0, got {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub passed: bool,
    pub max_rel_err: f64,
}

/// Unweighted loss terms and their weighted total. `proto` is the prototype
/// loss at unit weight; the weight is applied once, in `total`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub iou: f64,
    pub proto: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub grad_check: BTreeMap<String, GradCheckEntry>,
}

pub fn total_loss(ce: f64, iou: f64, proto: f64, weights: &LossWeights) -> LossReport {
    LossReport {
        ce,
        iou,
        proto,
        total: weights.lambda_ce * ce + weights.lambda_iou * iou + weights.lambda_proto * proto,
        grad_check: BTreeMap::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::fd::{finite_diff_grad, max_rel_error};
    use crate::verify::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frames(data: &[&[f64]]) -> Vec<Vec<f64>> {
        data.iter().map(|f| f.to_vec()).collect()
    }

    #[test]
    fn ce_closed_forms() {
        let gt = frames(&[&[1.0, 0.0, 1.0, 0.0]]);
        assert!(ce_loss(&gt, &gt).unwrap() <= 1e-6);
        let half = frames(&[&[0.5; 4]]);
        assert!((ce_loss(&half, &gt).unwrap() - std::f64::consts::LN_2).abs() < 1e-6);
        let wrong = frames(&[&[0.0, 1.0, 0.0, 1.0]]);
        assert!((ce_loss(&wrong, &gt).unwrap() - 16.118).abs() < 1e-3);
    }

    #[test]
    fn iou_closed_forms() {
        let gt = frames(&[&[1.0, 1.0, 0.0, 0.0]]);
        assert_eq!(iou_loss(&gt, &gt).unwrap(), 0.0);
        assert_eq!(iou_loss(&frames(&[&[0.0, 0.0, 1.0, 1.0]]), &gt).unwrap(), 1.0);
        assert!((iou_loss(&frames(&[&[1.0; 4]]), &gt).unwrap() - 0.5).abs() < 1e-12);
        let empty = frames(&[&[0.0; 4]]);
        assert_eq!(iou_loss(&empty, &empty).unwrap(), 0.0);
    }

    #[test]
    fn proto_closed_forms() {
        let same = Matrix::from_fn(4, 3, |_, j| j as f64 + 1.0);
        assert!((proto_loss(&same, 1.0).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(proto_loss(&Matrix::<f64>::identity(3), 1.0).unwrap(), 0.0);
        let pm = Matrix::from_rows(&[vec![0.3, -2.0], vec![-0.3, 2.0]]).unwrap();
        assert!((proto_loss::<f64>(&pm, 1.0).unwrap() + 1.0).abs() < 1e-6);
        assert!(proto_loss(&Matrix::<f64>::zeros(1, 3), 1.0).is_err());
    }

    #[test]
    fn rotating_one_of_two_prototypes_lowers_the_loss() {
        let mut last = f64::INFINITY;
        for step in 0..=8 {
            let a = step as f64 * 0.35;
            let p = Matrix::from_rows(&[vec![1.0, 0.0], vec![a.cos(), a.sin()]]).unwrap();
            let l = proto_loss(&p, 1.0).unwrap();
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn weighted_total() {
        let r = total_loss(0.7, 0.5, 0.2, &LossWeights::default());
        assert!((r.total - 4.2).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &LossWeights::default()).total, 0.0);
        let w = LossWeights {
            lambda_ce: 0.0,
            lambda_iou: 0.0,
            lambda_proto: 1.0,
        };
        assert_eq!(total_loss(3.0, 0.7, 0.25, &w).total, 0.25);
        assert!(LossWeights { lambda_ce: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn shape_mismatch() {
        assert!(ce_loss(&frames(&[&[0.5]]), &frames(&[&[1.0, 0.0]])).is_err());
        assert!(iou_loss(&frames(&[&[0.5]]), &frames(&[&[1.0], &[0.0]])).is_err());
    }

    #[test]
    fn agree_with_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pred: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..10).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let gt: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..10).map(|_| rng.random_range(0..2) as f64).collect())
            .collect();
        assert!((ce_loss(&pred, &gt).unwrap() - oracle::ce_oracle(&pred, &gt)).abs() < 1e-12);
        assert!((iou_loss(&pred, &gt).unwrap() - oracle::iou_oracle(&pred, &gt)).abs() < 1e-12);
        let p = Matrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
        let rows: Vec<Vec<f64>> = p.row_iter().map(|r| r.to_vec()).collect();
        assert!((proto_loss(&p, 0.7).unwrap() - oracle::proto_oracle(&rows, 0.7)).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pred: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..6).map(|_| rng.random_range(0.05..0.95)).collect())
            .collect();
        let gt: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..6).map(|_| rng.random_range(0..2) as f64).collect())
            .collect();
        let flat: Vec<f64> = pred.iter().flatten().copied().collect();
        let unflat = |x: &[f64]| x.chunks(6).map(|c| c.to_vec()).collect::<Vec<_>>();
        let fd = finite_diff_grad(|x| ce_loss(&unflat(x), &gt).unwrap(), &flat, 1e-6).unwrap();
        let an: Vec<f64> = ce_loss_grad(&pred, &gt).unwrap().concat();
        assert!(max_rel_error(&an, &fd) < 1e-7);
        let fd = finite_diff_grad(|x| iou_loss(&unflat(x), &gt).unwrap(), &flat, 1e-6).unwrap();
        let an: Vec<f64> = iou_loss_grad(&pred, &gt).unwrap().concat();
        assert!(max_rel_error(&an, &fd) < 1e-7);
        let p = Matrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let fd = finite_diff_grad(
            |x| proto_loss(&Matrix::from_vec(4, 3, x.to_vec()).unwrap(), 0.6).unwrap(),
            p.as_slice(),
            1e-6,
        )
        .unwrap();
        assert!(max_rel_error(proto_loss_grad(&p, 0.6).unwrap().as_slice(), &fd) < 1e-7);
    }
}
