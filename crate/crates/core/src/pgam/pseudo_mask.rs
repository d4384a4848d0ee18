//! Query pseudo-masks from support foreground similarity.

use super::cosine::cosine_matrix;
use crate::episode::{resample_mask, FeatureMap, Mask, ResampleMode};
use crate::error::{HpanError, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Support masks resampled (nearest) to the grid of `support_l4`.
pub fn masks_at_level(support_l4: &[FeatureMap], masks: &[Mask]) -> Result<Vec<Mask>> {
    support_l4
        .iter()
        .zip(masks)
        .map(|(f, m)| resample_mask(m, f.height, f.width, ResampleMode::Nearest))
        .collect()
}

/// Raw similarity `max_{i,k} d(f~s_{i,k}, f^q_j)` per query pixel, before
/// normalisation. Only support pixels with nonzero mask weight take part.
pub fn max_support_similarity<T: Scalar>(
    query_l4: &[FeatureMap],
    support_l4: &[FeatureMap],
    support_masks_l4: &[Mask],
) -> Result<Vec<Vec<T>>> {
    if support_l4.len() != support_masks_l4.len() {
        return Err(HpanError::shape("one mask per support image required"));
    }
    let mut fg_rows: Vec<Matrix<T>> = Vec::with_capacity(support_l4.len());
    for (k, (f, m)) in support_l4.iter().zip(support_masks_l4).enumerate() {
        if (m.height, m.width) != (f.height, f.width) {
            return Err(HpanError::shape(format!(
                "support mask {k} is {}x{}, features are {}x{}",
                m.height, m.width, f.height, f.width
            )));
        }
        let tokens = f.tokens::<T>();
        let idx: Vec<usize> = (0..f.pixels()).filter(|&p| m.data[p] > 0.0).collect();
        if idx.is_empty() {
            return Err(HpanError::EmptySupportMask { index: k, level: "l4" });
        }
        let mut rows = tokens.select_rows(&idx);
        for (r, &p) in idx.iter().enumerate() {
            let w = T::of(m.data[p] as f64);
            rows.row_mut(r).iter_mut().for_each(|v| *v *= w);
        }
        fg_rows.push(rows);
    }
    let support = Matrix::vstack(&fg_rows)?;
    query_l4
        .iter()
        .map(|q| {
            if q.channels != support.cols() {
                return Err(HpanError::shape("query and support channel counts differ"));
            }
            let sim = cosine_matrix(&q.tokens::<T>(), &support);
            Ok(sim
                .row_iter()
                .map(|r| r.iter().copied().fold(T::neg_infinity(), T::max))
                .collect())
        })
        .collect()
}

/// Per-frame min-max normalisation. A frame with `max == min` carries no
/// localisation evidence and maps to all zeros.
pub fn min_max_normalize<T: Scalar>(raw: &[T]) -> Vec<T> {
    let lo = raw.iter().copied().fold(T::infinity(), T::min);
    let hi = raw.iter().copied().fold(T::neg_infinity(), T::max);
    let range = hi - lo;
    if !(range > T::zero()) {
        return vec![T::zero(); raw.len()];
    }
    raw.iter().map(|&v| (v - lo) / range).collect()
}

/// Pseudo-masks for every query frame at l4 resolution.
///
/// `support_masks_l4` must already match the l4 grid; see [`masks_at_level`].
pub fn compute_pseudo_masks<T: Scalar>(
    query_l4: &[FeatureMap],
    support_l4: &[FeatureMap],
    support_masks_l4: &[Mask],
) -> Result<Vec<Mask>> {
    let raw = max_support_similarity::<T>(query_l4, support_l4, support_masks_l4)?;
    query_l4
        .iter()
        .zip(raw)
        .map(|(q, r)| {
            let norm = min_max_normalize(&r);
            Mask::new(q.height, q.width, norm.iter().map(|v| v.to_f32_lossy()).collect())
        })
        .collect()
}
