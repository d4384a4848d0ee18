//! Prototype sets and the clustering that produces the raw ones.

use serde::{Deserialize, Serialize};

use super::kmeans::kmeans;
use crate::error::{HpanError, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    SupportRaw,
    QueryRaw,
    SupportEnhanced,
    QueryEnhanced,
    Holistic,
}

/// `N x C` prototypes with `N = n_per_unit * units` (units are support images
/// or query frames).
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet<T> {
    pub prototypes: Matrix<T>,
    pub origin: Origin,
    pub n_per_unit: usize,
    /// Clustering had fewer distinct points than centroids somewhere.
    pub duplicated: bool,
}

impl<T: Scalar> PrototypeSet<T> {
    pub fn new(prototypes: Matrix<T>, origin: Origin, n_per_unit: usize, units: usize) -> Result<Self> {
        if prototypes.rows() != n_per_unit * units {
            return Err(HpanError::Invariant(format!(
                "{:?} prototype set has {} rows, expected {n_per_unit} x {units}",
                origin,
                prototypes.rows()
            )));
        }
        if !prototypes.is_finite() {
            return Err(HpanError::Invariant("prototype rows must be finite".into()));
        }
        Ok(PrototypeSet {
            prototypes,
            origin,
            n_per_unit,
            duplicated: false,
        })
    }

    pub fn len(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.rows() == 0
    }

    pub fn channels(&self) -> usize {
        self.prototypes.cols()
    }

    /// Number of images or frames the set was built from.
    pub fn units(&self) -> usize {
        self.len().checked_div(self.n_per_unit).unwrap_or(0)
    }
}

/// Per-unit seed so units cluster independently but reproducibly.
pub(crate) fn unit_seed(seed: u64, unit: usize) -> u64 {
    seed ^ (unit as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Clusters each support image's foreground tokens into `n_p` prototypes.
///
/// `fg_tokens[k]` are the masked `HW x C` tokens of image `k` and
/// `masks[k]` its per-pixel weights; pixels with nonzero weight are the
/// foreground.
pub fn cluster_support_prototypes<T: Scalar>(
    fg_tokens: &[Matrix<T>],
    masks: &[Vec<T>],
    n_p: usize,
    seed: u64,
) -> Result<PrototypeSet<T>> {
    if fg_tokens.len() != masks.len() || fg_tokens.is_empty() {
        return Err(HpanError::shape("need one mask per support image and K >= 1"));
    }
    let mut parts = Vec::with_capacity(fg_tokens.len());
    let mut duplicated = false;
    for (k, (tokens, mask)) in fg_tokens.iter().zip(masks).enumerate() {
        let idx: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != T::zero())
            .map(|(p, _)| p)
            .collect();
        if idx.is_empty() {
            return Err(HpanError::EmptySupportMask { index: k, level: "l3" });
        }
        let r = kmeans(&tokens.select_rows(&idx), n_p, unit_seed(seed, k))?;
        duplicated |= r.duplicated;
        parts.push(r.centroids);
    }
    let mut set = PrototypeSet::new(Matrix::vstack(&parts)?, Origin::SupportRaw, n_p, fg_tokens.len())?;
    set.duplicated = duplicated;
    Ok(set)
}

/// One k-means run with `k = n_p * T` over the pooled foreground of all
/// frames; foreground pixels are those with pseudo-mask weight `>= tau`.
pub fn cluster_query_prototypes<T: Scalar>(
    fg_tokens: &[Matrix<T>],
    masks: &[Vec<T>],
    n_p: usize,
    tau: T,
    seed: u64,
) -> Result<PrototypeSet<T>> {
    if fg_tokens.len() != masks.len() || fg_tokens.is_empty() {
        return Err(HpanError::shape("need one mask per query frame and T >= 1"));
    }
    let mut pooled = Vec::with_capacity(fg_tokens.len());
    for (tokens, mask) in fg_tokens.iter().zip(masks) {
        let idx: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m >= tau)
            .map(|(p, _)| p)
            .collect();
        pooled.push(tokens.select_rows(&idx));
    }
    let points = Matrix::vstack(&pooled)?;
    if points.rows() == 0 {
        return Err(HpanError::NoQueryForeground {
            tau: tau.to_f64_lossy(),
        });
    }
    let t = fg_tokens.len();
    let r = kmeans(&points, n_p * t, seed)?;
    let mut set = PrototypeSet::new(r.centroids, Origin::QueryRaw, n_p, t)?;
    set.duplicated = r.duplicated;
    Ok(set)
}
