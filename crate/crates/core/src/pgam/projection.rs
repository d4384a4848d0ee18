//! 1x1 projection of l3 features followed by per-pixel mask weighting.

use rand::Rng;

use crate::episode::{FeatureMap, Level, Mask};
use crate::error::{HpanError, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// `C_in x C` weight and `C` bias of the 1x1 convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ProjectionParams<T> {
    pub fn identity(c: usize) -> Self {
        ProjectionParams {
            weight: Matrix::identity(c),
            bias: vec![T::zero(); c],
        }
    }

    /// Uniform `[-1/sqrt(C), 1/sqrt(C)]` weight, zero bias.
    pub fn init(c_in: usize, c: usize, rng: &mut impl Rng) -> Self {
        ProjectionParams {
            weight: crate::uniform_init(c_in, c, c, rng),
            bias: vec![T::zero(); c],
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn c_out(&self) -> usize {
        self.weight.cols()
    }
}

/// Gradients of the projection parameters and its input tokens.
#[derive(Debug, Clone)]
pub struct ProjectionGrads<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
    pub input: Matrix<T>,
}

/// `(x W + b) * m` row by row; `tokens` is `HW x C_in`, `mask` has `HW` weights.
pub fn project_tokens<T: Scalar>(tokens: &Matrix<T>, mask: &[T], params: &ProjectionParams<T>) -> Result<Matrix<T>> {
    if tokens.cols() != params.c_in() || params.bias.len() != params.c_out() {
        return Err(HpanError::shape(format!(
            "projection expects {} input channels, got {}",
            params.c_in(),
            tokens.cols()
        )));
    }
    if mask.len() != tokens.rows() {
        return Err(HpanError::shape(format!(
            "{} mask weights for {} pixels",
            mask.len(),
            tokens.rows()
        )));
    }
    let mut out = tokens.matmul(&params.weight);
    for (p, &m) in mask.iter().enumerate() {
        for (o, &b) in out.row_mut(p).iter_mut().zip(&params.bias) {
            *o = if m == T::zero() { T::zero() } else { (*o + b) * m };
        }
    }
    Ok(out)
}

pub fn project_tokens_backward<T: Scalar>(
    tokens: &Matrix<T>,
    mask: &[T],
    params: &ProjectionParams<T>,
    d_out: &Matrix<T>,
) -> ProjectionGrads<T> {
    let mut d_pre = d_out.clone();
    for (p, &m) in mask.iter().enumerate() {
        d_pre.row_mut(p).iter_mut().for_each(|g| *g *= m);
    }
    let mut bias = vec![T::zero(); params.c_out()];
    for r in d_pre.row_iter() {
        for (b, &g) in bias.iter_mut().zip(r) {
            *b += g;
        }
    }
    ProjectionGrads {
        weight: tokens.t_matmul(&d_pre),
        bias,
        input: d_pre.matmul_t(&params.weight),
    }
}

/// Feature-map form: projects `f` and zeroes pixels where `mask` is 0.
pub fn project_and_mask<T: Scalar>(f: &FeatureMap, mask: &Mask, params: &ProjectionParams<T>) -> Result<FeatureMap> {
    if (mask.height, mask.width) != (f.height, f.width) {
        return Err(HpanError::shape(format!(
            "mask {}x{} vs features {}x{}",
            mask.height, mask.width, f.height, f.width
        )));
    }
    let m: Vec<T> = mask.data.iter().map(|&v| T::of(v as f64)).collect();
    let out = project_tokens(&f.tokens::<T>(), &m, params)?;
    FeatureMap::from_tokens(Level::L3, f.height, f.width, &out)
}
