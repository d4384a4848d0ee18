//! Channel concatenation of co- and self-attention into `T x 2C x H x W`.

use super::factored::TokenLayout;
use crate::episode::Storable;
use crate::error::{HpanError, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Holistic attention, frame-major then channel-major. Channels `0..C` come
/// from co-attention and `C..2C` from self-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct HolisticAttention<T> {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> HolisticAttention<T> {
    pub fn at(&self, t: usize, c: usize, y: usize, x: usize) -> T {
        self.data[((t * self.channels + c) * self.height + y) * self.width + x]
    }

    /// Channel-major `2C x HW` block of frame `t`.
    pub fn frame(&self, t: usize) -> &[T] {
        let n = self.channels * self.height * self.width;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn cast<U: Scalar>(&self) -> HolisticAttention<U> {
        HolisticAttention {
            frames: self.frames,
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
        }
    }
}

/// Reshapes both `T*HW x C` token blocks to `T x C x H x W` and stacks them
/// along channels, co-attention first.
pub fn holistic_attention<T: Scalar>(
    a_co: &Matrix<T>,
    a_self: &Matrix<T>,
    layout: TokenLayout,
) -> Result<HolisticAttention<T>> {
    if a_co.shape() != a_self.shape() || a_co.rows() != layout.rows() {
        return Err(HpanError::shape(format!(
            "holistic attention needs equal {}-row blocks, got {:?} and {:?}",
            layout.rows(),
            a_co.shape(),
            a_self.shape()
        )));
    }
    let c = a_co.cols();
    let hw = layout.pixels();
    let mut data = vec![T::zero(); layout.units * 2 * c * hw];
    for t in 0..layout.units {
        for (half, src) in [a_co, a_self].into_iter().enumerate() {
            for p in 0..hw {
                let row = src.row(t * hw + p);
                for (ch, &v) in row.iter().enumerate() {
                    data[((t * 2 * c) + half * c + ch) * hw + p] = v;
                }
            }
        }
    }
    Ok(HolisticAttention {
        frames: layout.units,
        channels: 2 * c,
        height: layout.height,
        width: layout.width,
        data,
    })
}

/// Splits a gradient laid out like [`HolisticAttention`] back into the
/// co- and self-attention token gradients.
pub fn split_holistic_grad<T: Scalar>(d: &HolisticAttention<T>) -> (Matrix<T>, Matrix<T>) {
    let c = d.channels / 2;
    let hw = d.height * d.width;
    let mut co = Matrix::zeros(d.frames * hw, c);
    let mut sf = Matrix::zeros(d.frames * hw, c);
    for t in 0..d.frames {
        for p in 0..hw {
            for ch in 0..c {
                co[(t * hw + p, ch)] = d.data[((t * 2 * c) + ch) * hw + p];
                sf[(t * hw + p, ch)] = d.data[((t * 2 * c) + c + ch) * hw + p];
            }
        }
    }
    (co, sf)
}

impl Storable for HolisticAttention<f32> {
    fn dims(&self) -> Vec<usize> {
        vec![self.frames, self.channels, self.height, self.width]
    }

    fn values(&self) -> &[f32] {
        &self.data
    }

    fn check(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(HpanError::NonFinite { index }),
            None => Ok(()),
        }
    }
}
