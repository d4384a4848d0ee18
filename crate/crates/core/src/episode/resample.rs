//! Grid resampling with half-pixel centres.
//!
//! A resample is a fixed sparse linear map from an input grid to an output
//! grid, so the same [`ResampleMap`] serves the forward pass and (through
//! [`ResampleMap::apply_transpose`]) the backward pass of the decoder.

use super::Mask;
use crate::error::{HpanError, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    Nearest,
    Bilinear,
}

/// Sparse `out_h*out_w x in_h*in_w` interpolation operator.
#[derive(Debug, Clone)]
pub struct ResampleMap {
    pub in_dims: (usize, usize),
    pub out_dims: (usize, usize),
    taps: Vec<[(usize, f64); 4]>,
}

fn source_coord(dst: usize, in_len: usize, out_len: usize) -> f64 {
    ((dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64)
}

fn nearest_index(dst: usize, in_len: usize, out_len: usize) -> usize {
    (((dst as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1)
}

impl ResampleMap {
    pub fn new(in_dims: (usize, usize), out_dims: (usize, usize), mode: ResampleMode) -> Result<Self> {
        let (ih, iw) = in_dims;
        let (oh, ow) = out_dims;
        if ih == 0 || iw == 0 || oh == 0 || ow == 0 {
            return Err(HpanError::shape(format!(
                "resample {ih}x{iw} -> {oh}x{ow}: dims must be >= 1"
            )));
        }
        let mut taps = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            for x in 0..ow {
                let t = match mode {
                    ResampleMode::Nearest => {
                        let sy = nearest_index(y, ih, oh);
                        let sx = nearest_index(x, iw, ow);
                        [(sy * iw + sx, 1.0), (0, 0.0), (0, 0.0), (0, 0.0)]
                    }
                    ResampleMode::Bilinear => {
                        let fy = source_coord(y, ih, oh);
                        let fx = source_coord(x, iw, ow);
                        let y0 = fy.floor() as usize;
                        let x0 = fx.floor() as usize;
                        let y1 = (y0 + 1).min(ih - 1);
                        let x1 = (x0 + 1).min(iw - 1);
                        let wy = fy - y0 as f64;
                        let wx = fx - x0 as f64;
                        [
                            (y0 * iw + x0, (1.0 - wy) * (1.0 - wx)),
                            (y0 * iw + x1, (1.0 - wy) * wx),
                            (y1 * iw + x0, wy * (1.0 - wx)),
                            (y1 * iw + x1, wy * wx),
                        ]
                    }
                };
                taps.push(t);
            }
        }
        Ok(ResampleMap {
            in_dims,
            out_dims,
            taps,
        })
    }

    pub fn apply<T: Scalar>(&self, input: &[T]) -> Vec<T> {
        assert_eq!(input.len(), self.in_dims.0 * self.in_dims.1);
        self.taps
            .iter()
            .map(|t| {
                t.iter()
                    .filter(|(_, w)| *w != 0.0)
                    .map(|&(i, w)| T::of(w) * input[i])
                    .sum()
            })
            .collect()
    }

    /// Adjoint of [`ResampleMap::apply`].
    pub fn apply_transpose<T: Scalar>(&self, grad_out: &[T]) -> Vec<T> {
        assert_eq!(grad_out.len(), self.taps.len());
        let mut g = vec![T::zero(); self.in_dims.0 * self.in_dims.1];
        for (t, &go) in self.taps.iter().zip(grad_out) {
            for &(i, w) in t.iter().filter(|(_, w)| *w != 0.0) {
                g[i] += T::of(w) * go;
            }
        }
        g
    }
}

pub fn resample_grid<T: Scalar>(grid: &Matrix<T>, out_h: usize, out_w: usize, mode: ResampleMode) -> Result<Matrix<T>> {
    let map = ResampleMap::new(grid.shape(), (out_h, out_w), mode)?;
    Matrix::from_vec(out_h, out_w, map.apply(grid.as_slice()))
}

pub fn resample_mask(mask: &Mask, out_h: usize, out_w: usize, mode: ResampleMode) -> Result<Mask> {
    let map = ResampleMap::new((mask.height, mask.width), (out_h, out_w), mode)?;
    let data = map
        .apply::<f64>(&mask.data.iter().map(|&v| v as f64).collect::<Vec<_>>())
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0) as f32)
        .collect();
    Mask::new(out_h, out_w, data)
}
