//! Few-shot video object segmentation with hierarchical prototype attention.

pub mod bpam;
pub mod episode;
pub mod error;
pub mod head;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod pgam;
pub mod scalar;
pub mod verify;

use rand::Rng;

pub use error::{HpanError, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;

/// `rows x cols` matrix with entries uniform on `[-1/sqrt(fan), 1/sqrt(fan)]`.
pub fn uniform_init<T: Scalar>(rows: usize, cols: usize, fan: usize, rng: &mut impl Rng) -> Matrix<T> {
    let bound = 1.0 / (fan.max(1) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| T::of(rng.random_range(-bound..=bound)))
}
