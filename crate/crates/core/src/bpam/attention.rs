//! Single-head scaled dot-product attention with a query skip connection:
//!
//! ```text
//! A(Q, K, V) = Q W_q + softmax((Q W_q)(K W_k)^T / sqrt(C)) V W_v
//! ```
//!
//! Softmax subtracts the row maximum before exponentiating, so saturated
//! rows stay finite.

use rand::Rng;

use crate::error::{HpanError, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::verify::counter;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlockParams<T> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
}

impl<T: Scalar> AttentionBlockParams<T> {
    pub fn identity(c: usize) -> Self {
        AttentionBlockParams {
            w_q: Matrix::identity(c),
            w_k: Matrix::identity(c),
            w_v: Matrix::identity(c),
        }
    }

    pub fn init(c: usize, rng: &mut impl Rng) -> Self {
        AttentionBlockParams {
            w_q: crate::uniform_init(c, c, c, rng),
            w_k: crate::uniform_init(c, c, c, rng),
            w_v: crate::uniform_init(c, c, c, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.w_q.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.w_q.is_finite() && self.w_k.is_finite() && self.w_v.is_finite()
    }
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    q_in: Matrix<T>,
    k_in: Matrix<T>,
    v_in: Matrix<T>,
    qq: Matrix<T>,
    kk: Matrix<T>,
    vv: Matrix<T>,
    probs: Matrix<T>,
    scale: T,
}

impl<T> AttentionCache<T> {
    /// Row-stochastic attention weights, `n_q x n_k`.
    pub fn probs(&self) -> &Matrix<T> {
        &self.probs
    }
}

#[derive(Debug, Clone)]
pub struct AttentionGrads<T> {
    pub params: AttentionBlockParams<T>,
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
}

/// In-place row softmax with max subtraction. Counted as one MAC per entry.
fn softmax_rows<T: Scalar>(s: &mut Matrix<T>) {
    let n = (s.rows() * s.cols()) as u64;
    for i in 0..s.rows() {
        let row = s.row_mut(i);
        let top = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - top).exp();
            z += *v;
        }
        let inv = T::one() / z;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    counter::record(n, n * std::mem::size_of::<T>() as u64);
    counter::tag_interaction(n);
}

pub fn attention_forward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    params: &AttentionBlockParams<T>,
) -> Result<(Matrix<T>, AttentionCache<T>)> {
    let c = params.w_q.rows();
    if q.cols() != c || k.cols() != c || v.cols() != c {
        return Err(HpanError::shape(format!(
            "attention over {c} channels got Q/K/V with {}/{}/{}",
            q.cols(),
            k.cols(),
            v.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(HpanError::shape(format!(
            "attention keys ({}) and values ({}) differ in length",
            k.rows(),
            v.rows()
        )));
    }
    if k.rows() == 0 {
        return Err(HpanError::shape("attention needs at least one key"));
    }
    let qq = q.matmul(&params.w_q);
    let kk = k.matmul(&params.w_k);
    let vv = v.matmul(&params.w_v);
    let scale = T::one() / T::of_usize(params.channels()).sqrt();
    let mut probs = qq.scores(&kk, scale);
    softmax_rows(&mut probs);
    let mut out = probs.weighted_sum(&vv);
    out.add_assign(&qq);
    Ok((
        out,
        AttentionCache {
            q_in: q.clone(),
            k_in: k.clone(),
            v_in: v.clone(),
            qq,
            kk,
            vv,
            probs,
            scale,
        },
    ))
}

pub fn attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    params: &AttentionBlockParams<T>,
) -> Result<Matrix<T>> {
    attention_forward(q, k, v, params).map(|(o, _)| o)
}

pub fn attention_backward<T: Scalar>(
    cache: &AttentionCache<T>,
    params: &AttentionBlockParams<T>,
    d_out: &Matrix<T>,
) -> AttentionGrads<T> {
    let p = &cache.probs;
    let d_p = d_out.matmul_t(&cache.vv);
    let d_vv = p.t_matmul(d_out);
    let mut d_s = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        let dot: T = d_p.row(i).iter().zip(p.row(i)).map(|(&g, &w)| g * w).sum();
        for ((o, &g), &w) in d_s.row_mut(i).iter_mut().zip(d_p.row(i)).zip(p.row(i)) {
            *o = w * (g - dot) * cache.scale;
        }
    }
    let mut d_qq = d_out.clone();
    d_qq.add_assign(&d_s.matmul(&cache.kk));
    let d_kk = d_s.t_matmul(&cache.qq);
    AttentionGrads {
        params: AttentionBlockParams {
            w_q: cache.q_in.t_matmul(&d_qq),
            w_k: cache.k_in.t_matmul(&d_kk),
            w_v: cache.v_in.t_matmul(&d_vv),
        },
        q: d_qq.matmul_t(&params.w_q),
        k: d_kk.matmul_t(&params.w_k),
        v: d_vv.matmul_t(&params.w_v),
    }
}
