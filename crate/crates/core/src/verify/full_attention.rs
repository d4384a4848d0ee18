//! Full-rank `A(T_q, T_s, T_s)`: every query token attends to every support
//! token. Written separately from the attention block it is compared with.

use crate::bpam::AttentionBlockParams;
use crate::error::{HpanError, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::verify::counter::{self, measure, CostCounter};

/// Largest accepted `n_q * n_k * C` (the score product alone).
pub const FULL_ATTENTION_GUARD: u128 = 10_000_000_000;

pub fn check_guard(n_q: usize, n_k: usize, c: usize) -> Result<()> {
    let required = n_q as u128 * n_k as u128 * c as u128;
    if required > FULL_ATTENTION_GUARD {
        return Err(HpanError::GuardExceeded {
            required,
            limit: FULL_ATTENTION_GUARD,
            factor: required as f64 / FULL_ATTENTION_GUARD as f64,
        });
    }
    Ok(())
}

pub fn full_attention_oracle<T: Scalar>(
    t_q: &Matrix<T>,
    t_s: &Matrix<T>,
    params: &AttentionBlockParams<T>,
) -> Result<(Matrix<T>, CostCounter)> {
    let c = params.w_q.rows();
    if t_q.cols() != c || t_s.cols() != c || t_s.rows() == 0 {
        return Err(HpanError::shape("full attention: token and parameter channels differ"));
    }
    check_guard(t_q.rows(), t_s.rows(), c)?;
    let (out, cost) = measure(|| {
        let q = t_q.matmul(&params.w_q);
        let k = t_s.matmul(&params.w_k);
        let v = t_s.matmul(&params.w_v);
        let inv_sqrt_c = T::one() / T::of(c as f64).sqrt();
        let mut a = q.matmul_t(&k);
        for i in 0..a.rows() {
            let row = a.row_mut(i);
            let mut m = T::neg_infinity();
            for x in row.iter_mut() {
                *x *= inv_sqrt_c;
                m = m.max(*x);
            }
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let n = (a.rows() * a.cols()) as u64;
        counter::record(n, n * std::mem::size_of::<T>() as u64);
        let mut out = a.matmul(&v);
        out.add_assign(&q);
        // Scores, normalisation and the weighted sum are pairwise work.
        counter::tag_interaction(n * (2 * c as u64) + n);
        out
    });
    Ok((out, cost))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpam::attention;
    use crate::verify::cost_model::attention_cost;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn agrees_with_the_attention_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = |r, c, rng: &mut ChaCha8Rng| Matrix::<f64>::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let q = m(7, 4, &mut rng);
        let s = m(9, 4, &mut rng);
        let p = AttentionBlockParams::init(4, &mut rng);
        let (full, _) = full_attention_oracle(&q, &s, &p).unwrap();
        let block = attention(&q, &s, &s, &p).unwrap();
        for (a, b) in full.as_slice().iter().zip(block.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn counts_match_the_cost_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Matrix::<f64>::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let s = Matrix::<f64>::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let p = AttentionBlockParams::init(2, &mut rng);
        let (_, cost) = full_attention_oracle(&q, &s, &p).unwrap();
        let want = attention_cost(4, 3, 2);
        assert_eq!((cost.mac_count, cost.interaction_macs), (want.total, want.interaction));
    }

    #[test]
    fn guard() {
        assert!(check_guard(5 * 448, 5 * 448, 256).is_ok());
        assert!(check_guard(10 * 448, 10 * 448, 256).is_ok());
        assert!(matches!(
            check_guard(40 * 448, 40 * 448, 256),
            Err(HpanError::GuardExceeded { .. })
        ));
    }
}
