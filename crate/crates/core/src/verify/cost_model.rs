//! Closed-form multiply-accumulate counts for one attention block and the
//! two ways of computing support-to-query attention.
//!
//! One block `A(Q, K, V)` with `n_q` query rows and `n_k` key rows costs
//!
//! ```text
//! linear maps   C^2 (n_q + 2 n_k)      Q W_q, K W_k, V W_v
//! scores        n_q n_k C
//! softmax       n_q n_k                one normalising multiply per entry
//! weighted sum  n_q n_k C
//! ```
//!
//! The last three are the interaction terms. The skip-connection addition is
//! not a multiply and is not counted.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BlockCost {
    pub total: u64,
    pub interaction: u64,
}

impl std::ops::Add for BlockCost {
    type Output = BlockCost;
    fn add(self, o: BlockCost) -> BlockCost {
        BlockCost {
            total: self.total + o.total,
            interaction: self.interaction + o.interaction,
        }
    }
}

pub fn attention_cost(n_q: usize, n_k: usize, c: usize) -> BlockCost {
    let (n_q, n_k, c) = (n_q as u64, n_k as u64, c as u64);
    let interaction = 2 * n_q * n_k * c + n_q * n_k;
    BlockCost {
        total: c * c * (n_q + 2 * n_k) + interaction,
        interaction,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostPrediction {
    /// Prototype co-attention: inner block over `N_p K` prototypes reading
    /// `K HW` support tokens, outer block over `T HW` query tokens.
    pub factored: BlockCost,
    /// Full-rank `A(T_q, T_s, T_s)`.
    pub full: BlockCost,
}

pub fn cost_model(k: usize, t: usize, h: usize, w: usize, n_p: usize, c: usize) -> CostPrediction {
    let hw = h * w;
    let n = n_p * k;
    CostPrediction {
        factored: attention_cost(n, k * hw, c) + attention_cost(t * hw, n, c),
        full: attention_cost(t * hw, k * hw, c),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_count_for_a_small_block() {
        // C^2 (4 + 6) = 40, scores 24, softmax 12, weighted sum 24.
        assert_eq!(
            attention_cost(4, 3, 2),
            BlockCost {
                total: 100,
                interaction: 60
            }
        );
    }

    #[test]
    fn factored_is_cheaper_at_defaults() {
        let p = cost_model(5, 5, 16, 28, 5, 256);
        assert!(p.factored.total < p.full.total);
        assert!(p.full.interaction as f64 / p.factored.interaction as f64 > 40.0);
    }

    #[test]
    fn interaction_term_is_linear_in_prototypes() {
        let a = cost_model(5, 5, 16, 28, 5, 256).factored.interaction;
        let b = cost_model(5, 5, 16, 28, 10, 256).factored.interaction;
        assert_eq!(b, 2 * a);
    }
}
