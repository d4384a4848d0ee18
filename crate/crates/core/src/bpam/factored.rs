//! Pixel-to-pixel attention factored through the holistic prototypes.
//!
//! ```text
//! A_co   = A(T_q, P_h, A(P_h, T_s, T_s))
//! A_self = A(T_q, P_h, A(P_h, T_q, T_q))
//! ```
//!
//! The inner block lets prototypes read a token set; the outer block lets
//! every query token read the updated prototypes. Cost is linear in the
//! number of tokens instead of quadratic.

use rand::Rng;

use super::attention::{attention_backward, attention_forward, AttentionBlockParams, AttentionCache};
use crate::error::{HpanError, Result};
use crate::matrix::Matrix;
use crate::pgam::{Origin, PrototypeSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Query,
    Support,
}

/// Grid geometry of a token matrix: `units` frames or images of `h x w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub units: usize,
    pub height: usize,
    pub width: usize,
}

impl TokenLayout {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn rows(&self) -> usize {
        self.units * self.pixels()
    }
}

/// Tokens of all frames (or images) stacked frame-major, pixel rows within.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix<T> {
    pub tokens: Matrix<T>,
    pub provenance: Provenance,
    pub layout: TokenLayout,
}

impl<T: Scalar> TokenMatrix<T> {
    pub fn new(tokens: Matrix<T>, provenance: Provenance, layout: TokenLayout) -> Result<Self> {
        if tokens.rows() != layout.rows() {
            return Err(HpanError::shape(format!(
                "{} token rows for {} units of {}x{}",
                tokens.rows(),
                layout.units,
                layout.height,
                layout.width
            )));
        }
        Ok(TokenMatrix {
            tokens,
            provenance,
            layout,
        })
    }

    /// Stacks per-unit `HW x C` token blocks.
    pub fn from_units(units: &[Matrix<T>], provenance: Provenance, height: usize, width: usize) -> Result<Self> {
        let tokens = Matrix::vstack(units)?;
        TokenMatrix::new(
            tokens,
            provenance,
            TokenLayout {
                units: units.len(),
                height,
                width,
            },
        )
    }
}

/// Inner and outer attention blocks of one factored attention.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredParams<T> {
    pub inner: AttentionBlockParams<T>,
    pub outer: AttentionBlockParams<T>,
}

impl<T: Scalar> FactoredParams<T> {
    pub fn init(c: usize, rng: &mut impl Rng) -> Self {
        FactoredParams {
            inner: AttentionBlockParams::init(c, rng),
            outer: AttentionBlockParams::init(c, rng),
        }
    }

    pub fn identity(c: usize) -> Self {
        FactoredParams {
            inner: AttentionBlockParams::identity(c),
            outer: AttentionBlockParams::identity(c),
        }
    }
}

/// Parameters of the co- and self-attention. The four blocks are
/// independent unless built with [`BpamParams::init_shared`].
#[derive(Debug, Clone, PartialEq)]
pub struct BpamParams<T> {
    pub co: FactoredParams<T>,
    pub self_: FactoredParams<T>,
}

impl<T: Scalar> BpamParams<T> {
    pub fn init(c: usize, rng: &mut impl Rng) -> Self {
        BpamParams {
            co: FactoredParams::init(c, rng),
            self_: FactoredParams::init(c, rng),
        }
    }

    /// Self-attention reuses the co-attention blocks.
    pub fn init_shared(c: usize, rng: &mut impl Rng) -> Self {
        let co = FactoredParams::init(c, rng);
        BpamParams { self_: co.clone(), co }
    }
}

#[derive(Debug, Clone)]
pub struct FactoredCache<T> {
    inner: AttentionCache<T>,
    outer: AttentionCache<T>,
    /// Output of the inner block: prototypes after reading the context.
    pub updated_prototypes: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct FactoredGrads<T> {
    pub params: FactoredParams<T>,
    pub query: Matrix<T>,
    pub context: Matrix<T>,
    pub prototypes: Matrix<T>,
}

fn check_holistic<T: Scalar>(p_h: &PrototypeSet<T>) -> Result<()> {
    if p_h.origin != Origin::Holistic {
        return Err(HpanError::Invariant(format!(
            "prototype attention expects holistic prototypes, got {:?}",
            p_h.origin
        )));
    }
    Ok(())
}

/// `A(T_q, P, A(P, X, X))` for a query token set and a context token set.
pub fn factored_attention_forward<T: Scalar>(
    t_q: &Matrix<T>,
    context: &Matrix<T>,
    prototypes: &Matrix<T>,
    params: &FactoredParams<T>,
) -> Result<(Matrix<T>, FactoredCache<T>)> {
    let (updated, inner) = attention_forward(prototypes, context, context, &params.inner)?;
    let (out, outer) = attention_forward(t_q, prototypes, &updated, &params.outer)?;
    Ok((
        out,
        FactoredCache {
            inner,
            outer,
            updated_prototypes: updated,
        },
    ))
}

pub fn factored_attention_backward<T: Scalar>(
    cache: &FactoredCache<T>,
    params: &FactoredParams<T>,
    d_out: &Matrix<T>,
) -> FactoredGrads<T> {
    let outer = attention_backward(&cache.outer, &params.outer, d_out);
    let inner = attention_backward(&cache.inner, &params.inner, &outer.v);
    let mut prototypes = outer.k;
    prototypes.add_assign(&inner.q);
    let mut context = inner.k;
    context.add_assign(&inner.v);
    FactoredGrads {
        params: FactoredParams {
            inner: inner.params,
            outer: outer.params,
        },
        query: outer.q,
        context,
        prototypes,
    }
}

/// Support-to-query co-attention, `T*HW x C`.
pub fn prototype_co_attention<T: Scalar>(
    t_q: &TokenMatrix<T>,
    t_s: &TokenMatrix<T>,
    p_h: &PrototypeSet<T>,
    params: &FactoredParams<T>,
) -> Result<Matrix<T>> {
    check_holistic(p_h)?;
    if t_q.provenance != Provenance::Query || t_s.provenance != Provenance::Support {
        return Err(HpanError::Invariant(
            "co-attention takes query then support tokens".into(),
        ));
    }
    factored_attention_forward(&t_q.tokens, &t_s.tokens, &p_h.prototypes, params).map(|(o, _)| o)
}

/// Query-to-query self-attention, `T*HW x C`.
pub fn prototype_self_attention<T: Scalar>(
    t_q: &TokenMatrix<T>,
    p_h: &PrototypeSet<T>,
    params: &FactoredParams<T>,
) -> Result<Matrix<T>> {
    check_holistic(p_h)?;
    if t_q.provenance != Provenance::Query {
        return Err(HpanError::Invariant("self-attention takes query tokens".into()));
    }
    factored_attention_forward(&t_q.tokens, &t_q.tokens, &p_h.prototypes, params).map(|(o, _)| o)
}
