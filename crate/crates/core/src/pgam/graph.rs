//! Graph attention over prototype sets and the three-block enhancement.
//!
//! For target prototypes `P_t` (`N_t x C`) and source prototypes `P_s`
//! (`N_s x C`):
//!
//! ```text
//! key   = P_s W_k          query = P_t W_q          value = P_s W_v
//! phi_ij = d(key_i, query_j) / (sum_j' d(key_i, query_j') + eps_den)
//! out_j  = query_j + lambda * sum_i phi_ij value_i
//! ```
//!
//! `d` is the guarded cosine similarity. Edge weights are normalised over
//! targets for each source and negative similarities are kept as they are.
//! Values come from the source set so that the output keeps the target row
//! count; [`ValueSource::Target`] selects the literal target-side values,
//! which only type-checks when `N_s == N_t`.

use rand::Rng;

use super::cosine::{cosine_matrix, cosine_matrix_backward};
use super::prototypes::{Origin, PrototypeSet};
use crate::error::{HpanError, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const EDGE_DEN_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ValueSource {
    #[default]
    Source,
    Target,
}

/// Row-convention linear maps of one graph attention block (`C x C` each).
#[derive(Debug, Clone, PartialEq)]
pub struct GraphAttentionParams<T> {
    pub w_k: Matrix<T>,
    pub w_q: Matrix<T>,
    pub w_v: Matrix<T>,
}

impl<T: Scalar> GraphAttentionParams<T> {
    pub fn identity(c: usize) -> Self {
        GraphAttentionParams {
            w_k: Matrix::identity(c),
            w_q: Matrix::identity(c),
            w_v: Matrix::identity(c),
        }
    }

    pub fn init(c: usize, rng: &mut impl Rng) -> Self {
        GraphAttentionParams {
            w_k: crate::uniform_init(c, c, c, rng),
            w_q: crate::uniform_init(c, c, c, rng),
            w_v: crate::uniform_init(c, c, c, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let c = self.w_k.rows();
        GraphAttentionParams {
            w_k: Matrix::zeros(c, c),
            w_q: Matrix::zeros(c, c),
            w_v: Matrix::zeros(c, c),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GraphAttentionCache<T> {
    tgt: Matrix<T>,
    src: Matrix<T>,
    key: Matrix<T>,
    query: Matrix<T>,
    value: Matrix<T>,
    den: Vec<T>,
    phi: Matrix<T>,
    lambda: T,
    value_source: ValueSource,
}

#[derive(Debug, Clone)]
pub struct GraphAttentionGrads<T> {
    pub params: GraphAttentionParams<T>,
    pub tgt: Matrix<T>,
    pub src: Matrix<T>,
}

pub fn graph_attention_forward<T: Scalar>(
    tgt: &Matrix<T>,
    src: &Matrix<T>,
    lambda: T,
    params: &GraphAttentionParams<T>,
    value_source: ValueSource,
) -> Result<(Matrix<T>, GraphAttentionCache<T>)> {
    let c = params.w_q.rows();
    if tgt.cols() != c || src.cols() != c {
        return Err(HpanError::shape(format!(
            "graph attention over {c} channels got target {} / source {}",
            tgt.cols(),
            src.cols()
        )));
    }
    if value_source == ValueSource::Target && tgt.rows() != src.rows() {
        return Err(HpanError::shape(
            "target-side values need equally sized source and target sets",
        ));
    }
    let key = src.matmul(&params.w_k);
    let query = tgt.matmul(&params.w_q);
    let value = match value_source {
        ValueSource::Source => src.matmul(&params.w_v),
        ValueSource::Target => tgt.matmul(&params.w_v),
    };
    let sim = cosine_matrix(&key, &query);
    let eps = T::of(EDGE_DEN_EPS);
    let den: Vec<T> = sim.row_iter().map(|r| r.iter().copied().sum::<T>() + eps).collect();
    let mut phi = sim;
    for (i, &d) in den.iter().enumerate() {
        phi.row_mut(i).iter_mut().for_each(|v| *v /= d);
    }
    let mut out = phi.t_matmul(&value);
    out.scale(lambda);
    out.add_assign(&query);
    Ok((
        out,
        GraphAttentionCache {
            tgt: tgt.clone(),
            src: src.clone(),
            key,
            query,
            value,
            den,
            phi,
            lambda,
            value_source,
        },
    ))
}

/// Graph attention with source-side values.
pub fn graph_attention<T: Scalar>(
    tgt: &Matrix<T>,
    src: &Matrix<T>,
    lambda: T,
    params: &GraphAttentionParams<T>,
) -> Result<Matrix<T>> {
    graph_attention_forward(tgt, src, lambda, params, ValueSource::Source).map(|(o, _)| o)
}

/// Edge weights `phi` (`N_s x N_t`) of a forward pass.
pub fn edge_weights<T: Scalar>(cache: &GraphAttentionCache<T>) -> &Matrix<T> {
    &cache.phi
}

pub fn graph_attention_backward<T: Scalar>(
    cache: &GraphAttentionCache<T>,
    params: &GraphAttentionParams<T>,
    d_out: &Matrix<T>,
) -> GraphAttentionGrads<T> {
    let lambda = cache.lambda;
    let mut d_phi = cache.value.matmul_t(d_out);
    d_phi.scale(lambda);
    let mut d_value = cache.phi.matmul(d_out);
    d_value.scale(lambda);

    // phi_ij = s_ij / den_i
    let mut d_sim = d_phi;
    for i in 0..d_sim.rows() {
        let dot: T = d_sim.row(i).iter().zip(cache.phi.row(i)).map(|(&g, &p)| g * p).sum();
        let den = cache.den[i];
        d_sim.row_mut(i).iter_mut().for_each(|g| *g = (*g - dot) / den);
    }
    let (d_key, d_query_sim) = cosine_matrix_backward(&cache.key, &cache.query, &d_sim);
    let mut d_query = d_out.clone();
    d_query.add_assign(&d_query_sim);

    let w_k = cache.src.t_matmul(&d_key);
    let w_q = cache.tgt.t_matmul(&d_query);
    let mut src = d_key.matmul_t(&params.w_k);
    let mut tgt = d_query.matmul_t(&params.w_q);
    let d_value_in = d_value.matmul_t(&params.w_v);
    let w_v = match cache.value_source {
        ValueSource::Source => {
            src.add_assign(&d_value_in);
            cache.src.t_matmul(&d_value)
        }
        ValueSource::Target => {
            tgt.add_assign(&d_value_in);
            cache.tgt.t_matmul(&d_value)
        }
    };
    GraphAttentionGrads {
        params: GraphAttentionParams { w_k, w_q, w_v },
        tgt,
        src,
    }
}

/// Parameters of the two graph self-attention blocks and the co-attention
/// block. The three blocks do not share weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PgamParams<T> {
    pub support_self: GraphAttentionParams<T>,
    pub query_self: GraphAttentionParams<T>,
    pub co: GraphAttentionParams<T>,
    pub lambda_self: T,
    pub lambda_co: T,
    pub value_source: ValueSource,
}

pub const DEFAULT_LAMBDA_SELF: f64 = 0.8;
pub const DEFAULT_LAMBDA_CO: f64 = 0.2;

impl<T: Scalar> PgamParams<T> {
    pub fn init(c: usize, rng: &mut impl Rng) -> Self {
        PgamParams {
            support_self: GraphAttentionParams::init(c, rng),
            query_self: GraphAttentionParams::init(c, rng),
            co: GraphAttentionParams::init(c, rng),
            lambda_self: T::of(DEFAULT_LAMBDA_SELF),
            lambda_co: T::of(DEFAULT_LAMBDA_CO),
            value_source: ValueSource::Source,
        }
    }

    pub fn identity(c: usize, lambda_self: T, lambda_co: T) -> Self {
        PgamParams {
            support_self: GraphAttentionParams::identity(c),
            query_self: GraphAttentionParams::identity(c),
            co: GraphAttentionParams::identity(c),
            lambda_self,
            lambda_co,
            value_source: ValueSource::Source,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnhanceCache<T> {
    pub support_self: GraphAttentionCache<T>,
    pub query_self: GraphAttentionCache<T>,
    pub co: GraphAttentionCache<T>,
    pub support_enhanced: Matrix<T>,
    pub query_enhanced: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct EnhanceGrads<T> {
    pub support_self: GraphAttentionParams<T>,
    pub query_self: GraphAttentionParams<T>,
    pub co: GraphAttentionParams<T>,
    pub support_raw: Matrix<T>,
    pub query_raw: Matrix<T>,
}

pub fn enhance_prototypes_forward<T: Scalar>(
    p_s: &PrototypeSet<T>,
    p_q: &PrototypeSet<T>,
    params: &PgamParams<T>,
) -> Result<(PrototypeSet<T>, EnhanceCache<T>)> {
    if p_s.origin != Origin::SupportRaw || p_q.origin != Origin::QueryRaw {
        return Err(HpanError::Invariant(format!(
            "enhancement expects support_raw/query_raw sets, got {:?}/{:?}",
            p_s.origin, p_q.origin
        )));
    }
    let (s_bar, s_cache) = graph_attention_forward(
        &p_s.prototypes,
        &p_s.prototypes,
        params.lambda_self,
        &params.support_self,
        params.value_source,
    )?;
    let (q_bar, q_cache) = graph_attention_forward(
        &p_q.prototypes,
        &p_q.prototypes,
        params.lambda_self,
        &params.query_self,
        params.value_source,
    )?;
    // The co-attention block mixes differently sized sets, so its values
    // always come from the source side.
    let (h, co_cache) = graph_attention_forward(&s_bar, &q_bar, params.lambda_co, &params.co, ValueSource::Source)?;
    let mut holistic = PrototypeSet::new(h, Origin::Holistic, p_s.n_per_unit, p_s.units())?;
    holistic.duplicated = p_s.duplicated || p_q.duplicated;
    Ok((
        holistic,
        EnhanceCache {
            support_self: s_cache,
            query_self: q_cache,
            co: co_cache,
            support_enhanced: s_bar,
            query_enhanced: q_bar,
        },
    ))
}

/// Holistic prototypes `G(G(P_s, P_s), G(P_q, P_q))`, `N_p K x C`.
pub fn enhance_prototypes<T: Scalar>(
    p_s: &PrototypeSet<T>,
    p_q: &PrototypeSet<T>,
    params: &PgamParams<T>,
) -> Result<PrototypeSet<T>> {
    enhance_prototypes_forward(p_s, p_q, params).map(|(h, _)| h)
}

pub fn enhance_prototypes_backward<T: Scalar>(
    cache: &EnhanceCache<T>,
    params: &PgamParams<T>,
    d_holistic: &Matrix<T>,
) -> EnhanceGrads<T> {
    let co = graph_attention_backward(&cache.co, &params.co, d_holistic);
    let s = graph_attention_backward(&cache.support_self, &params.support_self, &co.tgt);
    let q = graph_attention_backward(&cache.query_self, &params.query_self, &co.src);
    let mut support_raw = s.tgt;
    support_raw.add_assign(&s.src);
    let mut query_raw = q.tgt;
    query_raw.add_assign(&q.src);
    EnhanceGrads {
        support_self: s.params,
        query_self: q.params,
        co: co.params,
        support_raw,
        query_raw,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::fd::{finite_diff_grad, max_rel_error};
    use crate::verify::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn to_rows(m: &Matrix<f64>) -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.to_vec()).collect()
    }

    #[test]
    fn zero_lambda_is_the_query_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = GraphAttentionParams::init(4, &mut rng);
        let tgt = rand_matrix(3, 4, &mut rng);
        let src = rand_matrix(5, 4, &mut rng);
        let out = graph_attention(&tgt, &src, 0.0, &p).unwrap();
        assert_eq!(out, tgt.matmul(&p.w_q));
    }

    #[test]
    fn single_prototype_self_attention() {
        let p: Matrix<f64> = Matrix::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap();
        let out = graph_attention(&p, &p, 0.8, &GraphAttentionParams::identity(3)).unwrap();
        // phi = d / (d + eps) with d = |p|^2 / (|p|^2 + eps)
        let d = 5.53 / (5.53 + 1e-8);
        let phi = d / (d + 1e-8);
        for j in 0..3 {
            assert!((out[(0, j)] - p[(0, j)] * (1.0 + 0.8 * phi)).abs() < 1e-12);
            assert!((out[(0, j)] - 1.8 * p[(0, j)]).abs() < 1e-6);
        }
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = GraphAttentionParams::init(2, &mut rng);
        let tgt = rand_matrix(3, 2, &mut rng);
        let src = rand_matrix(3, 2, &mut rng);
        let got = graph_attention(&tgt, &src, 0.7, &p).unwrap();
        let want = oracle::dense_graph_attention(
            &to_rows(&tgt),
            &to_rows(&src),
            0.7,
            &to_rows(&p.w_k),
            &to_rows(&p.w_q),
            &to_rows(&p.w_v),
        );
        for (i, row) in want.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!(
                    (got[(i, j)] - v).abs() <= 1e-6 * v.abs().max(1e-3),
                    "{} vs {v}",
                    got[(i, j)]
                );
            }
        }
    }

    #[test]
    fn source_rows_sum_to_one_with_positive_similarities() {
        let tgt = Matrix::from_fn(4, 3, |i, j| 1.0 + (i + j) as f64 * 0.1);
        let src = Matrix::from_fn(2, 3, |i, j| 2.0 + (i * j) as f64 * 0.3);
        let (_, cache) =
            graph_attention_forward(&tgt, &src, 0.5, &GraphAttentionParams::identity(3), ValueSource::Source).unwrap();
        for r in edge_weights(&cache).row_iter() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn literal_target_values_need_equal_sizes() {
        let p = GraphAttentionParams::<f64>::identity(2);
        let a = Matrix::zeros(2, 2);
        let b = Matrix::zeros(3, 2);
        assert!(graph_attention_forward(&a, &b, 1.0, &p, ValueSource::Target).is_err());
        assert!(graph_attention_forward(&a, &a, 1.0, &p, ValueSource::Target).is_ok());
        assert!(graph_attention(&a, &Matrix::zeros(2, 3), 1.0, &p).is_err());
    }

    fn check_backward(value_source: ValueSource, n_t: usize, n_s: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 3;
        let p = GraphAttentionParams::init(c, &mut rng);
        let tgt = rand_matrix(n_t, c, &mut rng);
        let src = rand_matrix(n_s, c, &mut rng);
        let w = rand_matrix(n_t, c, &mut rng);
        let lambda = 0.6;
        let loss = |tgt: &Matrix<f64>, src: &Matrix<f64>, p: &GraphAttentionParams<f64>| {
            let (o, _) = graph_attention_forward(tgt, src, lambda, p, value_source).unwrap();
            o.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = graph_attention_forward(&tgt, &src, lambda, &p, value_source).unwrap();
        let g = graph_attention_backward(&cache, &p, &w);
        let close = |a: &[f64], n: &[f64]| {
            let scale = a.iter().chain(n).fold(1e-12f64, |m, v| m.max(v.abs()));
            for (x, y) in a.iter().zip(n) {
                assert!((x - y).abs() / scale < 1e-5, "{x} vs {y}");
            }
        };
        let fd_t = finite_diff_grad(
            |x| loss(&Matrix::from_vec(n_t, c, x.to_vec()).unwrap(), &src, &p),
            tgt.as_slice(),
            1e-5,
        )
        .unwrap();
        close(g.tgt.as_slice(), &fd_t);
        let fd_s = finite_diff_grad(
            |x| loss(&tgt, &Matrix::from_vec(n_s, c, x.to_vec()).unwrap(), &p),
            src.as_slice(),
            1e-5,
        )
        .unwrap();
        close(g.src.as_slice(), &fd_s);
        for which in 0..3 {
            let base = match which {
                0 => &p.w_k,
                1 => &p.w_q,
                _ => &p.w_v,
            };
            let fd = finite_diff_grad(
                |x| {
                    let mut q = p.clone();
                    let m = Matrix::from_vec(c, c, x.to_vec()).unwrap();
                    match which {
                        0 => q.w_k = m,
                        1 => q.w_q = m,
                        _ => q.w_v = m,
                    }
                    loss(&tgt, &src, &q)
                },
                base.as_slice(),
                1e-5,
            )
            .unwrap();
            let an = match which {
                0 => &g.params.w_k,
                1 => &g.params.w_q,
                _ => &g.params.w_v,
            };
            close(an.as_slice(), &fd);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        check_backward(ValueSource::Source, 3, 4, 5);
        check_backward(ValueSource::Source, 2, 2, 6);
        check_backward(ValueSource::Target, 3, 3, 7);
    }

    fn set(m: Matrix<f64>, origin: Origin, n_p: usize) -> PrototypeSet<f64> {
        let units = m.rows() / n_p;
        PrototypeSet::new(m, origin, n_p, units).unwrap()
    }

    #[test]
    fn identity_cascade_returns_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps = set(rand_matrix(4, 3, &mut rng), Origin::SupportRaw, 2);
        let pq = set(rand_matrix(6, 3, &mut rng), Origin::QueryRaw, 2);
        let h = enhance_prototypes(&ps, &pq, &PgamParams::identity(3, 0.0, 0.0)).unwrap();
        assert_eq!(h.origin, Origin::Holistic);
        assert_eq!(h.prototypes, ps.prototypes);
    }

    #[test]
    fn holistic_shape_at_default_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = PgamParams::init(256, &mut rng);
        let ps = set(rand_matrix(25, 256, &mut rng), Origin::SupportRaw, 5);
        let pq = set(rand_matrix(25, 256, &mut rng), Origin::QueryRaw, 5);
        let h = enhance_prototypes(&ps, &pq, &params).unwrap();
        assert_eq!(h.prototypes.shape(), (25, 256));
    }

    #[test]
    fn enhancement_matches_oracle_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = PgamParams::init(4, &mut rng);
        let ps = set(rand_matrix(6, 4, &mut rng), Origin::SupportRaw, 3);
        let pq = set(rand_matrix(9, 4, &mut rng), Origin::QueryRaw, 3);
        let h = enhance_prototypes(&ps, &pq, &params).unwrap();
        let g = |t: &Vec<Vec<f64>>, s: &Vec<Vec<f64>>, l: f64, p: &GraphAttentionParams<f64>| {
            oracle::dense_graph_attention(t, s, l, &to_rows(&p.w_k), &to_rows(&p.w_q), &to_rows(&p.w_v))
        };
        let s_bar = g(
            &to_rows(&ps.prototypes),
            &to_rows(&ps.prototypes),
            0.8,
            &params.support_self,
        );
        let q_bar = g(
            &to_rows(&pq.prototypes),
            &to_rows(&pq.prototypes),
            0.8,
            &params.query_self,
        );
        let want = g(&s_bar, &q_bar, 0.2, &params.co);
        for (i, row) in want.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((h.prototypes[(i, j)] - v).abs() <= 1e-6 * v.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn enhancement_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = PgamParams::init(3, &mut rng);
        let ps = set(rand_matrix(4, 3, &mut rng), Origin::SupportRaw, 2);
        let pq = set(rand_matrix(6, 3, &mut rng), Origin::QueryRaw, 2);
        let w = rand_matrix(4, 3, &mut rng);
        let (_, cache) = enhance_prototypes_forward(&ps, &pq, &params).unwrap();
        let g = enhance_prototypes_backward(&cache, &params, &w);
        let loss = |params: &PgamParams<f64>| {
            let h = enhance_prototypes(&ps, &pq, params).unwrap();
            h.prototypes
                .as_slice()
                .iter()
                .zip(w.as_slice())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let fd = finite_diff_grad(
            |x| {
                let mut p = params.clone();
                p.co.w_v = Matrix::from_vec(3, 3, x.to_vec()).unwrap();
                loss(&p)
            },
            params.co.w_v.as_slice(),
            1e-5,
        )
        .unwrap();
        assert!(max_rel_error(g.co.w_v.as_slice(), &fd) < 1e-5);
        let fd = finite_diff_grad(
            |x| {
                let mut p = params.clone();
                p.query_self.w_k = Matrix::from_vec(3, 3, x.to_vec()).unwrap();
                loss(&p)
            },
            params.query_self.w_k.as_slice(),
            1e-5,
        )
        .unwrap();
        assert!(max_rel_error(g.query_self.w_k.as_slice(), &fd) < 1e-5);
    }
}
