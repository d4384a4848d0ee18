use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Denominator guard of the cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// `<s, t> / (|s| |t| + eps)`; zero vectors give 0.
pub fn cosine_similarity<T: Scalar>(s: &[T], t: &[T]) -> T {
    assert_eq!(s.len(), t.len(), "cosine of vectors with different lengths");
    let mut dot = T::zero();
    let mut ss = T::zero();
    let mut tt = T::zero();
    for (&a, &b) in s.iter().zip(t) {
        dot += a * b;
        ss += a * a;
        tt += b * b;
    }
    dot / (ss.sqrt() * tt.sqrt() + T::of(COSINE_EPS))
}

/// Pairwise cosine similarities between the rows of `a` (`N x C`) and the
/// rows of `b` (`M x C`), as an `N x M` matrix.
pub fn cosine_matrix<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let dots = a.matmul_t(b);
    let na = a.row_norms();
    let nb = b.row_norms();
    let eps = T::of(COSINE_EPS);
    Matrix::from_fn(a.rows(), b.rows(), |i, j| dots[(i, j)] / (na[i] * nb[j] + eps))
}

/// Gradients of `sum(d_sim .* cosine_matrix(a, b))` with respect to `a` and `b`.
///
/// For `D = |a||b| + eps` and `n = <a, b>`:
/// `dS/da = b / D - n |b| a / (|a| D^2)`, and symmetrically for `b`. The
/// `|a|` derivative is taken as zero at `a = 0`.
pub fn cosine_matrix_backward<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, d_sim: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
    assert_eq!(d_sim.shape(), (a.rows(), b.rows()));
    let dots = a.matmul_t(b);
    let na = a.row_norms();
    let nb = b.row_norms();
    let eps = T::of(COSINE_EPS);
    // Coefficients: d_a = P b + diag(r_a) a, d_b = P^T a + diag(r_b) b.
    let mut p = Matrix::zeros(a.rows(), b.rows());
    let mut ra = vec![T::zero(); a.rows()];
    let mut rb = vec![T::zero(); b.rows()];
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            let g = d_sim[(i, j)];
            if g == T::zero() {
                continue;
            }
            let den = na[i] * nb[j] + eps;
            let n = dots[(i, j)];
            p[(i, j)] = g / den;
            let c = g * n / (den * den);
            if na[i] > T::zero() {
                ra[i] -= c * nb[j] / na[i];
            }
            if nb[j] > T::zero() {
                rb[j] -= c * na[i] / nb[j];
            }
        }
    }
    let mut da = p.matmul(b);
    for (i, &r) in ra.iter().enumerate() {
        for (d, &x) in da.row_mut(i).iter_mut().zip(a.row(i)) {
            *d += r * x;
        }
    }
    let mut db = p.t_matmul(a);
    for (j, &r) in rb.iter().enumerate() {
        for (d, &x) in db.row_mut(j).iter_mut().zip(b.row(j)) {
            *d += r * x;
        }
    }
    (da, db)
}
