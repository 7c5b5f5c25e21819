//! Dense helpers shared by the modelling modules.
//!
//! Everything that decides "is this vector in that span" goes through the
//! column-pivoted Householder QR below, with a pivot tolerance of
//! [`RANK_RTOL`] times the largest column norm of the matrix under test.

use nalgebra::{DMatrix, DVector};

/// Relative pivot tolerance for rank decisions.
pub const RANK_RTOL: f64 = 1e-10;

/// Column-pivoted Householder QR, `A P = Q R`.
#[derive(Debug, Clone)]
pub struct PivotedQr {
    /// Householder vectors below the diagonal, `R` on and above it.
    packed: DMatrix<f64>,
    tau: Vec<f64>,
    perm: Vec<usize>,
    rank: usize,
}

impl PivotedQr {
    /// Factorize with the default tolerance (`RANK_RTOL` x largest column norm).
    pub fn new(a: &DMatrix<f64>) -> Self {
        let tol = RANK_RTOL * max_column_norm(a);
        Self::with_tolerance(a, tol)
    }

    /// Factorize, counting a pivot as nonzero only when `|R_kk| > tol`.
    pub fn with_tolerance(a: &DMatrix<f64>, tol: f64) -> Self {
        let (m, p) = a.shape();
        let mut packed = a.clone();
        let mut perm: Vec<usize> = (0..p).collect();
        let steps = m.min(p);
        let mut tau = Vec::with_capacity(steps);
        let mut rank = 0;
        let mut rank_fixed = false;

        for k in 0..steps {
            // Norms are recomputed on the trailing block rather than downdated.
            let (best, best_norm) = (k..p)
                .map(|j| (j, packed.view((k, j), (m - k, 1)).norm()))
                .fold((k, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
            if best != k {
                packed.swap_columns(k, best);
                perm.swap(k, best);
            }
            if !rank_fixed {
                if best_norm > tol && best_norm > 0.0 {
                    rank += 1;
                } else {
                    rank_fixed = true;
                }
            }

            let x0 = packed[(k, k)];
            let norm = best_norm.max(0.0);
            if norm == 0.0 {
                tau.push(0.0);
                continue;
            }
            let alpha = if x0 >= 0.0 { -norm } else { norm };
            let v0 = x0 - alpha;
            // v = x - alpha e1, scaled so that v[0] = 1.
            for i in (k + 1)..m {
                packed[(i, k)] /= v0;
            }
            let t = -v0 / alpha;
            packed[(k, k)] = alpha;
            tau.push(t);

            for j in (k + 1)..p {
                let mut dot = packed[(k, j)];
                for i in (k + 1)..m {
                    dot += packed[(i, k)] * packed[(i, j)];
                }
                let s = t * dot;
                packed[(k, j)] -= s;
                for i in (k + 1)..m {
                    let vi = packed[(i, k)];
                    packed[(i, j)] -= s * vi;
                }
            }
        }

        Self {
            packed,
            tau,
            perm,
            rank,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn nrows(&self) -> usize {
        self.packed.nrows()
    }

    /// Column permutation: `perm()[k]` is the original index of the k-th pivot column.
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Original indices of the `rank` pivot columns, sorted ascending.
    pub fn independent_columns(&self) -> Vec<usize> {
        let mut cols = self.perm[..self.rank].to_vec();
        cols.sort_unstable();
        cols
    }

    /// Overwrites `mat` with `Q mat`.
    pub fn apply_q(&self, mat: &mut DMatrix<f64>) {
        let m = self.nrows();
        for k in (0..self.tau.len()).rev() {
            let t = self.tau[k];
            if t == 0.0 {
                continue;
            }
            for j in 0..mat.ncols() {
                let mut dot = mat[(k, j)];
                for i in (k + 1)..m {
                    dot += self.packed[(i, k)] * mat[(i, j)];
                }
                let s = t * dot;
                mat[(k, j)] -= s;
                for i in (k + 1)..m {
                    mat[(i, j)] -= s * self.packed[(i, k)];
                }
            }
        }
    }

    /// Columns `from..to` of the full orthogonal factor `Q`.
    pub fn q_columns(&self, from: usize, to: usize) -> DMatrix<f64> {
        let m = self.nrows();
        let mut e = DMatrix::zeros(m, to - from);
        for (c, j) in (from..to).enumerate() {
            e[(j, c)] = 1.0;
        }
        self.apply_q(&mut e);
        e
    }

    /// Orthonormal basis of the column space.
    pub fn range_basis(&self) -> DMatrix<f64> {
        self.q_columns(0, self.rank)
    }

    /// Orthonormal basis of the orthogonal complement of the column space.
    pub fn complement_basis(&self) -> DMatrix<f64> {
        self.q_columns(self.rank, self.nrows())
    }
}

pub fn max_column_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter().map(|c| c.norm()).fold(0.0, f64::max)
}

pub fn rank(a: &DMatrix<f64>) -> usize {
    PivotedQr::new(a).rank()
}

pub fn rank_with_tolerance(a: &DMatrix<f64>, tol: f64) -> usize {
    PivotedQr::with_tolerance(a, tol).rank()
}

pub fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows(), "hstack row mismatch");
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    out
}

/// True iff every column of `b` lies in the column span of `a`.
///
/// Both ranks use one tolerance, taken from the largest column norm of `[a b]`.
pub fn span_contains(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    if b.ncols() == 0 {
        return true;
    }
    let joined = hstack(a, b);
    let tol = RANK_RTOL * max_column_norm(&joined);
    rank_with_tolerance(a, tol) == rank_with_tolerance(&joined, tol)
}

pub fn vector_in_span(a: &DMatrix<f64>, v: &DVector<f64>) -> bool {
    let col = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    span_contains(a, &col)
}

/// Two-sided containment of column spans.
pub fn spans_equal(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let joined = hstack(a, b);
    let tol = RANK_RTOL * max_column_norm(&joined);
    let r = rank_with_tolerance(&joined, tol);
    rank_with_tolerance(a, tol) == r && rank_with_tolerance(b, tol) == r
}

/// Stacks matrices as columns of their column-major vectorization.
pub fn vectorize_all(mats: &[DMatrix<f64>]) -> DMatrix<f64> {
    let len = mats.first().map(|m| m.len()).unwrap_or(0);
    let mut out = DMatrix::zeros(len, mats.len());
    for (j, m) in mats.iter().enumerate() {
        out.column_mut(j).copy_from_slice(m.as_slice());
    }
    out
}

/// `Lᵀ G L`.
pub fn congruence(l: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    let gl = g * l;
    let mut out = l.transpose() * gl;
    symmetrize(&mut out);
    out
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn is_symmetric(m: &DMatrix<f64>) -> bool {
    m.is_square() && (0..m.nrows()).all(|i| (0..i).all(|j| m[(i, j)] == m[(j, i)]))
}

/// `tr(A B)` for square matrices of equal size, without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.transpose().iter()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qr_reconstructs_and_ranks() {
        let a = DMatrix::from_row_slice(
            4,
            3,
            &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0, 7.0, 8.0, 15.0, 1.0, 0.0, 1.0],
        );
        let qr = PivotedQr::new(&a);
        assert_eq!(qr.rank(), 2);
        let q = qr.q_columns(0, 4);
        let qtq = q.transpose() * &q;
        assert!((qtq - DMatrix::identity(4, 4)).norm() < 1e-12);
        let basis = qr.range_basis();
        let proj = &basis * basis.transpose();
        assert!((&proj * &a - &a).norm() < 1e-10);
        let comp = qr.complement_basis();
        assert_eq!(comp.ncols(), 2);
        assert!((comp.transpose() * &a).norm() < 1e-10);
    }

    #[test]
    fn zero_and_empty_matrices_have_rank_zero() {
        assert_eq!(rank(&DMatrix::zeros(3, 2)), 0);
        assert_eq!(rank(&DMatrix::zeros(3, 0)), 0);
        let qr = PivotedQr::new(&DMatrix::zeros(3, 0));
        assert_eq!(qr.complement_basis().ncols(), 3);
    }

    #[test]
    fn span_tests() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let v = DVector::from_vec(vec![2.0, 5.0, 8.0]);
        assert!(vector_in_span(&a, &v));
        let w = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        assert!(!vector_in_span(&a, &w));
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 1.0, 3.0, 1.0]);
        assert!(spans_equal(&a, &b));
    }

    #[test]
    fn trace_product_matches_explicit() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = DMatrix::from_row_slice(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(trace_of_product(&a, &b), (&a * &b).trace());
    }
}
