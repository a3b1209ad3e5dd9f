//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::rng;

/// Thin SVD `A = U diag(s) V^T` with singular values sorted descending.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

impl ThinSvd {
    pub fn new(a: &DMatrix<f64>) -> Self {
        let svd = a.clone().svd(true, true);
        let (u, s, v_t) = (
            svd.u.expect("requested U"),
            svd.singular_values,
            svd.v_t.expect("requested V^T"),
        );
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
        let v_t = DMatrix::from_fn(order.len(), v_t.ncols(), |r, c| v_t[(order[r], c)]);
        let singular_values = DVector::from_iterator(order.len(), order.iter().map(|&i| s[i]));
        Self { u, singular_values, v_t }
    }

    pub fn max_singular(&self) -> f64 {
        self.singular_values.iter().copied().fold(0.0, f64::max)
    }

    /// Number of singular values above `cutoff`.
    pub fn rank_above(&self, cutoff: f64) -> usize {
        self.singular_values.iter().filter(|&&s| s > cutoff).count()
    }
}

/// Orthogonal projector onto the row span of a matrix and its complement.
#[derive(Debug, Clone)]
pub struct RowSpaceProjector {
    /// Orthonormal basis of the row span, one basis vector per row.
    basis: DMatrix<f64>,
    dim: usize,
}

impl RowSpaceProjector {
    /// Rank decided with cutoff `rcond * sigma_max`.
    pub fn new(rows: &DMatrix<f64>, rcond: f64) -> Self {
        let dim = rows.ncols();
        if rows.nrows() == 0 {
            return Self { basis: DMatrix::zeros(0, dim), dim };
        }
        let svd = ThinSvd::new(rows);
        let r = svd.rank_above(rcond * svd.max_singular());
        Self { basis: svd.v_t.rows(0, r).into_owned(), dim }
    }

    pub fn rank(&self) -> usize {
        self.basis.nrows()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.rank() == 0 {
            return DVector::zeros(v.len());
        }
        self.basis.tr_mul(&(&self.basis * v))
    }

    pub fn project_complement(&self, v: &DVector<f64>) -> DVector<f64> {
        v - self.project(v)
    }
}

/// Largest singular value by power iteration on `A^T A`.
pub fn operator_norm(a: &DMatrix<f64>, iterations: usize, seed: u64) -> f64 {
    if a.ncols() == 0 || a.nrows() == 0 {
        return 0.0;
    }
    let mut r = rng::rng_from(seed);
    let mut v = rng::unit_vector(&mut r, a.ncols());
    let mut estimate = 0.0;
    for _ in 0..iterations {
        let av = a * &v;
        let w = a.tr_mul(&av);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        estimate = av.norm();
        v = w / norm;
    }
    estimate.max((a * &v).norm())
}

/// Extreme eigenvalues of a symmetric matrix.
pub fn symmetric_extremes(k: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(k.clone());
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// Gauss–Hermite nodes and weights for the weight `exp(-t^2)`, by
/// Golub–Welsch on the Jacobi matrix of the Hermite polynomials.
pub fn gauss_hermite(order: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(order >= 1);
    let mut jacobi = DMatrix::zeros(order, order);
    for i in 1..order {
        let off = (i as f64 / 2.0).sqrt();
        jacobi[(i, i - 1)] = off;
        jacobi[(i - 1, i)] = off;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mu0 = std::f64::consts::PI.sqrt();
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|j| (eig.eigenvalues[j], mu0 * eig.eigenvectors[(0, j)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Symmetrize: the rule is exactly symmetric about zero.
    for j in 0..order / 2 {
        let t = 0.5 * (pairs[order - 1 - j].0 - pairs[j].0);
        let w = 0.5 * (pairs[order - 1 - j].1 + pairs[j].1);
        pairs[j] = (-t, w);
        pairs[order - 1 - j] = (t, w);
    }
    if order % 2 == 1 {
        pairs[order / 2].0 = 0.0;
    }
    pairs.into_iter().unzip()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svd_is_sorted_and_reconstructs() {
        let a = rng::gaussian_matrix(&mut rng::rng_from(1), 5, 8, 1.0);
        let svd = ThinSvd::new(&a);
        assert!(svd.singular_values.as_slice().windows(2).all(|w| w[0] >= w[1]));
        let rebuilt = &svd.u * DMatrix::from_diagonal(&svd.singular_values) * &svd.v_t;
        assert!((rebuilt - a).norm() < 1e-10);
    }

    #[test]
    fn power_iteration_matches_svd() {
        let a = rng::gaussian_matrix(&mut rng::rng_from(2), 30, 12, 1.0);
        let exact = ThinSvd::new(&a).max_singular();
        assert!((operator_norm(&a, 500, 3) - exact).abs() < 1e-6 * exact);
    }

    #[test]
    fn projector_splits_vectors() {
        let rows = rng::gaussian_matrix(&mut rng::rng_from(4), 3, 7, 1.0);
        let p = RowSpaceProjector::new(&rows, 1e-12);
        assert_eq!(p.rank(), 3);
        let v = rng::gaussian_vec(&mut rng::rng_from(5), 7, 1.0);
        let perp = p.project_complement(&v);
        assert!((&rows * &perp).norm() < 1e-10);
        assert!(((p.project(&v) + perp) - v).norm() < 1e-12);
    }

    #[test]
    fn gauss_hermite_integrates_moments() {
        let (t, w) = gauss_hermite(41);
        let moment = |p: i32| t.iter().zip(&w).map(|(t, w)| w * t.powi(p)).sum::<f64>();
        let sqrt_pi = std::f64::consts::PI.sqrt();
        assert!((moment(0) - sqrt_pi).abs() < 1e-12);
        assert!((moment(2) - sqrt_pi / 2.0).abs() < 1e-12);
        assert!((moment(4) - 3.0 * sqrt_pi / 4.0).abs() < 1e-12);
        assert!(moment(3).abs() < 1e-12);
    }
}
