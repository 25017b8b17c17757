use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Thin factored matrix `P diag(s) Qᵀ` with orthonormal columns in `P`, `Q`
/// and `s` positive and nonincreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRank {
    pub p: DMatrix<f64>,
    pub s: DVector<f64>,
    pub q: DMatrix<f64>,
}

impl LowRank {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        LowRank {
            p: DMatrix::zeros(rows, 0),
            s: DVector::zeros(0),
            q: DMatrix::zeros(cols, 0),
        }
    }

    pub fn rows(&self) -> usize {
        self.p.nrows()
    }

    pub fn cols(&self) -> usize {
        self.q.nrows()
    }

    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        (0..self.rank())
            .map(|k| self.p[(i, k)] * self.s[k] * self.q[(j, k)])
            .sum()
    }

    pub fn nuclear_norm(&self) -> f64 {
        self.s.sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut ps = self.p.clone();
        for (k, mut col) in ps.column_iter_mut().enumerate() {
            col *= self.s[k];
        }
        ps * self.q.transpose()
    }

    /// `self * v` without forming the dense matrix.
    pub fn mul(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let mut t = self.q.tr_mul(v);
        for (k, mut row) in t.row_iter_mut().enumerate() {
            row *= self.s[k];
        }
        &self.p * t
    }

    /// `selfᵀ * v` without forming the dense matrix.
    pub fn tr_mul(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let mut t = self.p.tr_mul(v);
        for (k, mut row) in t.row_iter_mut().enumerate() {
            row *= self.s[k];
        }
        &self.q * t
    }

    /// Keeps the `k` leading triplets.
    pub fn truncate(&self, k: usize) -> LowRank {
        let k = k.min(self.rank());
        LowRank {
            p: self.p.columns(0, k).into_owned(),
            s: self.s.rows(0, k).into_owned(),
            q: self.q.columns(0, k).into_owned(),
        }
    }

    /// Reorders triplets by decreasing singular value and drops those `<= tau`
    /// after subtracting `tau`.
    fn shrink(p: DMatrix<f64>, s: DVector<f64>, q: DMatrix<f64>, tau: f64) -> LowRank {
        let mut order: Vec<usize> = (0..s.len()).filter(|&k| s[k] > tau).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
        LowRank {
            p: p.select_columns(&order),
            s: DVector::from_iterator(order.len(), order.iter().map(|&k| s[k] - tau)),
            q: q.select_columns(&order),
        }
    }
}

/// Singular value thresholding of a dense matrix in factored form.
pub(crate) fn svt_factored(x: &DMatrix<f64>, tau: f64) -> LowRank {
    if x.is_empty() {
        return LowRank::zeros(x.nrows(), x.ncols());
    }
    let svd = x.clone().svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    LowRank::shrink(u, svd.singular_values, vt.transpose(), tau)
}

/// Replaces every singular value `σ` of `x` by `max(σ − τ, 0)`: the proximal
/// map of `τ‖·‖_*`.
pub fn svt(x: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    assert!(tau >= 0.0, "threshold must be nonnegative");
    if tau == 0.0 {
        return x.clone();
    }
    let lr = svt_factored(x, tau);
    if lr.rank() == 0 {
        return DMatrix::zeros(x.nrows(), x.ncols());
    }
    lr.to_dense()
}

/// A matrix known only through products with blocks of vectors.
pub trait LinearOperator {
    fn shape(&self) -> (usize, usize);
    fn apply(&self, v: &DMatrix<f64>) -> DMatrix<f64>;
    fn apply_t(&self, v: &DMatrix<f64>) -> DMatrix<f64>;
}

impl LinearOperator for DMatrix<f64> {
    fn shape(&self) -> (usize, usize) {
        (self.nrows(), self.ncols())
    }

    fn apply(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        self * v
    }

    fn apply_t(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        self.tr_mul(v)
    }
}

fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    let cols = m.ncols().min(m.nrows());
    m.qr().q().columns(0, cols).into_owned()
}

/// Approximate `k` leading singular triplets by randomized subspace iteration.
///
/// The sketch has `k + oversample` columns; `warm` (right singular vectors
/// from a nearby matrix) seeds the leading columns when given.
pub fn randomized_svd<O: LinearOperator + ?Sized, R: Rng>(
    op: &O,
    k: usize,
    oversample: usize,
    power_iters: usize,
    warm: Option<&DMatrix<f64>>,
    rng: &mut R,
) -> LowRank {
    let (m, n) = op.shape();
    let l = (k + oversample).min(m.min(n));
    if l == 0 {
        return LowRank::zeros(m, n);
    }
    let mut omega = DMatrix::from_fn(n, l, |_, _| rng.sample::<f64, _>(StandardNormal));
    if let Some(w) = warm {
        let c = w.ncols().min(l);
        omega.columns_mut(0, c).copy_from(&w.columns(0, c));
    }
    let mut y = orthonormalize(op.apply(&omega));
    for _ in 0..power_iters {
        let z = orthonormalize(op.apply_t(&y));
        y = orthonormalize(op.apply(&z));
    }
    // B = Yᵀ A, factored through Bᵀ = Aᵀ Y
    let bt = op.apply_t(&y);
    let svd = bt.svd(true, true);
    let (ub, vbt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let full = LowRank::shrink(&y * vbt.transpose(), svd.singular_values, ub, 0.0);
    full.truncate(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn svt_examples() {
        let x = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0]));
        let z = svt(&x, 2.0);
        assert!((z - DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]))).norm() < 1e-12);
        assert_eq!(svt(&x, 0.0), x);
        assert_eq!(svt(&x, 3.0), DMatrix::zeros(2, 2));
    }

    #[test]
    fn svt_matches_eigen_oracle() {
        // singular triplets from the symmetric eigenproblem of XᵀX
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x: DMatrix<f64> = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-2.0..2.0));
            let tau = rng.random_range(0.0..2.0);
            let eig = (x.transpose() * &x).symmetric_eigen();
            let mut oracle = DMatrix::zeros(3, 3);
            for k in 0..3 {
                let sigma: f64 = eig.eigenvalues[k].max(0.0).sqrt();
                if sigma > tau && sigma > 1e-12 {
                    let v = eig.eigenvectors.column(k);
                    let u = &x * v / sigma;
                    oracle += (sigma - tau) * u * v.transpose();
                }
            }
            assert!((svt(&x, tau) - oracle).norm() <= 1e-8);
        }
    }

    #[test]
    fn low_rank_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DMatrix::from_fn(7, 5, |_, _| rng.random_range(-1.0..1.0));
        let lr = svt_factored(&a, 0.0);
        assert!((lr.to_dense() - &a).norm() < 1e-12);
        let v = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
        assert!((lr.mul(&v) - &a * &v).norm() < 1e-12);
        let w = DMatrix::from_fn(7, 2, |_, _| rng.random_range(-1.0..1.0));
        assert!((lr.tr_mul(&w) - a.tr_mul(&w)).norm() < 1e-12);
        assert!((lr.get(3, 4) - a[(3, 4)]).abs() < 1e-12);
    }

    #[test]
    fn randomized_recovers_low_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = DMatrix::from_fn(60, 3, |_, _| rng.random_range(-1.0..1.0))
            * DMatrix::from_fn(3, 40, |_, _| rng.random_range(-1.0..1.0));
        let mut exact: Vec<f64> = a.clone().singular_values().iter().copied().collect();
        exact.sort_by(|x, y| y.total_cmp(x));
        let lr = randomized_svd(&a, 3, 10, 2, None, &mut rng);
        assert_eq!(lr.rank(), 3);
        for (s, e) in lr.s.iter().zip(&exact) {
            assert!((s - e).abs() < 1e-8);
        }
        assert!((lr.to_dense() - &a).norm() <= 1e-8 * a.norm());
    }
}
