use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FactorMethod, FactorPair, FitReport, ObservedMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfOptions {
    pub max_iter: usize,
    /// Stop when the relative objective decrease falls below this.
    pub tol: f64,
    pub seed: u64,
    /// Armijo sufficient-decrease constant of the backtracking search.
    pub armijo: f64,
}

impl Default for MfOptions {
    fn default() -> Self {
        MfOptions {
            max_iter: 2000,
            tol: 1e-5,
            seed: 0,
            armijo: 1e-4,
        }
    }
}

fn residuals(r: &ObservedMatrix, u: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    r.entries()
        .iter()
        .map(|&(i, j, v)| u.row(i).dot(&b.row(j)) - v)
        .collect()
}

/// `½‖P_Ω(UBᵀ − R)‖² + μ/2 (‖U‖² + ‖B‖²)`.
pub fn mf_objective(r: &ObservedMatrix, u: &DMatrix<f64>, b: &DMatrix<f64>, mu: f64) -> f64 {
    let fit: f64 = residuals(r, u, b).iter().map(|e| e * e).sum();
    0.5 * fit + 0.5 * mu * (u.norm_squared() + b.norm_squared())
}

/// Gradient of [`mf_objective`] with respect to `U` and `B`; costs
/// `O(|Ω| F + (m + n) F)`.
pub fn mf_gradient(r: &ObservedMatrix, u: &DMatrix<f64>, b: &DMatrix<f64>, mu: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut gu = u * mu;
    let mut gb = b * mu;
    let f = u.ncols();
    for (&(i, j, _), e) in r.entries().iter().zip(residuals(r, u, b)) {
        for k in 0..f {
            gu[(i, k)] += e * b[(j, k)];
            gb[(j, k)] += e * u[(i, k)];
        }
    }
    (gu, gb)
}

/// Full-batch gradient descent with backtracking on the regularized
/// factorization objective. Returns the factors and the objective history
/// (first entry is the value at initialization).
pub fn factorize_mf(
    r: &ObservedMatrix,
    rank: usize,
    mu: f64,
    opts: &MfOptions,
    metagraph: &str,
) -> Result<(FactorPair, FitReport)> {
    let (m, n) = r.shape();
    if rank == 0 {
        return Err(Error::Argument("rank must be at least 1".into()));
    }
    if 2 * rank > m.min(n) {
        return Err(Error::Argument(format!("rank {rank} exceeds min({m}, {n}) / 2")));
    }
    if !(mu >= 0.0) {
        return Err(Error::Argument(format!("mu must be nonnegative, got {mu}")));
    }
    if r.is_empty() {
        return Err(Error::Argument("no observed entries".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let normal = Normal::new(0.0, 0.1 / (rank as f64).sqrt()).unwrap();
    let mut u = DMatrix::from_fn(m, rank, |_, _| normal.sample(&mut rng));
    let mut b = DMatrix::from_fn(n, rank, |_, _| normal.sample(&mut rng));

    let mut f = mf_objective(r, &u, &b, mu);
    let mut history = vec![f];
    let mut step = 1.0;
    let mut iterations = 0;
    for _ in 0..opts.max_iter {
        iterations += 1;
        let (gu, gb) = mf_gradient(r, &u, &b, mu);
        let gnorm2 = gu.norm_squared() + gb.norm_squared();
        if gnorm2 == 0.0 {
            break;
        }
        // backtrack from twice the last accepted step
        step *= 2.0;
        let (nu, nb, nf) = loop {
            let nu = &u - &gu * step;
            let nb = &b - &gb * step;
            let nf = mf_objective(r, &nu, &nb, mu);
            if nf <= f - opts.armijo * step * gnorm2 {
                break (nu, nb, nf);
            }
            step *= 0.5;
            if step < 1e-20 {
                break (u.clone(), b.clone(), f);
            }
        };
        let decrease = f - nf;
        u = nu;
        b = nb;
        history.push(nf);
        let rel = if f > 0.0 { decrease / f } else { 0.0 };
        f = nf;
        if rel < opts.tol {
            break;
        }
    }

    Ok((
        FactorPair {
            user: u,
            item: b,
            metagraph: metagraph.to_owned(),
            method: FactorMethod::Mf,
        },
        FitReport {
            objective: history,
            iterations,
            full_rank: rank,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn rank_one_exact() {
        let target = DMatrix::from_row_slice(2, 2, &[2.0, 4.0, 1.0, 2.0]);
        let r = ObservedMatrix::from_dense(&target);
        let (pair, rep) = factorize_mf(&r, 1, 1e-6, &MfOptions::default(), "t").unwrap();
        let err = (pair.reconstruct() - &target).norm() / target.norm();
        assert!(err <= 1e-2, "relative error {err}");
        assert!(rep.objective.last().unwrap() <= &rep.objective[0]);
    }

    #[test]
    fn zero_observations_drive_factors_to_zero() {
        let r = ObservedMatrix::from_dense(&DMatrix::zeros(4, 4));
        let (pair, _) = factorize_mf(&r, 2, 0.1, &MfOptions::default(), "z").unwrap();
        assert!(pair.user.norm() <= 1e-3 && pair.item.norm() <= 1e-3);
    }

    #[test]
    fn argument_errors() {
        let r = ObservedMatrix::from_dense(&DMatrix::from_element(4, 4, 1.0));
        let o = MfOptions::default();
        assert!(matches!(factorize_mf(&r, 0, 0.1, &o, "x"), Err(Error::Argument(_))));
        assert!(matches!(factorize_mf(&r, 3, 0.1, &o, "x"), Err(Error::Argument(_))));
        let empty = ObservedMatrix::new(4, 4, vec![]).unwrap();
        assert!(matches!(factorize_mf(&empty, 1, 0.1, &o, "x"), Err(Error::Argument(_))));
    }

    #[test]
    fn objective_history_nonincreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let entries: Vec<_> = (0..12)
            .flat_map(|i| (0..10).map(move |j| (i, j)))
            .map(|(i, j)| (i, j, rng.random_range(0.0..3.0)))
            .collect();
        let r = ObservedMatrix::new(12, 10, entries).unwrap();
        let (_, rep) = factorize_mf(&r, 3, 0.05, &MfOptions::default(), "h").unwrap();
        for w in rep.objective.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..5 {
            let mut entries = Vec::new();
            for i in 0..6 {
                for j in 0..5 {
                    if rng.random_bool(0.6) {
                        entries.push((i, j, rng.random_range(-2.0..2.0)));
                    }
                }
            }
            let r = ObservedMatrix::new(6, 5, entries).unwrap();
            let u = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
            let b = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
            let mu = 0.3;
            let (gu, gb) = mf_gradient(&r, &u, &b, mu);
            let eps = 1e-6;
            let check = |analytic: f64, plus: f64, minus: f64| {
                let fd = (plus - minus) / (2.0 * eps);
                let rel = (analytic - fd).abs() / analytic.abs().max(1e-8);
                assert!(
                    rel <= 1e-5 || (analytic - fd).abs() < 1e-9,
                    "trial {trial}: {analytic} vs {fd}"
                );
            };
            for idx in 0..u.len() {
                let (mut up, mut um) = (u.clone(), u.clone());
                up[idx] += eps;
                um[idx] -= eps;
                check(gu[idx], mf_objective(&r, &up, &b, mu), mf_objective(&r, &um, &b, mu));
            }
            for idx in 0..b.len() {
                let (mut bp, mut bm) = (b.clone(), b.clone());
                bp[idx] += eps;
                bm[idx] -= eps;
                check(gb[idx], mf_objective(&r, &u, &bp, mu), mf_objective(&r, &u, &bm, mu));
            }
        }
    }
}
