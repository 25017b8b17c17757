use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::svd::{randomized_svd, svt_factored, LinearOperator, LowRank};
use super::{FactorMethod, FactorPair, FitReport, ObservedMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NnrOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Number of leading singular triplets emitted as features; `None`
    /// keeps all of them.
    pub rank_cap: Option<usize>,
    /// Start from a large weight and shrink it geometrically towards `μ`.
    pub continuation: bool,
    /// Per-iteration shrink factor of the continuation schedule.
    pub continuation_decay: f64,
    /// Matrices with at most this many cells use a dense SVD per step.
    pub dense_limit: usize,
    pub oversample: usize,
    pub power_iters: usize,
    pub seed: u64,
}

impl Default for NnrOptions {
    fn default() -> Self {
        NnrOptions {
            max_iter: 1000,
            tol: 1e-7,
            rank_cap: Some(10),
            continuation: true,
            continuation_decay: 0.8,
            dense_limit: 1 << 20,
            oversample: 10,
            power_iters: 2,
            seed: 0,
        }
    }
}

/// Final iterate of a completion run, kept as `P Σ Qᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct NnrState {
    pub x: LowRank,
    pub mu: f64,
    pub objective: Vec<f64>,
    pub iterations: usize,
}

impl NnrState {
    pub fn report(&self) -> FitReport {
        FitReport {
            objective: self.objective.clone(),
            iterations: self.iterations,
            full_rank: self.x.rank(),
        }
    }
}

/// `½‖P_Ω(X − R)‖² + μ‖X‖_*`.
fn objective(r: &ObservedMatrix, x: &LowRank, mu: f64) -> f64 {
    let fit: f64 = r
        .entries()
        .iter()
        .map(|&(i, j, v)| {
            let e = x.get(i, j) - v;
            e * e
        })
        .sum();
    0.5 * fit + mu * x.nuclear_norm()
}

/// `Y + P_Ω(R − Y)` with `Y = Σ c_k X_k`.
struct Proximal<'a> {
    terms: Vec<(f64, &'a LowRank)>,
    /// `R − Y` on the observed positions.
    correction: Vec<(usize, usize, f64)>,
    shape: (usize, usize),
}

impl<'a> Proximal<'a> {
    fn new(r: &ObservedMatrix, terms: Vec<(f64, &'a LowRank)>) -> Self {
        let correction = r
            .entries()
            .iter()
            .map(|&(i, j, v)| {
                let y: f64 = terms.iter().map(|(c, x)| c * x.get(i, j)).sum();
                (i, j, v - y)
            })
            .collect();
        Proximal {
            terms,
            correction,
            shape: r.shape(),
        }
    }

    fn dense(&self) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.shape.0, self.shape.1);
        for (c, x) in &self.terms {
            if x.rank() > 0 {
                z += x.to_dense() * *c;
            }
        }
        for &(i, j, d) in &self.correction {
            z[(i, j)] += d;
        }
        z
    }
}

impl LinearOperator for Proximal<'_> {
    fn shape(&self) -> (usize, usize) {
        self.shape
    }

    fn apply(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.shape.0, v.ncols());
        for (c, x) in &self.terms {
            if x.rank() > 0 {
                out += x.mul(v) * *c;
            }
        }
        for &(i, j, d) in &self.correction {
            for k in 0..v.ncols() {
                out[(i, k)] += d * v[(j, k)];
            }
        }
        out
    }

    fn apply_t(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.shape.1, v.ncols());
        for (c, x) in &self.terms {
            if x.rank() > 0 {
                out += x.tr_mul(v) * *c;
            }
        }
        for &(i, j, d) in &self.correction {
            for k in 0..v.ncols() {
                out[(j, k)] += d * v[(i, k)];
            }
        }
        out
    }
}

struct Shrinker {
    dense: bool,
    oversample: usize,
    power_iters: usize,
    rng: ChaCha8Rng,
}

impl Shrinker {
    /// `svt(Z, τ)` for the operator `Z`; the randomized route grows its
    /// sketch until some computed singular value falls below `τ`.
    fn shrink(&mut self, z: &Proximal<'_>, tau: f64, warm: &LowRank) -> LowRank {
        if self.dense {
            return svt_factored(&z.dense(), tau);
        }
        let (m, n) = z.shape();
        let full = m.min(n);
        let mut k = (warm.rank() + 5).min(full);
        loop {
            let warm_q = (warm.rank() > 0).then_some(&warm.q);
            let lr = randomized_svd(z, k, self.oversample, self.power_iters, warm_q, &mut self.rng);
            let saturated = lr.rank() == k && lr.s.iter().all(|&s| s > tau);
            if !saturated || k == full {
                let keep = lr.s.iter().filter(|&&s| s > tau).count();
                let mut out = lr.truncate(keep);
                out.s.add_scalar_mut(-tau);
                return out;
            }
            k = (2 * k).min(full);
        }
    }
}

/// Nuclear-norm regularized completion of the observed entries by
/// accelerated proximal gradient (unit step, restart whenever the objective
/// would increase). The returned factors satisfy `U Bᵀ = P Σ Qᵀ` up to the
/// optional rank cap.
pub fn factorize_nnr(
    r: &ObservedMatrix,
    mu: f64,
    opts: &NnrOptions,
    metagraph: &str,
) -> Result<(FactorPair, NnrState)> {
    if !(mu > 0.0) {
        return Err(Error::Argument(format!("mu must be positive, got {mu}")));
    }
    if r.is_empty() {
        return Err(Error::Argument("no observed entries".into()));
    }
    let (m, n) = r.shape();
    let mut shrinker = Shrinker {
        dense: m.saturating_mul(n) <= opts.dense_limit,
        oversample: opts.oversample,
        power_iters: opts.power_iters,
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
    };

    let zero = LowRank::zeros(m, n);
    // the first step from X = 0 thresholds P_Ω(R) itself
    let first = Proximal::new(r, vec![]);
    let sigma_max = shrinker.shrink(&first, 0.0, &zero).s.get(0).copied().unwrap_or(0.0);
    if sigma_max <= mu {
        return Err(Error::Overregularized {
            sigma_max,
            threshold: mu,
        });
    }

    let mut mu_t = if opts.continuation { mu.max(0.5 * sigma_max) } else { mu };
    let mut prev = zero.clone();
    let mut cur = zero;
    let mut f_cur = objective(r, &cur, mu_t);
    let mut history = vec![f_cur];
    let mut theta: f64 = 1.0;
    let mut iterations = 0;
    for _ in 0..opts.max_iter {
        iterations += 1;
        if opts.continuation {
            mu_t = mu.max(mu_t * opts.continuation_decay);
        }
        // objective of the current iterate under this iteration's weight
        let f_ref = objective(r, &cur, mu_t);
        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        let beta = (theta - 1.0) / theta_next;

        let mut next = if beta > 0.0 {
            let z = Proximal::new(r, vec![(1.0 + beta, &cur), (-beta, &prev)]);
            shrinker.shrink(&z, mu_t, &cur)
        } else {
            shrinker.shrink(&Proximal::new(r, vec![(1.0, &cur)]), mu_t, &cur)
        };
        let mut f_next = objective(r, &next, mu_t);
        if f_next > f_ref && beta > 0.0 {
            debug!("nnr restart at iteration {iterations}");
            next = shrinker.shrink(&Proximal::new(r, vec![(1.0, &cur)]), mu_t, &cur);
            f_next = objective(r, &next, mu_t);
            theta = 1.0;
        } else {
            theta = theta_next;
        }
        let at_target = mu_t <= mu;
        let rel = (f_ref - f_next).abs() / f_ref.max(f64::MIN_POSITIVE);
        prev = std::mem::replace(&mut cur, next);
        f_cur = f_next;
        history.push(f_cur);
        if at_target && rel < opts.tol {
            break;
        }
    }

    let full_rank = cur.rank();
    if full_rank == 0 {
        return Err(Error::Overregularized {
            sigma_max,
            threshold: mu,
        });
    }
    let emitted = match opts.rank_cap {
        Some(cap) if cap < full_rank => {
            info!("{metagraph}: nnr rank {full_rank} capped at {cap}");
            cur.truncate(cap)
        }
        _ => cur.clone(),
    };
    let (user, item) = split(&emitted);
    Ok((
        FactorPair {
            user,
            item,
            metagraph: metagraph.to_owned(),
            method: FactorMethod::Nnr,
        },
        NnrState {
            x: cur,
            mu,
            objective: history,
            iterations,
        },
    ))
}

/// `U = P Σ^½`, `B = Q Σ^½`.
fn split(x: &LowRank) -> (DMatrix<f64>, DMatrix<f64>) {
    let root: DVector<f64> = x.s.map(f64::sqrt);
    let mut u = x.p.clone();
    let mut b = x.q.clone();
    for k in 0..x.rank() {
        u.column_mut(k).scale_mut(root[k]);
        b.column_mut(k).scale_mut(root[k]);
    }
    (u, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn planted(m: usize, n: usize, rank: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(m, rank, |_, _| rng.random_range(-1.0..1.0))
            * DMatrix::from_fn(rank, n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn recovers_planted_rank_two() {
        let x = planted(5, 5, 2, 4);
        let r = ObservedMatrix::from_dense(&x);
        let opts = NnrOptions::default();
        let (pair, state) = factorize_nnr(&r, 1e-3, &opts, "p").unwrap();
        assert_eq!(state.x.rank(), 2);
        let err = (state.x.to_dense() - &x).norm() / x.norm();
        assert!(err <= 1e-2, "relative error {err}");
        let split_err = (pair.reconstruct() - state.x.to_dense()).norm();
        assert!(split_err <= 1e-10 * state.x.to_dense().norm());
    }

    #[test]
    fn objective_nonincreasing() {
        let x = planted(20, 15, 3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let entries: Vec<_> = (0..20)
            .flat_map(|i| (0..15).map(move |j| (i, j)))
            .collect::<Vec<_>>()
            .into_iter()
            .filter(|_| rng.random_bool(0.5))
            .map(|(i, j)| (i, j, x[(i, j)]))
            .collect();
        let r = ObservedMatrix::new(20, 15, entries).unwrap();
        for continuation in [false, true] {
            let opts = NnrOptions {
                continuation,
                max_iter: 200,
                ..Default::default()
            };
            let (_, state) = factorize_nnr(&r, 0.05, &opts, "h").unwrap();
            for w in state.objective.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} > {}", w[1], w[0]);
            }
        }
    }

    #[test]
    fn randomized_route_matches_dense() {
        let x = planted(40, 30, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let entries: Vec<_> = (0..40)
            .flat_map(|i| (0..30).map(move |j| (i, j)))
            .collect::<Vec<_>>()
            .into_iter()
            .filter(|_| rng.random_bool(0.6))
            .map(|(i, j)| (i, j, x[(i, j)]))
            .collect();
        let r = ObservedMatrix::new(40, 30, entries).unwrap();
        let dense = factorize_nnr(&r, 0.01, &NnrOptions::default(), "d").unwrap().1;
        let opts = NnrOptions {
            dense_limit: 0,
            ..Default::default()
        };
        let sketch = factorize_nnr(&r, 0.01, &opts, "s").unwrap().1;
        let (a, b) = (dense.x.to_dense(), sketch.x.to_dense());
        assert!((a - &b).norm() <= 1e-4 * b.norm());
    }

    #[test]
    fn overregularized_and_argument_errors() {
        let r = ObservedMatrix::from_dense(&DMatrix::from_element(3, 3, 1.0));
        // σ_max = 3
        assert!(matches!(
            factorize_nnr(&r, 3.5, &NnrOptions::default(), "o"),
            Err(Error::Overregularized { .. })
        ));
        assert!(matches!(
            factorize_nnr(&r, 0.0, &NnrOptions::default(), "o"),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn rank_cap_truncates_features() {
        let x = planted(12, 10, 4, 1);
        let r = ObservedMatrix::from_dense(&x);
        let opts = NnrOptions {
            rank_cap: Some(2),
            ..Default::default()
        };
        let (pair, state) = factorize_nnr(&r, 1e-3, &opts, "c").unwrap();
        assert_eq!(pair.rank(), 2);
        assert_eq!(state.report().full_rank, 4);
    }
}
