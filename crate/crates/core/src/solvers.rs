//! Minimizers of the regularized factorization machine objective: the
//! nonmonotone accelerated proximal gradient method, proximal SVRG, and a
//! proximal SGD baseline. All three work on the smooth augmented loss plus
//! the convex group penalty and share the same group prox.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use log::{debug, warn};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fm::{
    augmented_grad, mse_loss, objective_parts, prox_group, FeatureTable, FmParams, GroupLayout, RegConfig,
};
use crate::metrics::nnz_ratio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Nmapg,
    Svrg,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub algorithm: Algorithm,
    /// Step size `α`; estimated from the data when absent.
    pub step: Option<f64>,
    /// Outer iterations (nmAPG) or epochs (SVRG, SGD).
    pub max_iter: usize,
    /// Stop when the relative objective change between consecutive
    /// checkpoints falls below this; `0` runs all iterations.
    pub tol: f64,
    /// Sufficient-decrease margin of the nmAPG acceptance test.
    pub delta: f64,
    /// Weight of the past in the nmAPG running objective average.
    pub history_decay: f64,
    /// Take the nmAPG trial prox step at the extrapolated point (`true`) or at
    /// the current iterate.
    pub extrapolated_prox: bool,
    pub batch_size: Option<usize>,
    /// Inner steps per SVRG/SGD epoch.
    pub inner_steps: Option<usize>,
    /// SGD step schedule `α / (1 + decay · t)` over inner steps `t`.
    pub sgd_decay: f64,
    pub init_v_std: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            algorithm: Algorithm::Nmapg,
            step: None,
            max_iter: 1000,
            tol: 1e-8,
            delta: 1e-3,
            history_decay: 0.8,
            extrapolated_prox: true,
            batch_size: None,
            inner_steps: None,
            sgd_decay: 1e-3,
            init_v_std: 0.01,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn with_algorithm(algorithm: Algorithm) -> Self {
        SolverConfig {
            algorithm,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.step {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Argument(format!("step size must be positive, got {a}")));
            }
        }
        if !(self.delta > 0.0) {
            return Err(Error::Argument(format!("delta must be positive, got {}", self.delta)));
        }
        if !(0.0..1.0).contains(&self.history_decay) {
            return Err(Error::Argument(format!(
                "history decay must lie in [0, 1), got {}",
                self.history_decay
            )));
        }
        if self.batch_size == Some(0) || self.inner_steps == Some(0) {
            return Err(Error::Argument("batch size and inner steps must be positive".into()));
        }
        if !(self.sgd_decay >= 0.0) {
            return Err(Error::Argument("sgd decay must be nonnegative".into()));
        }
        Ok(())
    }

    /// Mini-batch size and inner step count with `m_b · B = N` unless both are
    /// given explicitly.
    pub fn batching(&self, n: usize) -> Result<(usize, usize)> {
        match (self.batch_size, self.inner_steps) {
            (Some(mb), Some(b)) => {
                if mb * b != n {
                    return Err(Error::Argument(format!(
                        "batch size {mb} x inner steps {b} != {n} samples"
                    )));
                }
                Ok((mb, b))
            }
            (Some(mb), None) => Ok((mb.min(n), n.div_ceil(mb))),
            (None, Some(b)) => Ok((n.div_ceil(b), b)),
            (None, None) => {
                let mb = 128.min(n / 10).max(1);
                Ok((mb, n.div_ceil(mb)))
            }
        }
    }
}

/// A training problem: samples, their group structure and the penalty.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub train: &'a FeatureTable,
    pub layout: &'a GroupLayout,
    pub reg: RegConfig,
    pub k: usize,
    /// Scored at every checkpoint when present.
    pub valid: Option<&'a FeatureTable>,
    /// Warm start; the default initialization otherwise.
    pub start: Option<&'a FmParams>,
}

impl Problem<'_> {
    fn check(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::Argument("no training samples".into()));
        }
        if self.train.d() != self.layout.d() {
            return Err(Error::Shape(format!(
                "table width {} but layout width {}",
                self.train.d(),
                self.layout.d()
            )));
        }
        if self.k == 0 {
            return Err(Error::Argument("K must be at least 1".into()));
        }
        if let Some(p) = self.start {
            if p.d() != self.layout.d() || p.k != self.k {
                return Err(Error::Shape(format!(
                    "warm start has d = {}, K = {}; problem has d = {}, K = {}",
                    p.d(),
                    p.k,
                    self.layout.d(),
                    self.k
                )));
            }
        }
        self.reg.validate()
    }

    /// `h̄ = ℓ̄ + κ₀(λ̂φ̂ + λ̄φ̄)`, which equals `h`.
    pub fn objective(&self, p: &FmParams) -> f64 {
        objective_parts(p, self.train, self.layout, &self.reg)
            .map(|o| o.total())
            .unwrap_or(f64::NAN)
    }

    fn prox(&self, p: &mut FmParams, alpha: f64) {
        let (tw, tv) = self.reg.thresholds(self.layout, alpha);
        prox_group(p, self.layout, &tw, &tv);
    }

    /// `prox(x − α ∇ℓ̄(x))`.
    fn prox_step(&self, x: &FmParams, grad: &FmParams, alpha: f64) -> FmParams {
        let mut z = x.clone();
        z.axpy(-alpha, grad);
        self.prox(&mut z, alpha);
        z
    }

    /// Starting point: the warm start if given, else `w = 0`, `b` the mean
    /// label and small Gaussian `V`.
    pub fn init(&self, cfg: &SolverConfig) -> FmParams {
        if let Some(p) = self.start {
            return p.clone();
        }
        FmParams::init(
            self.layout.d(),
            self.k,
            self.train.label_mean(),
            cfg.init_v_std,
            cfg.seed,
        )
    }

    /// `2 λ_max` of the second moment of `[1, x]`: the curvature of the mean
    /// squared error in `(b, w)`.
    pub fn lipschitz_estimate(&self) -> f64 {
        let t = self.train;
        let d = t.d();
        let n = t.len() as f64;
        let mut v = vec![1.0; d + 1];
        let mut lambda = 1.0;
        for _ in 0..30 {
            let mut out = vec![0.0; d + 1];
            for r in 0..t.len() {
                let (idx, val) = t.row(r);
                let dot = v[0] + idx.iter().zip(val).map(|(&i, &x)| v[i as usize + 1] * x).sum::<f64>();
                out[0] += dot;
                for (&i, &x) in idx.iter().zip(val) {
                    out[i as usize + 1] += dot * x;
                }
            }
            let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt() / n;
            if norm == 0.0 {
                break;
            }
            lambda = norm;
            v = out.iter().map(|x| x / (norm * n)).collect();
        }
        2.0 * lambda
    }
}

/// `‖x − prox(x − α∇ℓ̄(x))‖ / α`, the prox-gradient residual; zero exactly
/// at critical points.
pub fn prox_residual(problem: &Problem<'_>, p: &FmParams, alpha: f64) -> f64 {
    let (_, g) = augmented_grad(p, problem.layout, &problem.reg, problem.train, None);
    let z = problem.prox_step(p, &g, alpha);
    let mut diff = p.clone();
    diff.axpy(-1.0, &z);
    (diff.b * diff.b + diff.sq_norm_wv()).sqrt() / alpha
}

/// nmAPG bookkeeping for one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Acceptance {
    /// Running average `c_t` the trial point was tested against.
    pub c: f64,
    /// `Δ_t`, squared distance of the trial point from the extrapolation.
    pub delta_sq: f64,
    /// `h̄` at the trial point.
    pub trial: f64,
    /// Whether the trial point passed `h̄ ≤ c_t − δΔ_t`.
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub grad_evals_over_n: f64,
    pub objective: f64,
    pub rmse_valid: Option<f64>,
    pub nnz: f64,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptance: Option<Acceptance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub algorithm: Algorithm,
    /// Step size in effect at the end of the run.
    pub step: f64,
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn final_objective(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.objective)
    }

    /// One JSON object per record.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Gradient evaluations (in units of `N`) at the first checkpoint whose
    /// objective is within `rel` of `target`.
    pub fn evals_to_reach(&self, target: f64, rel: f64) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.objective <= target + rel * target.abs())
            .map(|r| r.grad_evals_over_n)
    }
}

struct Recorder<'a> {
    problem: &'a Problem<'a>,
    start: Instant,
    records: Vec<TraceRecord>,
}

impl<'a> Recorder<'a> {
    fn new(problem: &'a Problem<'a>) -> Self {
        Recorder {
            problem,
            start: Instant::now(),
            records: Vec::new(),
        }
    }

    fn push(&mut self, iter: usize, evals: f64, objective: f64, p: &FmParams, acceptance: Option<Acceptance>) {
        let rmse_valid = self
            .problem
            .valid
            .filter(|v| !v.is_empty())
            .and_then(|v| mse_loss(p, v).ok())
            .map(f64::sqrt);
        self.records.push(TraceRecord {
            iter,
            grad_evals_over_n: evals,
            objective,
            rmse_valid,
            nnz: nnz_ratio(p),
            seconds: self.start.elapsed().as_secs_f64(),
            acceptance,
        });
    }

    /// Relative change between the last two recorded objectives.
    fn converged(&self, tol: f64) -> bool {
        if tol <= 0.0 || self.records.len() < 2 {
            return false;
        }
        let a = self.records[self.records.len() - 2].objective;
        let b = self.records[self.records.len() - 1].objective;
        (a - b).abs() <= tol * a.abs().max(f64::MIN_POSITIVE)
    }

    fn finish(self, algorithm: Algorithm, step: f64) -> TrainTrace {
        TrainTrace {
            algorithm,
            step,
            records: self.records,
        }
    }
}

/// Dispatches on `cfg.algorithm`.
pub fn train(problem: &Problem<'_>, cfg: &SolverConfig) -> Result<(FmParams, TrainTrace)> {
    match cfg.algorithm {
        Algorithm::Nmapg => train_nmapg(problem, cfg),
        Algorithm::Svrg => train_svrg(problem, cfg),
        Algorithm::Sgd => train_sgd(problem, cfg),
    }
}

/// Largest number of step halvings before a run is declared divergent.
const MAX_HALVINGS: usize = 30;

/// Nonmonotone accelerated proximal gradient.
pub fn train_nmapg(problem: &Problem<'_>, cfg: &SolverConfig) -> Result<(FmParams, TrainTrace)> {
    problem.check()?;
    cfg.validate()?;
    let mut alpha = cfg.step.unwrap_or_else(|| 1.0 / problem.lipschitz_estimate());
    let mut rec = Recorder::new(problem);

    let mut x = problem.init(cfg);
    let mut x_prev = x.clone();
    let mut z = x.clone();
    let (mut a_prev, mut a) = (0.0f64, 1.0f64);
    let mut h_x = problem.objective(&x);
    if !h_x.is_finite() {
        return Err(Error::Divergence { iter: 0 });
    }
    let mut c = h_x;
    let mut q = 1.0;
    let mut evals = 0.0;
    let mut halvings = 0;
    rec.push(0, evals, h_x, &x, None);

    for t in 1..=cfg.max_iter {
        let mut y = x.clone();
        y.axpy(a_prev / a, &z);
        y.axpy(-a_prev / a, &x);
        y.axpy((a_prev - 1.0) / a, &x);
        y.axpy(-(a_prev - 1.0) / a, &x_prev);

        let mut grad_x: Option<FmParams> = None;
        let trial = if cfg.extrapolated_prox {
            let (_, gy) = augmented_grad(&y, problem.layout, &problem.reg, problem.train, None);
            evals += 1.0;
            problem.prox_step(&y, &gy, alpha)
        } else {
            let (_, gx) = augmented_grad(&x, problem.layout, &problem.reg, problem.train, None);
            evals += 1.0;
            let s = problem.prox_step(&x, &gx, alpha);
            grad_x = Some(gx);
            s
        };
        let mut diff = trial.clone();
        diff.axpy(-1.0, &y);
        let delta_sq = diff.b * diff.b + diff.sq_norm_wv();
        let h_trial = problem.objective(&trial);
        let accepted = h_trial <= c - cfg.delta * delta_sq;

        let (next, h_next) = if accepted {
            (trial.clone(), h_trial)
        } else {
            let gx = match grad_x.take() {
                Some(g) => g,
                None => {
                    evals += 1.0;
                    augmented_grad(&x, problem.layout, &problem.reg, problem.train, None).1
                }
            };
            let fallback = problem.prox_step(&x, &gx, alpha);
            let h_fb = problem.objective(&fallback);
            if h_fb < h_trial {
                (fallback, h_fb)
            } else {
                (trial.clone(), h_trial)
            }
        };

        // no decrease even from the plain prox step: the step is too long
        if !h_next.is_finite() || h_next > c * (1.0 + 1e-12) + 1e-300 {
            halvings += 1;
            if halvings > MAX_HALVINGS || (!h_next.is_finite() && !x.is_finite()) {
                return Err(Error::Divergence { iter: t });
            }
            alpha *= 0.5;
            debug!("nmapg: no decrease at iteration {t}, halving step to {alpha:e}");
            z = x.clone();
            x_prev = x.clone();
            a_prev = 0.0;
            a = 1.0;
            continue;
        }

        z = trial;
        let a_next = 0.5 * ((4.0 * a * a + 1.0).sqrt() + 1.0);
        a_prev = a;
        a = a_next;
        let q_next = cfg.history_decay * q + 1.0;
        let c_t = c;
        c = (cfg.history_decay * q * c + h_next) / q_next;
        q = q_next;
        x_prev = std::mem::replace(&mut x, next);
        h_x = h_next;
        rec.push(
            t,
            evals,
            h_x,
            &x,
            Some(Acceptance {
                c: c_t,
                delta_sq,
                trial: h_trial,
                accepted,
            }),
        );
        if rec.converged(cfg.tol) {
            debug!("nmapg converged after {t} iterations");
            break;
        }
    }
    Ok((x, rec.finish(Algorithm::Nmapg, alpha)))
}

/// SVRG step: `(1/m_b) Σ_{i∈batch} (∇ℓ̄_i(x) − ∇ℓ̄_i(x̃)) + ∇ℓ̄(x̃)`.
pub fn svrg_direction(
    problem: &Problem<'_>,
    x: &FmParams,
    snapshot: &FmParams,
    full_grad: &FmParams,
    batch: &[usize],
) -> FmParams {
    let (_, mut d) = augmented_grad(x, problem.layout, &problem.reg, problem.train, Some(batch));
    let (_, gs) = augmented_grad(snapshot, problem.layout, &problem.reg, problem.train, Some(batch));
    d.axpy(-1.0, &gs);
    d.axpy(1.0, full_grad);
    d
}

/// Variance reduction permits a constant step on the scale of `1/L̂`.
fn default_svrg_step(problem: &Problem<'_>) -> f64 {
    0.25 / problem.lipschitz_estimate()
}

/// Initial SGD step; the schedule then decays it.
fn default_sgd_step(problem: &Problem<'_>) -> f64 {
    0.01f64.min(0.25 / problem.lipschitz_estimate())
}

/// Proximal SVRG: each epoch takes a full gradient at the snapshot, then
/// `B` variance-reduced mini-batch prox steps; the next snapshot is the
/// average of the inner iterates.
pub fn train_svrg(problem: &Problem<'_>, cfg: &SolverConfig) -> Result<(FmParams, TrainTrace)> {
    problem.check()?;
    cfg.validate()?;
    let n = problem.train.len();
    let (mb, inner) = cfg.batching(n)?;
    let mut alpha = cfg.step.unwrap_or_else(|| default_svrg_step(problem));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut rec = Recorder::new(problem);

    let mut snapshot = problem.init(cfg);
    let mut x = snapshot.clone();
    let mut evals = 0.0;
    let mut halved = false;
    rec.push(0, evals, problem.objective(&snapshot), &snapshot, None);

    let mut t = 0;
    while t < cfg.max_iter {
        t += 1;
        let (_, full) = augmented_grad(&snapshot, problem.layout, &problem.reg, problem.train, None);
        evals += 1.0;
        let mut sum = FmParams::zeros(snapshot.d(), snapshot.k);
        for _ in 0..inner {
            let batch = index::sample(&mut rng, n, mb).into_vec();
            let d = svrg_direction(problem, &x, &snapshot, &full, &batch);
            evals += 2.0 * mb as f64 / n as f64;
            x.axpy(-alpha, &d);
            problem.prox(&mut x, alpha);
            sum.axpy(1.0, &x);
        }
        let avg = sum.scaled(1.0 / inner as f64);
        let h = problem.objective(&avg);
        if !h.is_finite() {
            if halved {
                return Err(Error::Divergence { iter: t });
            }
            halved = true;
            alpha *= 0.5;
            warn!("svrg: non-finite objective in epoch {t}, halving step to {alpha:e}");
            x = snapshot.clone();
            continue;
        }
        snapshot = avg;
        rec.push(t, evals, h, &snapshot, None);
        if rec.converged(cfg.tol) {
            break;
        }
    }
    Ok((snapshot, rec.finish(Algorithm::Svrg, alpha)))
}

/// Proximal SGD with step `α / (1 + decay · t)`.
pub fn train_sgd(problem: &Problem<'_>, cfg: &SolverConfig) -> Result<(FmParams, TrainTrace)> {
    problem.check()?;
    cfg.validate()?;
    let n = problem.train.len();
    let (mb, inner) = cfg.batching(n)?;
    let mut alpha = cfg.step.unwrap_or_else(|| default_sgd_step(problem));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut rec = Recorder::new(problem);

    let mut x = problem.init(cfg);
    let mut evals = 0.0;
    let mut step_count = 0usize;
    let mut halved = false;
    rec.push(0, evals, problem.objective(&x), &x, None);

    let mut t = 0;
    while t < cfg.max_iter {
        t += 1;
        let start = x.clone();
        for _ in 0..inner {
            let batch = index::sample(&mut rng, n, mb).into_vec();
            let (_, g) = augmented_grad(&x, problem.layout, &problem.reg, problem.train, Some(&batch));
            evals += mb as f64 / n as f64;
            let a = alpha / (1.0 + cfg.sgd_decay * step_count as f64);
            step_count += 1;
            x.axpy(-a, &g);
            problem.prox(&mut x, a);
        }
        let h = problem.objective(&x);
        if !h.is_finite() {
            if halved {
                return Err(Error::Divergence { iter: t });
            }
            halved = true;
            alpha *= 0.5;
            warn!("sgd: non-finite objective in epoch {t}, halving step to {alpha:e}");
            x = start;
            continue;
        }
        rec.push(t, evals, h, &x, None);
        if rec.converged(cfg.tol) {
            break;
        }
    }
    Ok((x, rec.finish(Algorithm::Sgd, alpha)))
}
