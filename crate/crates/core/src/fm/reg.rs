use serde::{Deserialize, Serialize};

use super::{mse_grad, sq_error_sum, FeatureTable, FmParams, GroupLayout};
use crate::error::{Error, Result};

/// `lim_{t→0⁺} κ'(t)`; equal to one for both supported penalties.
pub const KAPPA0: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegMode {
    /// `κ(t) = t`: group lasso.
    Convex,
    /// `κ(t) = log(1 + t)`: log-sum penalty.
    Lsp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupWeighting {
    Unit,
    SqrtWidth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub mode: RegMode,
    pub lambda_w: f64,
    pub lambda_v: f64,
    pub weighting: GroupWeighting,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            mode: RegMode::Convex,
            lambda_w: 0.0,
            lambda_v: 0.0,
            weighting: GroupWeighting::Unit,
        }
    }
}

impl RegConfig {
    pub fn new(mode: RegMode, lambda: f64) -> Self {
        RegConfig {
            mode,
            lambda_w: lambda,
            lambda_v: lambda,
            weighting: GroupWeighting::Unit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_w >= 0.0 && self.lambda_v >= 0.0) {
            return Err(Error::Argument(format!(
                "regularization weights must be nonnegative, got {} and {}",
                self.lambda_w, self.lambda_v
            )));
        }
        Ok(())
    }

    /// Per-group weights `η_l`, shared by `w` and `V`.
    pub fn eta(&self, layout: &GroupLayout) -> Vec<f64> {
        layout
            .groups()
            .iter()
            .map(|g| match self.weighting {
                GroupWeighting::Unit => 1.0,
                GroupWeighting::SqrtWidth => (g.width.max(1) as f64).sqrt(),
            })
            .collect()
    }

    fn kappa(&self, t: f64) -> f64 {
        match self.mode {
            RegMode::Convex => t,
            RegMode::Lsp => t.ln_1p(),
        }
    }

    /// Prox thresholds `α κ₀ λ η_l` for the `w` and `V` groups.
    pub fn thresholds(&self, layout: &GroupLayout, alpha: f64) -> (Vec<f64>, Vec<f64>) {
        let eta = self.eta(layout);
        (
            eta.iter().map(|e| alpha * KAPPA0 * self.lambda_w * e).collect(),
            eta.iter().map(|e| alpha * KAPPA0 * self.lambda_v * e).collect(),
        )
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `‖w^l‖₂` and `‖V^l‖_F` for every group.
pub fn group_norms(p: &FmParams, layout: &GroupLayout) -> (Vec<f64>, Vec<f64>) {
    layout
        .groups()
        .iter()
        .map(|g| {
            let r = g.range();
            (norm(&p.w[r.clone()]), norm(&p.v[r.start * p.k..r.end * p.k]))
        })
        .unzip()
}

fn weighted(cfg: &RegConfig, layout: &GroupLayout, p: &FmParams, kappa: impl Fn(f64) -> f64) -> f64 {
    let eta = cfg.eta(layout);
    let (nw, nv) = group_norms(p, layout);
    let w: f64 = eta.iter().zip(&nw).map(|(e, &t)| e * kappa(t)).sum();
    let v: f64 = eta.iter().zip(&nv).map(|(e, &t)| e * kappa(t)).sum();
    cfg.lambda_w * w + cfg.lambda_v * v
}

/// `λ̂ ψ̂(w) + λ̄ ψ̄(V)` with `ψ = Σ η_l κ(‖·‖)`.
pub fn reg_value(p: &FmParams, layout: &GroupLayout, cfg: &RegConfig) -> f64 {
    weighted(cfg, layout, p, |t| cfg.kappa(t))
}

/// Pieces of the smooth-plus-convex form: `h = loss + g + κ₀ (λ̂φ̂ + λ̄φ̄)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParts {
    pub loss: f64,
    /// `λ̂[ψ̂ − κ₀φ̂] + λ̄[ψ̄ − κ₀φ̄]`; identically zero for the group lasso.
    pub g: f64,
    /// `λ̂φ̂ + λ̄φ̄`.
    pub convex: f64,
}

impl ObjectiveParts {
    /// The augmented loss `ℓ̄ = ℓ + g`.
    pub fn smooth(&self) -> f64 {
        self.loss + self.g
    }

    pub fn total(&self) -> f64 {
        self.smooth() + KAPPA0 * self.convex
    }
}

fn g_value(p: &FmParams, layout: &GroupLayout, cfg: &RegConfig) -> f64 {
    match cfg.mode {
        RegMode::Convex => 0.0,
        RegMode::Lsp => weighted(cfg, layout, p, |t| t.ln_1p() - KAPPA0 * t),
    }
}

pub fn objective_parts(
    p: &FmParams,
    table: &FeatureTable,
    layout: &GroupLayout,
    cfg: &RegConfig,
) -> Result<ObjectiveParts> {
    if table.is_empty() {
        return Err(Error::Argument("objective of an empty table".into()));
    }
    Ok(ObjectiveParts {
        loss: sq_error_sum(p, table, None) / table.len() as f64,
        g: g_value(p, layout, cfg),
        convex: weighted(cfg, layout, p, |t| t),
    })
}

/// `h = MSE + λ̂ψ̂(w) + λ̄ψ̄(V)`.
pub fn objective(p: &FmParams, table: &FeatureTable, layout: &GroupLayout, cfg: &RegConfig) -> Result<f64> {
    Ok(super::mse_loss(p, table)? + reg_value(p, layout, cfg))
}

/// Adds `∇g` to `grad`. For a group `z` with norm `t` the LSP term
/// contributes `λ η (κ'(t) − κ₀) z / t = −λ η z / (1 + t)`, which vanishes at
/// `z = 0`.
fn add_g_grad(p: &FmParams, layout: &GroupLayout, cfg: &RegConfig, grad: &mut FmParams) {
    if cfg.mode == RegMode::Convex {
        return;
    }
    let eta = cfg.eta(layout);
    let (nw, nv) = group_norms(p, layout);
    let k = p.k;
    for (l, g) in layout.groups().iter().enumerate() {
        let r = g.range();
        let cw = -cfg.lambda_w * eta[l] / (1.0 + nw[l]);
        for i in r.clone() {
            grad.w[i] += cw * p.w[i];
        }
        let cv = -cfg.lambda_v * eta[l] / (1.0 + nv[l]);
        for i in r.start * k..r.end * k {
            grad.v[i] += cv * p.v[i];
        }
    }
}

/// Gradient of the mean squared error over `batch` (all rows when `None`)
/// plus `∇g`; also returns that batch mean squared error. Summing the
/// per-sample augmented losses `(1/N)[(yⁿ − ŷⁿ)² + g]` over a batch of size
/// `N` gives exactly this objective.
pub fn augmented_grad(
    p: &FmParams,
    layout: &GroupLayout,
    cfg: &RegConfig,
    table: &FeatureTable,
    batch: Option<&[usize]>,
) -> (f64, FmParams) {
    let (loss, mut grad) = mse_grad(p, table, batch);
    add_g_grad(p, layout, cfg, &mut grad);
    (loss, grad)
}

/// `max(1 − τ/‖z‖, 0) z`, in place.
pub fn prox_block(z: &mut [f64], tau: f64) {
    let n = norm(z);
    let s = if n > tau { 1.0 - tau / n } else { 0.0 };
    z.iter_mut().for_each(|x| *x *= s);
}

/// Group soft-thresholding of `w` and `V` independently; `b` is untouched.
pub fn prox_group(p: &mut FmParams, layout: &GroupLayout, tau_w: &[f64], tau_v: &[f64]) {
    let k = p.k;
    for (l, g) in layout.groups().iter().enumerate() {
        let r = g.range();
        if tau_w[l] > 0.0 {
            prox_block(&mut p.w[r.clone()], tau_w[l]);
        }
        if tau_v[l] > 0.0 {
            prox_block(&mut p.v[r.start * k..r.end * k], tau_v[l]);
        }
    }
}
