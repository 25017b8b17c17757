//! Factorization machine over concatenated metagraph features.
//!
//! A sample for the pair `(i, j)` is `[u¹_i, …, u^L_i, b¹_j, …, b^L_j]`; each
//! block is one group, so `w` and `V` have `2L` groups each. Rows of `V` are
//! stored contiguously (row-major `d x K`), which makes every group of `V` a
//! contiguous slice.

mod reg;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hin::RatingSet;
use crate::latent::FactorPair;

pub use reg::{
    augmented_grad, group_norms, objective, objective_parts, prox_block, prox_group, reg_value, GroupWeighting,
    ObjectiveParts, RegConfig, RegMode, KAPPA0,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    User,
    Item,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub metagraph: String,
    pub side: Side,
    pub start: usize,
    pub width: usize,
}

impl Group {
    pub fn label(&self) -> String {
        let side = match self.side {
            Side::User => "user",
            Side::Item => "item",
        };
        format!("{}/{side}", self.metagraph)
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.width
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupLayout {
    groups: Vec<Group>,
    d: usize,
}

impl GroupLayout {
    /// User blocks for every `(metagraph, rank)` in order, then item blocks.
    pub fn from_ranks(blocks: &[(String, usize)]) -> Self {
        Self::from_widths(&blocks.iter().map(|(n, r)| (n.clone(), *r, *r)).collect::<Vec<_>>())
    }

    /// Like [`from_ranks`](Self::from_ranks) with separate user and item
    /// widths per block.
    pub fn from_widths(blocks: &[(String, usize, usize)]) -> Self {
        let mut groups = Vec::with_capacity(2 * blocks.len());
        let mut d = 0;
        for side in [Side::User, Side::Item] {
            for (name, uw, iw) in blocks {
                let width = if side == Side::User { *uw } else { *iw };
                groups.push(Group {
                    metagraph: name.clone(),
                    side,
                    start: d,
                    width,
                });
                d += width;
            }
        }
        GroupLayout { groups, d }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.width).collect()
    }
}

/// Samples stored row-compressed: row `n` holds the nonzero coordinates of
/// `x^n` (latent blocks are stored in full, one-hot rows sparsely).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    d: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
    labels: Vec<f64>,
    pairs: Vec<(usize, usize)>,
}

impl FeatureTable {
    pub fn empty(d: usize) -> Self {
        FeatureTable {
            d,
            indptr: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
            labels: Vec::new(),
            pairs: Vec::new(),
        }
    }

    /// Dense rows, row-major `labels.len() x d`.
    pub fn from_dense(d: usize, rows: &[f64], labels: Vec<f64>, pairs: Vec<(usize, usize)>) -> Result<Self> {
        if rows.len() != d * labels.len() || pairs.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} values, {} labels and {} pairs for width {d}",
                rows.len(),
                labels.len(),
                pairs.len()
            )));
        }
        let mut t = FeatureTable::empty(d);
        for (n, (&y, &p)) in labels.iter().zip(&pairs).enumerate() {
            t.push_row((0..d).map(|i| (i, rows[n * d + i])), y, p);
        }
        Ok(t)
    }

    fn push_row(&mut self, entries: impl Iterator<Item = (usize, f64)>, label: f64, pair: (usize, usize)) {
        for (i, v) in entries {
            self.indices.push(i as u32);
            self.values.push(v);
        }
        self.indptr.push(self.indices.len());
        self.labels.push(label);
        self.pairs.push(pair);
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, n: usize) -> (&[u32], &[f64]) {
        let r = self.indptr[n]..self.indptr[n + 1];
        (&self.indices[r.clone()], &self.values[r])
    }

    pub fn dense_row(&self, n: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.d];
        let (idx, val) = self.row(n);
        for (&i, &v) in idx.iter().zip(val) {
            x[i as usize] += v;
        }
        x
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn label_mean(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.labels.iter().sum::<f64>() / self.len() as f64
    }

    /// Rows `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> FeatureTable {
        let mut t = FeatureTable::empty(self.d);
        for &n in idx {
            let (ci, cv) = self.row(n);
            t.push_row(
                ci.iter().zip(cv).map(|(&i, &v)| (i as usize, v)),
                self.labels[n],
                self.pairs[n],
            );
        }
        t
    }

    /// Columns reordered so that new column `perm[c]` holds old column `c`.
    pub fn permute_columns(&self, perm: &[usize]) -> FeatureTable {
        let mut t = self.clone();
        for i in t.indices.iter_mut() {
            *i = perm[*i as usize] as u32;
        }
        t
    }

    pub fn scale_columns(&mut self, scale: &[f64]) {
        for (i, v) in self.indices.iter().zip(self.values.iter_mut()) {
            *v *= scale[*i as usize];
        }
    }
}

/// Per-column z-scoring `(x − mean) / std`, fitted on one table and applied
/// identically to others. Constant columns are only centered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ColumnScaler {
    pub fn fit(table: &FeatureTable) -> Self {
        let d = table.d();
        let n = table.len().max(1) as f64;
        let mut s = vec![0.0; d];
        let mut ss = vec![0.0; d];
        for (&i, &v) in table.indices.iter().zip(&table.values) {
            s[i as usize] += v;
            ss[i as usize] += v * v;
        }
        let mean: Vec<f64> = s.iter().map(|x| x / n).collect();
        let scale = ss
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let sd = (q / n - m * m).max(0.0).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        ColumnScaler { mean, scale }
    }

    /// Rows come out dense, since centering fills in zeros.
    pub fn apply(&self, table: &mut FeatureTable) {
        let mut out = FeatureTable::empty(table.d());
        for n in 0..table.len() {
            let x = table.dense_row(n);
            out.push_row(
                x.iter()
                    .enumerate()
                    .map(|(i, v)| (i, (v - self.mean[i]) * self.scale[i])),
                table.labels[n],
                table.pairs[n],
            );
        }
        *table = out;
    }
}

fn check_pairs(pairs: &[FactorPair]) -> Result<(usize, usize)> {
    let Some(first) = pairs.first() else {
        return Ok((0, 0));
    };
    let (m, n) = (first.user.nrows(), first.item.nrows());
    for p in pairs {
        if p.user.nrows() != m || p.item.nrows() != n {
            return Err(Error::Argument(format!(
                "features of `{}` cover {}x{} users x items, expected {m}x{n}",
                p.metagraph,
                p.user.nrows(),
                p.item.nrows()
            )));
        }
        if p.user.ncols() != p.item.ncols() {
            return Err(Error::Argument(format!(
                "features of `{}` have user rank {} but item rank {}",
                p.metagraph,
                p.user.ncols(),
                p.item.ncols()
            )));
        }
    }
    Ok((m, n))
}

/// One row per rating: all user blocks, then all item blocks.
pub fn assemble_features(pairs: &[FactorPair], ratings: &RatingSet) -> Result<(FeatureTable, GroupLayout)> {
    let (m, n) = check_pairs(pairs)?;
    let layout = GroupLayout::from_ranks(
        &pairs
            .iter()
            .map(|p| (p.metagraph.clone(), p.rank()))
            .collect::<Vec<_>>(),
    );
    let mut table = FeatureTable::empty(layout.d());
    let mut row = Vec::with_capacity(layout.d());
    for r in &ratings.triples {
        if r.user >= m || r.item >= n {
            return Err(Error::Argument(format!(
                "rating ({}, {}) outside the {m}x{n} feature tables",
                r.user, r.item
            )));
        }
        row.clear();
        for p in pairs {
            row.extend(p.user.row(r.user).iter());
        }
        for p in pairs {
            row.extend(p.item.row(r.item).iter());
        }
        table.push_row(row.iter().copied().enumerate(), r.value, (r.user, r.item));
    }
    Ok((table, layout))
}

/// One-hot user and item indicators: the rating-only factorization machine.
pub fn assemble_one_hot(ratings: &RatingSet, users: usize, items: usize) -> Result<(FeatureTable, GroupLayout)> {
    let layout = GroupLayout::from_widths(&[("ratings".to_string(), users, items)]);
    let mut table = FeatureTable::empty(layout.d());
    for r in &ratings.triples {
        if r.user >= users || r.item >= items {
            return Err(Error::Argument(format!(
                "rating ({}, {}) outside {users} users x {items} items",
                r.user, r.item
            )));
        }
        table.push_row(
            [(r.user, 1.0), (users + r.item, 1.0)].into_iter(),
            r.value,
            (r.user, r.item),
        );
    }
    Ok((table, layout))
}

/// `b`, `w` (length `d`) and `V` (`d x K`, row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmParams {
    pub b: f64,
    pub w: Vec<f64>,
    pub v: Vec<f64>,
    pub k: usize,
}

impl FmParams {
    pub fn zeros(d: usize, k: usize) -> Self {
        FmParams {
            b: 0.0,
            w: vec![0.0; d],
            v: vec![0.0; d * k],
            k,
        }
    }

    /// `w = 0`, the given bias, `V` i.i.d. Gaussian with standard deviation
    /// `v_std`.
    pub fn init(d: usize, k: usize, b: f64, v_std: f64, seed: u64) -> Self {
        let mut p = FmParams::zeros(d, k);
        p.b = b;
        if v_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, v_std).unwrap();
            p.v.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        }
        p
    }

    pub fn d(&self) -> usize {
        self.w.len()
    }

    pub fn v_row(&self, i: usize) -> &[f64] {
        &self.v[i * self.k..(i + 1) * self.k]
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &FmParams) {
        self.b += a * other.b;
        self.w.iter_mut().zip(&other.w).for_each(|(x, y)| *x += a * y);
        self.v.iter_mut().zip(&other.v).for_each(|(x, y)| *x += a * y);
    }

    pub fn scaled(&self, a: f64) -> FmParams {
        let mut p = FmParams::zeros(self.d(), self.k);
        p.axpy(a, self);
        p
    }

    /// Squared Euclidean norm over `w` and `V` (the bias is excluded).
    pub fn sq_norm_wv(&self) -> f64 {
        self.w.iter().chain(&self.v).map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.b.is_finite() && self.w.iter().chain(&self.v).all(|x| x.is_finite())
    }

    /// Parameters re-expressed for a table whose columns were permuted by
    /// `perm` (new index `perm[old]`).
    pub fn permute(&self, perm: &[usize]) -> FmParams {
        let mut p = FmParams::zeros(self.d(), self.k);
        p.b = self.b;
        for (old, &new) in perm.iter().enumerate() {
            p.w[new] = self.w[old];
            p.v[new * self.k..(new + 1) * self.k].copy_from_slice(self.v_row(old));
        }
        p
    }
}

fn predict_sparse(p: &FmParams, idx: &[u32], val: &[f64], s: &mut [f64]) -> f64 {
    s.iter_mut().for_each(|x| *x = 0.0);
    let mut linear = 0.0;
    let mut sq = 0.0;
    for (&i, &x) in idx.iter().zip(val) {
        let i = i as usize;
        linear += p.w[i] * x;
        for (f, &vf) in p.v_row(i).iter().enumerate() {
            let t = vf * x;
            s[f] += t;
            sq += t * t;
        }
    }
    let pair: f64 = s.iter().map(|t| t * t).sum::<f64>() - sq;
    p.b + linear + 0.5 * pair
}

/// `b + wᵀx + Σ_{i<j} ⟨v_i, v_j⟩ x_i x_j` in `O(dK)`.
pub fn predict(p: &FmParams, x: &[f64]) -> f64 {
    let idx: Vec<u32> = (0..x.len() as u32).collect();
    let mut s = vec![0.0; p.k];
    predict_sparse(p, &idx, x, &mut s)
}

pub fn predict_row(p: &FmParams, table: &FeatureTable, n: usize) -> f64 {
    let (idx, val) = table.row(n);
    let mut s = vec![0.0; p.k];
    predict_sparse(p, idx, val, &mut s)
}

/// Rows per parallel work unit; fixed so reductions do not depend on the
/// thread count.
pub(crate) const CHUNK: usize = 512;

pub fn predict_table(p: &FmParams, table: &FeatureTable) -> Vec<f64> {
    (0..table.len())
        .into_par_iter()
        .with_min_len(CHUNK)
        .map_init(
            || vec![0.0; p.k],
            |s, n| {
                let (idx, val) = table.row(n);
                predict_sparse(p, idx, val, s)
            },
        )
        .collect()
}

/// `(1/N) Σ (yⁿ − ŷⁿ)²`.
pub fn mse_loss(p: &FmParams, table: &FeatureTable) -> Result<f64> {
    if table.is_empty() {
        return Err(Error::Argument("mean square loss of an empty table".into()));
    }
    Ok(sq_error_sum(p, table, None) / table.len() as f64)
}

pub(crate) fn sq_error_sum(p: &FmParams, table: &FeatureTable, batch: Option<&[usize]>) -> f64 {
    let n = batch.map_or(table.len(), <[usize]>::len);
    let partial: Vec<f64> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut s = vec![0.0; p.k];
            let mut acc = 0.0;
            for pos in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let row = batch.map_or(pos, |b| b[pos]);
                let (idx, val) = table.row(row);
                let e = predict_sparse(p, idx, val, &mut s) - table.labels[row];
                acc += e * e;
            }
            acc
        })
        .collect();
    partial.iter().sum()
}

/// Gradient of `(1/|batch|) Σ (yⁿ − ŷⁿ)²` over the batch (all rows when
/// `None`); the returned value is that mean.
pub(crate) fn mse_grad(p: &FmParams, table: &FeatureTable, batch: Option<&[usize]>) -> (f64, FmParams) {
    let n = batch.map_or(table.len(), <[usize]>::len);
    let d = p.d();
    let k = p.k;
    if n == 0 {
        return (0.0, FmParams::zeros(d, k));
    }
    let scale = 2.0 / n as f64;
    let partial: Vec<(f64, FmParams)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut g = FmParams::zeros(d, k);
            let mut s = vec![0.0; k];
            let mut loss = 0.0;
            for pos in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let row = batch.map_or(pos, |b| b[pos]);
                let (idx, val) = table.row(row);
                let e = predict_sparse(p, idx, val, &mut s) - table.labels[row];
                loss += e * e;
                let coef = scale * e;
                g.b += coef;
                for (&i, &x) in idx.iter().zip(val) {
                    let i = i as usize;
                    let cx = coef * x;
                    g.w[i] += cx;
                    let vrow = p.v_row(i);
                    let grow = &mut g.v[i * k..(i + 1) * k];
                    for f in 0..k {
                        grow[f] += cx * (s[f] - vrow[f] * x);
                    }
                }
            }
            (loss, g)
        })
        .collect();
    let mut total = FmParams::zeros(d, k);
    let mut loss = 0.0;
    for (l, g) in &partial {
        loss += l;
        total.axpy(1.0, g);
    }
    (loss / n as f64, total)
}

/// On-disk model: layout, regularizer and parameters as one JSON document.
/// Floats are written in shortest round-trip form, so reading reproduces
/// every bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub d: usize,
    pub k: usize,
    pub layout: GroupLayout,
    pub reg: RegConfig,
    pub params: FmParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaler: Option<ColumnScaler>,
}

impl ModelFile {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<ModelFile> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: ModelFile = serde_json::from_str(&text)?;
        if m.params.w.len() != m.d || m.params.v.len() != m.d * m.k || m.layout.d() != m.d {
            return Err(Error::Validation(format!(
                "{}: inconsistent model dimensions",
                path.display()
            )));
        }
        Ok(m)
    }
}
