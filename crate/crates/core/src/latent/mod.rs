//! Low-rank user and item features from a partially observed similarity
//! matrix, by regularized factorization or by nuclear-norm regularized
//! completion.

mod mf;
mod nnr;
mod svd;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metagraph::SimilarityMatrix;

pub use mf::{factorize_mf, mf_gradient, mf_objective, MfOptions};
pub use nnr::{factorize_nnr, NnrOptions, NnrState};
pub use svd::{randomized_svd, svt, LinearOperator, LowRank};

/// Observed entries of an `rows x cols` matrix; the mask is the set of listed
/// positions (explicit zeros count as observed).
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl ObservedMatrix {
    pub fn new(rows: usize, cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        entries.sort_by_key(|&(i, j, _)| (i, j));
        for w in entries.windows(2) {
            if (w[0].0, w[0].1) == (w[1].0, w[1].1) {
                return Err(Error::Argument(format!(
                    "position ({}, {}) observed twice",
                    w[0].0, w[0].1
                )));
            }
        }
        if let Some(&(i, j, _)) = entries.iter().find(|&&(i, j, _)| i >= rows || j >= cols) {
            return Err(Error::Shape(format!("observation ({i}, {j}) outside {rows}x{cols}")));
        }
        Ok(ObservedMatrix { rows, cols, entries })
    }

    /// Nonzero similarities are the observations.
    pub fn from_similarity(sim: &SimilarityMatrix) -> Self {
        ObservedMatrix {
            rows: sim.matrix.rows(),
            cols: sim.matrix.cols(),
            entries: sim.matrix.iter().collect(),
        }
    }

    pub fn from_dense(d: &DMatrix<f64>) -> Self {
        let mut entries = Vec::with_capacity(d.len());
        for i in 0..d.nrows() {
            for j in 0..d.ncols() {
                entries.push((i, j, d[(i, j)]));
            }
        }
        ObservedMatrix {
            rows: d.nrows(),
            cols: d.ncols(),
            entries,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|e| e.2 * e.2).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorMethod {
    Mf,
    Nnr,
}

impl FactorMethod {
    pub fn tag(self) -> &'static str {
        match self {
            FactorMethod::Mf => "mf",
            FactorMethod::Nnr => "nnr",
        }
    }
}

/// Per-metagraph latent features: row `i` of `user` belongs to user `i`, row
/// `j` of `item` to item `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    pub user: DMatrix<f64>,
    pub item: DMatrix<f64>,
    pub metagraph: String,
    pub method: FactorMethod,
}

impl FactorPair {
    pub fn rank(&self) -> usize {
        self.user.ncols()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.user * self.item.transpose()
    }
}

/// Convergence record shared by both factorizers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub objective: Vec<f64>,
    pub iterations: usize,
    /// Rank before any output cap (NNR) or the requested rank (MF).
    pub full_rank: usize,
}

/// Zeroes the factor rows of users and items without any observation, which
/// carry no information from the similarity matrix.
pub fn zero_unobserved(pair: &mut FactorPair, r: &ObservedMatrix) {
    let (m, n) = r.shape();
    let mut seen_u = vec![false; m];
    let mut seen_i = vec![false; n];
    for &(i, j, _) in r.entries() {
        seen_u[i] = true;
        seen_i[j] = true;
    }
    for (i, _) in seen_u.iter().enumerate().filter(|(_, &s)| !s) {
        pair.user.row_mut(i).fill(0.0);
    }
    for (j, _) in seen_i.iter().enumerate().filter(|(_, &s)| !s) {
        pair.item.row_mut(j).fill(0.0);
    }
}

fn side_path(dir: &Path, stem: &str, side: &str) -> PathBuf {
    dir.join(format!("{stem}.{side}.tsv"))
}

fn write_matrix(path: &Path, m: &DMatrix<f64>, header: &str) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| m[(i, j)].to_string()).collect();
        writeln!(w, "{}", row.join("\t")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes `<stem>.user.tsv` and `<stem>.item.tsv`, each with the header
/// `rows<TAB>cols<TAB>rank<TAB>metagraph<TAB>method<TAB>side` and one
/// tab-separated row per entity.
pub fn write_factor_pair(pair: &FactorPair, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (side, m) in [("user", &pair.user), ("item", &pair.item)] {
        let header = format!(
            "{}\t{}\t{}\t{}\t{}\t{side}",
            m.nrows(),
            m.ncols(),
            pair.rank(),
            pair.metagraph,
            pair.method.tag()
        );
        write_matrix(&side_path(dir, stem, side), m, &header)?;
    }
    Ok(())
}

fn read_matrix(path: &Path) -> Result<(DMatrix<f64>, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: &str| Error::Parse {
        path: path.to_owned(),
        line,
        msg: msg.into(),
    };
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| bad(1, "missing header"))?
        .split('\t')
        .map(str::to_owned)
        .collect();
    if header.len() != 6 {
        return Err(bad(1, "header must be rows, cols, rank, metagraph, method, side"));
    }
    let rows: usize = header[0].parse().map_err(|_| bad(1, "bad rows"))?;
    let cols: usize = header[1].parse().map_err(|_| bad(1, "bad cols"))?;
    let mut data = Vec::with_capacity(rows * cols);
    for (k, line) in lines.enumerate() {
        let vals: Vec<f64> = if cols == 0 {
            Vec::new()
        } else {
            line.split('\t')
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(k + 2, "bad value"))?
        };
        if vals.len() != cols {
            return Err(bad(k + 2, "wrong number of columns"));
        }
        data.extend(vals);
    }
    if data.len() != rows * cols {
        return Err(bad(1, "row count does not match header"));
    }
    Ok((DMatrix::from_row_slice(rows, cols, &data), header))
}

pub fn read_factor_pair(dir: &Path, stem: &str) -> Result<FactorPair> {
    let (user, h) = read_matrix(&side_path(dir, stem, "user"))?;
    let (item, _) = read_matrix(&side_path(dir, stem, "item"))?;
    let method = match h[4].as_str() {
        "mf" => FactorMethod::Mf,
        "nnr" => FactorMethod::Nnr,
        other => return Err(Error::Validation(format!("unknown factor method `{other}`"))),
    };
    Ok(FactorPair {
        user,
        item,
        metagraph: h[3].clone(),
        method,
    })
}

/// Number of singular values above `rel_tol * sigma_max`.
pub fn effective_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let s = m.clone().singular_values();
    let max = s.max();
    if max == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > rel_tol * max).count()
}
