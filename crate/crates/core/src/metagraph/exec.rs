use std::borrow::Cow;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::plan::{ExecutionPlan, Step};
use crate::error::{Error, Result};
use crate::hin::HinStore;
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecOptions {
    /// Largest number of stored entries any intermediate may hold.
    pub nnz_budget: usize,
    /// Entries with magnitude below this are dropped from the result; `0`
    /// drops exact zeros only.
    pub floor: f64,
    /// Replace each similarity `s` by `ln(1 + s)`.
    pub log_scale: bool,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions {
            nnz_budget: 100_000_000,
            floor: 0.0,
            log_scale: false,
        }
    }
}

/// User x item metagraph instance counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub matrix: CsrMatrix,
    pub metagraph: String,
}

pub fn execute_plan(plan: &ExecutionPlan, hin: &HinStore, opts: &ExecOptions) -> Result<SimilarityMatrix> {
    let mut last_use = vec![0usize; plan.steps.len()];
    for (i, step) in plan.steps.iter().enumerate() {
        if let Step::MatMul(a, b) | Step::Hadamard(a, b) = step {
            last_use[*a] = i;
            last_use[*b] = i;
        }
    }

    let mut slots: Vec<Option<Cow<'_, CsrMatrix>>> = Vec::with_capacity(plan.steps.len());
    for (i, step) in plan.steps.iter().enumerate() {
        let value = match step {
            Step::Load { relation, transposed } => {
                let adj = hin
                    .relation(relation)
                    .ok_or_else(|| Error::UnknownRelation(relation.clone()))?
                    .adjacency
                    .matrix();
                if *transposed {
                    Cow::Owned(adj.transpose())
                } else {
                    Cow::Borrowed(adj)
                }
            }
            Step::MatMul(a, b) => {
                let m = slot(&slots, *a).matmul(slot(&slots, *b), opts.nnz_budget)?;
                Cow::Owned(m)
            }
            Step::Hadamard(a, b) => Cow::Owned(slot(&slots, *a).hadamard(slot(&slots, *b))?),
        };
        if value.shape() != plan.shapes[i] {
            return Err(Error::Shape(format!(
                "step {i} of `{}` produced {:?}, plan says {:?}",
                plan.metagraph,
                value.shape(),
                plan.shapes[i]
            )));
        }
        slots.push(Some(value));
        if let Step::MatMul(a, b) | Step::Hadamard(a, b) = step {
            for op in [*a, *b] {
                if last_use[op] == i {
                    slots[op] = None;
                }
            }
        }
    }

    let mut matrix = slots.pop().flatten().unwrap().into_owned();
    matrix.prune(opts.floor);
    if opts.log_scale {
        matrix.map_values(f64::ln_1p);
    }
    Ok(SimilarityMatrix {
        matrix,
        metagraph: plan.metagraph.clone(),
    })
}

fn slot<'s, 'a>(slots: &'s [Option<Cow<'a, CsrMatrix>>], i: usize) -> &'s CsrMatrix {
    slots[i].as_deref().expect("operand consumed before use")
}

/// Writes `rows<TAB>cols<TAB>nnz<TAB>name` followed by one
/// `row<TAB>col<TAB>value` line per stored entry. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_similarity(sim: &SimilarityMatrix, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let m = &sim.matrix;
    let io = |e| Error::io(path, e);
    writeln!(w, "{}\t{}\t{}\t{}", m.rows(), m.cols(), m.nnz(), sim.metagraph).map_err(io)?;
    for (r, c, v) in m.iter() {
        writeln!(w, "{r}\t{c}\t{v}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_similarity(path: &Path) -> Result<SimilarityMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: &str| Error::Parse {
        path: path.to_owned(),
        line,
        msg: msg.to_owned(),
    };
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| bad(1, "missing header"))?
        .split('\t')
        .collect();
    if header.len() != 4 {
        return Err(bad(1, "header must be rows, cols, nnz, name"));
    }
    let num = |s: &str, line| s.parse::<usize>().map_err(|_| bad(line, "bad integer"));
    let (rows, cols, nnz) = (num(header[0], 1)?, num(header[1], 1)?, num(header[2], 1)?);
    let mut trip = Vec::with_capacity(nnz);
    for (k, line) in lines.enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(bad(k + 2, "expected row, col, value"));
        }
        let v: f64 = f[2].parse().map_err(|_| bad(k + 2, "bad value"))?;
        trip.push((num(f[0], k + 2)?, num(f[1], k + 2)?, v));
    }
    if trip.len() != nnz {
        return Err(bad(1, "entry count does not match header"));
    }
    Ok(SimilarityMatrix {
        matrix: CsrMatrix::from_triplets(rows, cols, trip)?,
        metagraph: header[3].to_owned(),
    })
}
