use std::collections::HashMap;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{MetagraphSpec, MgEdge, SpTree};
use crate::error::{Error, Result};
use crate::hin::HinStore;

/// Index of an earlier step whose result is consumed.
pub type Operand = usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Step {
    Load { relation: String, transposed: bool },
    MatMul(Operand, Operand),
    Hadamard(Operand, Operand),
}

/// Straight-line program over sparse matrices; step `i` writes slot `i` and
/// the last step is the similarity matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub metagraph: String,
    pub steps: Vec<Step>,
    pub shapes: Vec<(usize, usize)>,
}

impl ExecutionPlan {
    pub fn output(&self) -> Operand {
        self.steps.len() - 1
    }

    pub fn output_shape(&self) -> (usize, usize) {
        self.shapes[self.output()]
    }

    pub fn count(&self, pred: impl Fn(&Step) -> bool) -> usize {
        self.steps.iter().filter(|s| pred(s)).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompileOptions {
    /// Re-associate each chain of products to minimise the dense cost
    /// estimate `rows * inner * cols`; otherwise products run left to right.
    pub reassociate: bool,
    /// Reject unmarked same-type relations instead of traversing them
    /// forward with a warning.
    pub strict_direction: bool,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            reassociate: true,
            strict_direction: false,
        }
    }
}

struct Compiler<'a> {
    spec: &'a MetagraphSpec,
    hin: &'a HinStore,
    opts: CompileOptions,
    steps: Vec<Step>,
    shapes: Vec<(usize, usize)>,
    loads: HashMap<(String, bool), Operand>,
}

impl Compiler<'_> {
    fn push(&mut self, step: Step, shape: (usize, usize)) -> Operand {
        self.steps.push(step);
        self.shapes.push(shape);
        self.steps.len() - 1
    }

    fn orientation(&self, e: &MgEdge) -> Result<bool> {
        let rel = self
            .hin
            .relation(&e.relation)
            .ok_or_else(|| Error::UnknownRelation(e.relation.clone()))?;
        let (from, to) = (self.spec.node_type(e.from), self.spec.node_type(e.to));
        let (head, tail) = (rel.decl.head_type.as_str(), rel.decl.tail_type.as_str());
        let forward = head == from && tail == to;
        let backward = tail == from && head == to;
        let mismatch = || {
            Error::Shape(format!(
                "relation `{}` ({head} -> {tail}) cannot connect {from} to {to}{}",
                e.relation,
                if e.reverse { " in reverse" } else { "" }
            ))
        };
        if e.reverse {
            return if backward { Ok(true) } else { Err(mismatch()) };
        }
        match (forward, backward) {
            (true, true) => {
                if self.opts.strict_direction {
                    Err(Error::AmbiguousDirection(e.relation.clone()))
                } else {
                    warn!(
                        "metagraph `{}`: same-type relation `{}` traversed forward; use `~` for the reverse",
                        self.spec.name, e.relation
                    );
                    Ok(false)
                }
            }
            (true, false) => Ok(false),
            (false, true) => Ok(true),
            (false, false) => Err(mismatch()),
        }
    }

    fn load(&mut self, k: usize) -> Result<Operand> {
        let e = &self.spec.edges[k];
        let transposed = self.orientation(e)?;
        let key = (e.relation.clone(), transposed);
        if let Some(&slot) = self.loads.get(&key) {
            return Ok(slot);
        }
        let adj = &self.hin.relation(&e.relation).unwrap().adjacency;
        let shape = if transposed {
            (adj.cols(), adj.rows())
        } else {
            (adj.rows(), adj.cols())
        };
        let slot = self.push(
            Step::Load {
                relation: e.relation.clone(),
                transposed,
            },
            shape,
        );
        self.loads.insert(key, slot);
        Ok(slot)
    }

    fn matmul(&mut self, a: Operand, b: Operand) -> Result<Operand> {
        let (sa, sb) = (self.shapes[a], self.shapes[b]);
        if sa.1 != sb.0 {
            return Err(Error::Shape(format!(
                "metagraph `{}`: product of {}x{} and {}x{}",
                self.spec.name, sa.0, sa.1, sb.0, sb.1
            )));
        }
        Ok(self.push(Step::MatMul(a, b), (sa.0, sb.1)))
    }

    fn emit(&mut self, tree: &SpTree) -> Result<Operand> {
        match tree {
            SpTree::Edge(k) => self.load(*k),
            SpTree::Series(parts, _) => {
                let ops = parts.iter().map(|p| self.emit(p)).collect::<Result<Vec<_>>>()?;
                if self.opts.reassociate && ops.len() > 2 {
                    let order = chain_order(&ops.iter().map(|&o| self.shapes[o]).collect::<Vec<_>>())?;
                    self.emit_order(&ops, &order, 0, ops.len() - 1)
                } else {
                    let mut acc = ops[0];
                    for &o in &ops[1..] {
                        acc = self.matmul(acc, o)?;
                    }
                    Ok(acc)
                }
            }
            SpTree::Parallel(branches) => {
                let mut acc = self.emit(&branches[0])?;
                for b in &branches[1..] {
                    let rhs = self.emit(b)?;
                    let (sa, sb) = (self.shapes[acc], self.shapes[rhs]);
                    if sa != sb {
                        return Err(Error::Shape(format!(
                            "metagraph `{}`: parallel branches have shapes {}x{} and {}x{}",
                            self.spec.name, sa.0, sa.1, sb.0, sb.1
                        )));
                    }
                    acc = self.push(Step::Hadamard(acc, rhs), sa);
                }
                Ok(acc)
            }
        }
    }

    fn emit_order(&mut self, ops: &[Operand], split: &[Vec<usize>], i: usize, j: usize) -> Result<Operand> {
        if i == j {
            return Ok(ops[i]);
        }
        let k = split[i][j];
        let a = self.emit_order(ops, split, i, k)?;
        let b = self.emit_order(ops, split, k + 1, j)?;
        self.matmul(a, b)
    }
}

/// Classic matrix-chain dynamic program; ties keep the leftmost split so the
/// plain left-to-right order wins when costs are equal.
fn chain_order(shapes: &[(usize, usize)]) -> Result<Vec<Vec<usize>>> {
    let n = shapes.len();
    for w in shapes.windows(2) {
        if w[0].1 != w[1].0 {
            return Err(Error::Shape(format!(
                "chain of {}x{} and {}x{}",
                w[0].0, w[0].1, w[1].0, w[1].1
            )));
        }
    }
    let mut cost = vec![vec![0f64; n]; n];
    let mut split = vec![vec![0usize; n]; n];
    for len in 2..=n {
        for i in 0..=n - len {
            let j = i + len - 1;
            cost[i][j] = f64::INFINITY;
            for k in (i..j).rev() {
                let c = cost[i][k] + cost[k + 1][j] + shapes[i].0 as f64 * shapes[k].1 as f64 * shapes[j].1 as f64;
                if c <= cost[i][j] {
                    cost[i][j] = c;
                    split[i][j] = k;
                }
            }
        }
    }
    Ok(split)
}

/// Compiles a series-parallel metagraph into a plan of loads, sparse products
/// and Hadamard products. Shapes are checked against the store here, so
/// execution cannot fail on conformity.
pub fn compile_plan(spec: &MetagraphSpec, hin: &HinStore, opts: CompileOptions) -> Result<ExecutionPlan> {
    for rel in spec.relations() {
        if hin.relation(rel).is_none() {
            return Err(Error::UnknownRelation(rel.to_owned()));
        }
    }
    let tree = spec.decompose()?;
    let mut c = Compiler {
        spec,
        hin,
        opts,
        steps: Vec::new(),
        shapes: Vec::new(),
        loads: HashMap::new(),
    };
    c.emit(&tree)?;
    let plan = ExecutionPlan {
        metagraph: spec.name.clone(),
        steps: c.steps,
        shapes: c.shapes,
    };
    let expected = (
        hin.entity_count(spec.source_type())?,
        hin.entity_count(spec.sink_type())?,
    );
    if plan.output_shape() != expected {
        return Err(Error::Shape(format!(
            "metagraph `{}` produces {:?}, expected {:?}",
            spec.name,
            plan.output_shape(),
            expected
        )));
    }
    Ok(plan)
}
