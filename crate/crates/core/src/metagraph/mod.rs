//! Metagraphs: single-source single-sink DAGs over entity types, parsed from a
//! small text DSL, compiled to sparse matrix plans and executed into
//! user-item similarity (instance count) matrices.
//!
//! DSL grammar, informally:
//!
//! ```text
//! metagraph := NAME ":" chain
//! chain     := elem (link elem)*
//! elem      := TYPE | "(" chain ("|" chain)+ ")"
//! link      := "-[" REL "~"? "]-" | "-(" branch ("|" branch)+ ")-"
//! branch    := link (elem link)*
//! ```
//!
//! `~` marks traversal of a relation from its tail type to its head type. A
//! `-( .. | .. )-` block runs every branch between the two surrounding nodes,
//! so `R -( -[mention]- A -[mention~]- | -[about]- B -[about~]- )- R` joins two
//! reviews that share both an aspect and a business. The parenthesised `elem`
//! form writes the endpoints inside each branch instead; all branches must
//! then agree on their first and last types.

mod exec;
mod oracle;
mod parse;
mod plan;
mod sp;

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use exec::{execute_plan, read_similarity, write_similarity, ExecOptions, SimilarityMatrix};
pub use oracle::{brute_force_count, BRUTE_FORCE_GUARD};
pub use parse::{parse_metagraph, parse_metagraph_file};
pub use plan::{compile_plan, CompileOptions, ExecutionPlan, Operand, Step};
pub use sp::SpTree;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MgNode {
    pub id: NodeId,
    pub entity_type: String,
}

/// A directed metagraph edge, oriented from the source side toward the sink.
/// `reverse` is the explicit `~` marker of the DSL.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MgEdge {
    pub from: NodeId,
    pub to: NodeId,
    pub relation: String,
    pub reverse: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetagraphSpec {
    pub name: String,
    pub nodes: Vec<MgNode>,
    pub edges: Vec<MgEdge>,
    pub source: NodeId,
    pub sink: NodeId,
}

impl MetagraphSpec {
    /// Validates the DAG shape and locates the unique source and sink. Node
    /// ids must equal their position in `types`.
    pub fn new(name: &str, types: Vec<String>, edges: Vec<MgEdge>) -> Result<Self> {
        let n = types.len();
        for e in &edges {
            if e.from >= n || e.to >= n {
                return Err(Error::Validation(format!(
                    "edge {} -> {} references a missing node",
                    e.from, e.to
                )));
            }
        }
        let mut indeg = vec![0usize; n];
        let mut outdeg = vec![0usize; n];
        for e in &edges {
            outdeg[e.from] += 1;
            indeg[e.to] += 1;
        }
        let sources: Vec<_> = (0..n).filter(|&v| indeg[v] == 0).collect();
        let sinks: Vec<_> = (0..n).filter(|&v| outdeg[v] == 0).collect();

        let spec = MetagraphSpec {
            name: name.to_owned(),
            nodes: types
                .into_iter()
                .enumerate()
                .map(|(id, entity_type)| MgNode { id, entity_type })
                .collect(),
            edges,
            source: sources.first().copied().unwrap_or(0),
            sink: sinks.first().copied().unwrap_or(0),
        };
        if spec.topo_order().is_none() {
            return Err(Error::Cycle(name.to_owned()));
        }
        if sources.len() != 1 || sinks.len() != 1 || n < 2 {
            return Err(Error::SourceSink {
                name: name.to_owned(),
                sources: sources.len(),
                sinks: sinks.len(),
            });
        }
        Ok(spec)
    }

    pub fn node_type(&self, id: NodeId) -> &str {
        &self.nodes[id].entity_type
    }

    pub fn source_type(&self) -> &str {
        self.node_type(self.source)
    }

    pub fn sink_type(&self) -> &str {
        self.node_type(self.sink)
    }

    pub fn relations(&self) -> impl Iterator<Item = &str> {
        self.edges.iter().map(|e| e.relation.as_str())
    }

    /// Kahn order, smallest id first; `None` on a cycle.
    pub fn topo_order(&self) -> Option<Vec<NodeId>> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        for e in &self.edges {
            indeg[e.to] += 1;
        }
        let mut ready: VecDeque<NodeId> = (0..n).filter(|&v| indeg[v] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(v) = ready.pop_front() {
            order.push(v);
            for e in self.edges.iter().filter(|e| e.from == v) {
                indeg[e.to] -= 1;
                if indeg[e.to] == 0 {
                    ready.push_back(e.to);
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    /// Series-parallel decomposition between source and sink.
    pub fn decompose(&self) -> Result<SpTree> {
        sp::decompose(self)
    }

    /// Renders the metagraph back into the DSL (endpoint-outside block form).
    pub fn to_dsl(&self) -> Result<String> {
        let tree = self.decompose()?;
        let mut out = format!("{}: {}", self.name, self.source_type());
        tree.render(self, &mut out);
        out.push(' ');
        out.push_str(self.sink_type());
        Ok(out)
    }

    /// Renumbers nodes and reorders edges in DSL rendering order, so that
    /// structurally identical metagraphs compare equal.
    pub fn canonical(&self) -> Result<MetagraphSpec> {
        let tree = self.decompose()?;
        let mut node_order = vec![self.source];
        let mut edge_order = Vec::new();
        tree.visit(&mut node_order, &mut edge_order);
        node_order.push(self.sink);
        let mut new_id = vec![usize::MAX; self.nodes.len()];
        for (i, &old) in node_order.iter().enumerate() {
            new_id[old] = i;
        }
        let types = node_order
            .iter()
            .map(|&old| self.nodes[old].entity_type.clone())
            .collect();
        let edges = edge_order
            .iter()
            .map(|&k| {
                let e = &self.edges[k];
                MgEdge {
                    from: new_id[e.from],
                    to: new_id[e.to],
                    relation: e.relation.clone(),
                    reverse: e.reverse,
                }
            })
            .collect();
        MetagraphSpec::new(&self.name, types, edges)
    }
}

impl fmt::Display for MetagraphSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.to_dsl() {
            Ok(s) => f.write_str(&s),
            Err(_) => {
                write!(f, "{}: <dag", self.name)?;
                for e in &self.edges {
                    write!(
                        f,
                        " {}{}-[{}{}]->{}{}",
                        self.node_type(e.from),
                        e.from,
                        e.relation,
                        if e.reverse { "~" } else { "" },
                        self.node_type(e.to),
                        e.to
                    )?;
                }
                f.write_str(">")
            }
        }
    }
}
