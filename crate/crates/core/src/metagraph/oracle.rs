use std::collections::HashMap;

use super::{MetagraphSpec, MgEdge, NodeId};
use crate::error::{Error, Result};
use crate::hin::HinStore;

/// Maximum number of partial assignments explored per call.
pub const BRUTE_FORCE_GUARD: usize = 1_000_000;

struct Neighbors {
    /// `out[v]` lists the entities reachable from `v` along the edge.
    out: Vec<Vec<usize>>,
    set: std::collections::HashSet<(usize, usize)>,
}

/// Counts metagraph instances between user `u` and item `b` by enumerating
/// every assignment of concrete entities to metagraph nodes. Works on any
/// DAG (series-parallel or not); requires binary adjacencies.
pub fn brute_force_count(spec: &MetagraphSpec, hin: &HinStore, u: usize, b: usize) -> Result<u64> {
    let mut lookup: HashMap<(String, bool), Neighbors> = HashMap::new();
    let mut oriented = Vec::with_capacity(spec.edges.len());
    for e in &spec.edges {
        let rel = hin
            .relation(&e.relation)
            .ok_or_else(|| Error::UnknownRelation(e.relation.clone()))?;
        if !rel.adjacency.is_binary() {
            return Err(Error::Argument(format!(
                "brute-force counting needs binary adjacencies; `{}` is weighted",
                e.relation
            )));
        }
        // reverse when marked, or when the head type is not the edge's origin
        let transposed = e.reverse || rel.decl.head_type != spec.node_type(e.from);
        oriented.push(transposed);
        lookup.entry((e.relation.clone(), transposed)).or_insert_with(|| {
            let n_from = if transposed {
                rel.adjacency.cols()
            } else {
                rel.adjacency.rows()
            };
            let mut out = vec![Vec::new(); n_from];
            let mut set = std::collections::HashSet::new();
            for (h, t, _) in rel.adjacency.entries() {
                let (x, y) = if transposed { (t, h) } else { (h, t) };
                out[x].push(y);
                set.insert((x, y));
            }
            Neighbors { out, set }
        });
    }

    let order = spec.topo_order().ok_or_else(|| Error::Cycle(spec.name.clone()))?;
    let counts: Vec<usize> = spec
        .nodes
        .iter()
        .map(|n| hin.entity_count(&n.entity_type))
        .collect::<Result<_>>()?;
    if u >= counts[spec.source] || b >= counts[spec.sink] {
        return Err(Error::Argument(format!("pair ({u}, {b}) out of range")));
    }

    let mut search = Search {
        spec,
        edges: spec
            .edges
            .iter()
            .zip(&oriented)
            .map(|(e, &t)| (e, &lookup[&(e.relation.clone(), t)]))
            .collect(),
        order,
        counts,
        assign: vec![None; spec.nodes.len()],
        visited: 0,
    };
    search.assign[spec.source] = Some(u);
    search.assign[spec.sink] = Some(b);
    search.run(0)
}

struct Search<'a> {
    spec: &'a MetagraphSpec,
    edges: Vec<(&'a MgEdge, &'a Neighbors)>,
    order: Vec<NodeId>,
    counts: Vec<usize>,
    assign: Vec<Option<usize>>,
    visited: usize,
}

impl Search<'_> {
    fn consistent(&self, v: NodeId) -> bool {
        self.edges.iter().all(|(e, nb)| {
            if e.from != v && e.to != v {
                return true;
            }
            match (self.assign[e.from], self.assign[e.to]) {
                (Some(x), Some(y)) => nb.set.contains(&(x, y)),
                _ => true,
            }
        })
    }

    fn run(&mut self, pos: usize) -> Result<u64> {
        self.visited += 1;
        if self.visited > BRUTE_FORCE_GUARD {
            return Err(Error::Resource(format!(
                "brute-force enumeration of `{}` exceeded {BRUTE_FORCE_GUARD} partial assignments",
                self.spec.name
            )));
        }
        let Some(&v) = self.order.get(pos) else {
            return Ok(1);
        };
        if v == self.spec.source || v == self.spec.sink {
            if !self.consistent(v) {
                return Ok(0);
            }
            return self.run(pos + 1);
        }
        // candidates come from any already-placed predecessor, else the full type
        let candidates: Vec<usize> = match self
            .edges
            .iter()
            .find(|(e, _)| e.to == v && self.assign[e.from].is_some())
        {
            Some((e, nb)) => nb.out[self.assign[e.from].unwrap()].clone(),
            None => (0..self.counts[v]).collect(),
        };
        let mut total = 0;
        for c in candidates {
            self.assign[v] = Some(c);
            if self.consistent(v) {
                total += self.run(pos + 1)?;
            }
        }
        self.assign[v] = None;
        Ok(total)
    }
}
