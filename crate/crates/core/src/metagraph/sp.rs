use super::{MetagraphSpec, NodeId};
use crate::error::{Error, Result};

/// Series-parallel decomposition of a metagraph. Leaves index into
/// `MetagraphSpec::edges`; a series node lists the intermediate nodes between
/// consecutive parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpTree {
    Edge(usize),
    Series(Vec<SpTree>, Vec<NodeId>),
    Parallel(Vec<SpTree>),
}

impl SpTree {
    fn min_edge(&self) -> usize {
        match self {
            SpTree::Edge(k) => *k,
            SpTree::Series(parts, _) => parts.iter().map(SpTree::min_edge).min().unwrap(),
            SpTree::Parallel(bs) => bs.iter().map(SpTree::min_edge).min().unwrap(),
        }
    }

    pub(crate) fn render(&self, spec: &MetagraphSpec, out: &mut String) {
        match self {
            SpTree::Edge(k) => {
                let e = &spec.edges[*k];
                out.push_str(" -[");
                out.push_str(&e.relation);
                if e.reverse {
                    out.push('~');
                }
                out.push_str("]-");
            }
            SpTree::Series(parts, joints) => {
                for (i, part) in parts.iter().enumerate() {
                    part.render(spec, out);
                    if let Some(&j) = joints.get(i) {
                        out.push(' ');
                        out.push_str(spec.node_type(j));
                    }
                }
            }
            SpTree::Parallel(branches) => {
                out.push_str(" -(");
                for (i, b) in branches.iter().enumerate() {
                    if i > 0 {
                        out.push_str(" |");
                    }
                    b.render(spec, out);
                }
                out.push_str(" )-");
            }
        }
    }

    pub(crate) fn visit(&self, nodes: &mut Vec<NodeId>, edges: &mut Vec<usize>) {
        match self {
            SpTree::Edge(k) => edges.push(*k),
            SpTree::Series(parts, joints) => {
                for (i, part) in parts.iter().enumerate() {
                    part.visit(nodes, edges);
                    if let Some(&j) = joints.get(i) {
                        nodes.push(j);
                    }
                }
            }
            SpTree::Parallel(branches) => {
                for b in branches {
                    b.visit(nodes, edges);
                }
            }
        }
    }

    /// Number of parallel blocks in the tree.
    pub fn parallel_blocks(&self) -> usize {
        match self {
            SpTree::Edge(_) => 0,
            SpTree::Series(parts, _) => parts.iter().map(SpTree::parallel_blocks).sum(),
            SpTree::Parallel(bs) => 1 + bs.iter().map(SpTree::parallel_blocks).sum::<usize>(),
        }
    }
}

struct Super {
    from: NodeId,
    to: NodeId,
    tree: SpTree,
}

fn series(a: SpTree, joint: NodeId, b: SpTree) -> SpTree {
    let (mut parts, mut joints) = match a {
        SpTree::Series(p, j) => (p, j),
        t => (vec![t], vec![]),
    };
    joints.push(joint);
    match b {
        SpTree::Series(p, j) => {
            parts.extend(p);
            joints.extend(j);
        }
        t => parts.push(t),
    }
    SpTree::Series(parts, joints)
}

fn parallel(trees: Vec<SpTree>) -> SpTree {
    let mut branches = Vec::new();
    for t in trees {
        match t {
            SpTree::Parallel(bs) => branches.extend(bs),
            t => branches.push(t),
        }
    }
    branches.sort_by_key(SpTree::min_edge);
    SpTree::Parallel(branches)
}

/// Repeated series and parallel reductions until one source-sink edge is
/// left. Fails for DAGs that are not two-terminal series-parallel.
pub(crate) fn decompose(spec: &MetagraphSpec) -> Result<SpTree> {
    let mut work: Vec<Super> = spec
        .edges
        .iter()
        .enumerate()
        .map(|(k, e)| Super {
            from: e.from,
            to: e.to,
            tree: SpTree::Edge(k),
        })
        .collect();
    let n = spec.nodes.len();

    loop {
        if work.len() == 1 && work[0].from == spec.source && work[0].to == spec.sink {
            return Ok(work.pop().unwrap().tree);
        }

        // parallel reduction on the first duplicated endpoint pair
        let dup = (0..work.len()).find_map(|i| {
            let others: Vec<usize> = (i + 1..work.len())
                .filter(|&j| work[j].from == work[i].from && work[j].to == work[i].to)
                .collect();
            (!others.is_empty()).then_some((i, others))
        });
        if let Some((i, others)) = dup {
            let (from, to) = (work[i].from, work[i].to);
            let mut group = Vec::new();
            let mut rest = Vec::new();
            for (k, s) in work.into_iter().enumerate() {
                if k == i || others.contains(&k) {
                    group.push(s.tree);
                } else {
                    rest.push(s);
                }
            }
            rest.insert(
                i.min(rest.len()),
                Super {
                    from,
                    to,
                    tree: parallel(group),
                },
            );
            work = rest;
            continue;
        }

        // series reduction at the smallest inner node with in = out = 1
        let joint = (0..n).find(|&v| {
            v != spec.source
                && v != spec.sink
                && work.iter().filter(|s| s.to == v).count() == 1
                && work.iter().filter(|s| s.from == v).count() == 1
        });
        match joint {
            Some(v) => {
                let a = work.iter().position(|s| s.to == v).unwrap();
                let b = work.iter().position(|s| s.from == v).unwrap();
                let (lo, hi) = (a.min(b), a.max(b));
                let sb = work.remove(hi);
                let sa = work.remove(lo);
                let (into, out) = if a < b { (sa, sb) } else { (sb, sa) };
                work.insert(
                    lo,
                    Super {
                        from: into.from,
                        to: out.to,
                        tree: series(into.tree, v, out.tree),
                    },
                );
            }
            None => return Err(Error::NotSeriesParallel(spec.name.clone())),
        }
    }
}
