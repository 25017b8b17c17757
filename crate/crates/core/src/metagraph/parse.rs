use super::{MetagraphSpec, MgEdge, NodeId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Colon,
    EdgeOpen,
    EdgeClose,
    Tilde,
    LinkOpen,
    LinkClose,
    LParen,
    RParen,
    Pipe,
}

fn is_ident(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '.'
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    let at = |k: usize| chars.get(k).map(|&(_, c)| c);
    while i < chars.len() {
        let (pos, c) = chars[i];
        let err = |msg: &str| Error::Syntax {
            pos,
            msg: msg.to_owned(),
        };
        match c {
            c if c.is_whitespace() => i += 1,
            '-' => match at(i + 1) {
                Some('[') => {
                    toks.push((pos, Tok::EdgeOpen));
                    i += 2;
                }
                Some('(') => {
                    toks.push((pos, Tok::LinkOpen));
                    i += 2;
                }
                _ => return Err(err("expected `-[` or `-(`")),
            },
            ']' => {
                if at(i + 1) != Some('-') {
                    return Err(err("expected `]-`"));
                }
                toks.push((pos, Tok::EdgeClose));
                i += 2;
            }
            ')' => {
                if at(i + 1) == Some('-') && at(i + 2) != Some('[') {
                    toks.push((pos, Tok::LinkClose));
                    i += 2;
                } else {
                    toks.push((pos, Tok::RParen));
                    i += 1;
                }
            }
            '(' => {
                toks.push((pos, Tok::LParen));
                i += 1;
            }
            '|' => {
                toks.push((pos, Tok::Pipe));
                i += 1;
            }
            ':' => {
                toks.push((pos, Tok::Colon));
                i += 1;
            }
            '~' => {
                toks.push((pos, Tok::Tilde));
                i += 1;
            }
            c if is_ident(c) => {
                let start = i;
                while i < chars.len() && is_ident(chars[i].1) {
                    i += 1;
                }
                let s: String = chars[start..i].iter().map(|&(_, c)| c).collect();
                toks.push((pos, Tok::Ident(s)));
            }
            _ => return Err(err(&format!("unexpected character {c:?}"))),
        }
    }
    Ok(toks)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
    types: Vec<Option<String>>,
    alive: Vec<bool>,
    edges: Vec<MgEdge>,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |&(p, _)| p)
    }

    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Syntax {
            pos: self.offset(),
            msg: msg.into(),
        })
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<()> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            self.fail(format!("expected {what}"))
        }
    }

    fn ident(&mut self, what: &str) -> Result<String> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => self.fail(format!("expected {what}")),
        }
    }

    fn new_node(&mut self, ty: Option<String>) -> NodeId {
        self.types.push(ty);
        self.alive.push(true);
        self.types.len() - 1
    }

    fn unify(&mut self, node: NodeId, ty: &str) -> Result<()> {
        match &self.types[node] {
            None => {
                self.types[node] = Some(ty.to_owned());
                Ok(())
            }
            Some(t) if t == ty => Ok(()),
            Some(t) => Err(Error::BranchEndpoint {
                expected: t.clone(),
                found: ty.to_owned(),
            }),
        }
    }

    /// Folds node `from` into node `into`.
    fn merge(&mut self, from: NodeId, into: NodeId) -> Result<()> {
        if from == into {
            return Ok(());
        }
        if let Some(t) = self.types[from].clone() {
            self.unify(into, &t)?;
        }
        for e in &mut self.edges {
            if e.from == from {
                e.from = into;
            }
            if e.to == from {
                e.to = into;
            }
        }
        self.alive[from] = false;
        Ok(())
    }

    fn starts_elem(&self) -> bool {
        matches!(self.peek(), Some(Tok::Ident(_)) | Some(Tok::LParen))
    }

    fn starts_link(&self) -> bool {
        matches!(self.peek(), Some(Tok::EdgeOpen) | Some(Tok::LinkOpen))
    }

    fn chain(&mut self, bind: Option<NodeId>) -> Result<(NodeId, NodeId)> {
        let (first, mut cur) = self.elem(bind)?;
        while self.starts_link() {
            let to = self.link(cur)?;
            cur = self.elem(Some(to))?.1;
        }
        Ok((first, cur))
    }

    fn elem(&mut self, bind: Option<NodeId>) -> Result<(NodeId, NodeId)> {
        match self.peek() {
            Some(Tok::Ident(_)) => {
                let ty = self.ident("entity type")?;
                let node = match bind {
                    Some(n) => {
                        self.unify(n, &ty)?;
                        n
                    }
                    None => self.new_node(Some(ty)),
                };
                Ok((node, node))
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let edges_before = self.edges.len();
                let (first, last) = self.chain(bind)?;
                if first == last || self.edges.len() == edges_before {
                    return self.fail("parallel branch needs at least one edge");
                }
                let mut branches = 1;
                while self.peek() == Some(&Tok::Pipe) {
                    self.pos += 1;
                    let (_, end) = self.chain(Some(first))?;
                    if end == first {
                        return self.fail("parallel branch needs at least one edge");
                    }
                    self.merge(end, last)?;
                    branches += 1;
                }
                if branches < 2 {
                    return self.fail("parallel block needs at least two branches");
                }
                self.expect(Tok::RParen, "`)`")?;
                Ok((first, last))
            }
            _ => self.fail("expected entity type or `(`"),
        }
    }

    fn link(&mut self, from: NodeId) -> Result<NodeId> {
        match self.peek() {
            Some(Tok::EdgeOpen) => {
                self.pos += 1;
                let relation = self.ident("relation name")?;
                let reverse = if self.peek() == Some(&Tok::Tilde) {
                    self.pos += 1;
                    true
                } else {
                    false
                };
                self.expect(Tok::EdgeClose, "`]-`")?;
                let to = self.new_node(None);
                self.edges.push(MgEdge {
                    from,
                    to,
                    relation,
                    reverse,
                });
                Ok(to)
            }
            Some(Tok::LinkOpen) => {
                self.pos += 1;
                let join = self.branch(from)?;
                let mut branches = 1;
                while self.peek() == Some(&Tok::Pipe) {
                    self.pos += 1;
                    let end = self.branch(from)?;
                    self.merge(end, join)?;
                    branches += 1;
                }
                if branches < 2 {
                    return self.fail("parallel block needs at least two branches");
                }
                self.expect(Tok::LinkClose, "`)-`")?;
                Ok(join)
            }
            _ => self.fail("expected `-[` or `-(`"),
        }
    }

    fn branch(&mut self, from: NodeId) -> Result<NodeId> {
        let mut cur = self.link(from)?;
        while self.starts_elem() {
            let (_, last) = self.elem(Some(cur))?;
            if !self.starts_link() {
                return self.fail("parallel branch must end with an edge");
            }
            cur = self.link(last)?;
        }
        Ok(cur)
    }

    fn finish(self, name: &str) -> Result<MetagraphSpec> {
        let mut remap = vec![usize::MAX; self.types.len()];
        let mut types = Vec::new();
        for (old, ty) in self.types.into_iter().enumerate() {
            if self.alive[old] {
                remap[old] = types.len();
                match ty {
                    Some(t) => types.push(t),
                    None => {
                        return Err(Error::Syntax {
                            pos: self.end,
                            msg: "edge without a target node".into(),
                        })
                    }
                }
            }
        }
        let edges = self
            .edges
            .into_iter()
            .map(|e| MgEdge {
                from: remap[e.from],
                to: remap[e.to],
                ..e
            })
            .collect();
        MetagraphSpec::new(name, types, edges)?.canonical()
    }
}

/// Parses one `NAME: chain` metagraph into its canonical spec.
pub fn parse_metagraph(text: &str) -> Result<MetagraphSpec> {
    let toks = lex(text)?;
    let mut p = Parser {
        toks,
        pos: 0,
        end: text.len(),
        types: Vec::new(),
        alive: Vec::new(),
        edges: Vec::new(),
    };
    let name = p.ident("metagraph name")?;
    p.expect(Tok::Colon, "`:` after metagraph name")?;
    p.chain(None)?;
    if p.pos != p.toks.len() {
        return p.fail("unexpected trailing input");
    }
    p.finish(&name)
}

/// Parses a DSL file: one metagraph per stanza, each starting with `NAME:` at
/// the beginning of a line and possibly continuing on following lines. `#`
/// starts a comment.
pub fn parse_metagraph_file(text: &str) -> Result<Vec<MetagraphSpec>> {
    let mut stanzas: Vec<String> = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("");
        if line.trim().is_empty() {
            continue;
        }
        let starts_new = line
            .trim_start()
            .split(':')
            .next()
            .is_some_and(|head| line.contains(':') && !head.is_empty() && head.trim_end().chars().all(is_ident));
        match stanzas.last_mut() {
            Some(s) if !starts_new => {
                s.push(' ');
                s.push_str(line.trim());
            }
            _ => stanzas.push(line.trim().to_owned()),
        }
    }
    let specs: Vec<MetagraphSpec> = stanzas.iter().map(|s| parse_metagraph(s)).collect::<Result<_>>()?;
    for (i, a) in specs.iter().enumerate() {
        if specs[..i].iter().any(|b| b.name == a.name) {
            return Err(Error::Validation(format!("metagraph `{}` defined twice", a.name)));
        }
    }
    Ok(specs)
}
