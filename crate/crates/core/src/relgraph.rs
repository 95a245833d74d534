//! Directed relational graph over event categories.
//!
//! Leaves are dataset categories, internal nodes are abstractions shared by
//! their descendants. A node may have several parents, so the structure is a
//! DAG rather than a tree, and "lowest common abstraction" queries return a
//! set of minimal common ancestors.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("duplicate node id `{0}`")]
    DuplicateId(NodeId),
    #[error("node `{node}` names unknown parent `{parent}`")]
    DanglingParent { node: NodeId, parent: NodeId },
    #[error("cycle detected: {}", format_cycle(.0))]
    Cycle(Vec<NodeId>),
    #[error("unknown node id `{0}`")]
    UnknownNode(NodeId),
    #[error("empty node set")]
    EmptyNodeSet,
    #[error("nodes {} share no common ancestor", format_ids(.0))]
    NoCommonAncestor(Vec<NodeId>),
    #[error("graph file: {0}")]
    Io(#[from] std::io::Error),
    #[error("graph file: {0}")]
    Json(#[from] serde_json::Error),
}

fn format_cycle(ids: &[NodeId]) -> String {
    let mut parts: Vec<&str> = ids.iter().map(NodeId::as_str).collect();
    if let Some(first) = ids.first() {
        parts.push(first.as_str());
    }
    parts.join(" -> ")
}

fn format_ids(ids: &[NodeId]) -> String {
    let parts: Vec<&str> = ids.iter().map(NodeId::as_str).collect();
    format!("{{{}}}", parts.join(", "))
}

/// Stable node identifier.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_owned())
    }
}

impl From<String> for NodeId {
    fn from(s: String) -> Self {
        NodeId(s)
    }
}

/// One entry of a graph spec file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: NodeId,
    pub name: String,
    #[serde(default)]
    pub parents: Vec<NodeId>,
}

impl NodeSpec {
    pub fn new(id: &str, name: &str, parents: &[&str]) -> Self {
        NodeSpec {
            id: id.into(),
            name: name.to_owned(),
            parents: parents.iter().map(|&p| p.into()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphNode {
    pub id: NodeId,
    pub name: String,
    pub parents: BTreeSet<NodeId>,
    pub children: BTreeSet<NodeId>,
}

impl GraphNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationalGraph {
    nodes: BTreeMap<NodeId, GraphNode>,
    roots: BTreeSet<NodeId>,
}

/// Build a validated graph. Leaves are the nodes never named as a parent.
pub fn build_graph(specs: &[NodeSpec]) -> Result<RelationalGraph, GraphError> {
    let mut nodes: BTreeMap<NodeId, GraphNode> = BTreeMap::new();
    for spec in specs {
        if nodes.contains_key(&spec.id) {
            return Err(GraphError::DuplicateId(spec.id.clone()));
        }
        nodes.insert(
            spec.id.clone(),
            GraphNode {
                id: spec.id.clone(),
                name: spec.name.clone(),
                parents: spec.parents.iter().cloned().collect(),
                children: BTreeSet::new(),
            },
        );
    }
    let mut links = Vec::new();
    for node in nodes.values() {
        for parent in &node.parents {
            if !nodes.contains_key(parent) {
                return Err(GraphError::DanglingParent {
                    node: node.id.clone(),
                    parent: parent.clone(),
                });
            }
            links.push((parent.clone(), node.id.clone()));
        }
    }
    for (parent, child) in links {
        nodes.get_mut(&parent).expect("checked above").children.insert(child);
    }
    if let Some(cycle) = find_cycle(&nodes) {
        return Err(GraphError::Cycle(cycle));
    }
    let roots = nodes
        .values()
        .filter(|n| n.parents.is_empty())
        .map(|n| n.id.clone())
        .collect();
    Ok(RelationalGraph { nodes, roots })
}

/// Depth-first search along parent links; returns one cycle in traversal order.
fn find_cycle(nodes: &BTreeMap<NodeId, GraphNode>) -> Option<Vec<NodeId>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Open,
        Done,
    }
    let mut marks: BTreeMap<&NodeId, Mark> = BTreeMap::new();
    for start in nodes.keys() {
        if marks.contains_key(start) {
            continue;
        }
        // (node, parent iterator) stack; `path` mirrors the open nodes.
        let mut stack: Vec<(&NodeId, std::collections::btree_set::Iter<'_, NodeId>)> =
            vec![(start, nodes[start].parents.iter())];
        let mut path: Vec<&NodeId> = vec![start];
        marks.insert(start, Mark::Open);
        while let Some((_, iter)) = stack.last_mut() {
            match iter.next() {
                Some(parent) if nodes.contains_key(parent) => match marks.get(parent) {
                    Some(Mark::Open) => {
                        let pos = path.iter().position(|&p| p == parent).expect("open node on path");
                        return Some(path[pos..].iter().map(|&p| p.clone()).collect());
                    }
                    Some(Mark::Done) => {}
                    None => {
                        marks.insert(parent, Mark::Open);
                        path.push(parent);
                        stack.push((parent, nodes[parent].parents.iter()));
                    }
                },
                Some(_) => {}
                None => {
                    let (done, _) = stack.pop().expect("non-empty");
                    marks.insert(done, Mark::Done);
                    path.pop();
                }
            }
        }
    }
    None
}

impl RelationalGraph {
    /// Assemble a graph without any checking. Used to inspect corrupted
    /// structures with [`RelationalGraph::validate`].
    pub fn from_parts_unchecked(
        nodes: BTreeMap<NodeId, GraphNode>,
        roots: BTreeSet<NodeId>,
    ) -> Self {
        RelationalGraph { nodes, roots }
    }

    pub fn into_parts(self) -> (BTreeMap<NodeId, GraphNode>, BTreeSet<NodeId>) {
        (self.nodes, self.roots)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes.values()
    }

    pub fn node(&self, id: &NodeId) -> Result<&GraphNode, GraphError> {
        self.nodes.get(id).ok_or_else(|| GraphError::UnknownNode(id.clone()))
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn roots(&self) -> &BTreeSet<NodeId> {
        &self.roots
    }

    /// Leaf ids in id order.
    pub fn leaves(&self) -> Vec<NodeId> {
        self.nodes.values().filter(|n| n.is_leaf()).map(|n| n.id.clone()).collect()
    }

    /// Internal (abstraction) node ids in id order.
    pub fn internal_nodes(&self) -> Vec<NodeId> {
        self.nodes.values().filter(|n| !n.is_leaf()).map(|n| n.id.clone()).collect()
    }

    /// Dense index of every node id, in id order. Used as the classifier vocabulary.
    pub fn vocabulary(&self) -> Vec<NodeId> {
        self.nodes.keys().cloned().collect()
    }

    pub fn is_leaf(&self, id: &NodeId) -> Result<bool, GraphError> {
        Ok(self.node(id)?.is_leaf())
    }

    /// All nodes reachable through parent links, excluding `id` itself.
    pub fn ancestors(&self, id: &NodeId) -> Result<BTreeSet<NodeId>, GraphError> {
        self.walk(id, |n| &n.parents)
    }

    /// All nodes reachable through child links, excluding `id` itself.
    pub fn descendants(&self, id: &NodeId) -> Result<BTreeSet<NodeId>, GraphError> {
        self.walk(id, |n| &n.children)
    }

    /// Leaves at or below `id`.
    pub fn descendant_leaves(&self, id: &NodeId) -> Result<BTreeSet<NodeId>, GraphError> {
        if self.node(id)?.is_leaf() {
            return Ok(BTreeSet::from([id.clone()]));
        }
        Ok(self
            .descendants(id)?
            .into_iter()
            .filter(|d| self.nodes[d].is_leaf())
            .collect())
    }

    fn walk<F>(&self, id: &NodeId, next: F) -> Result<BTreeSet<NodeId>, GraphError>
    where
        F: Fn(&GraphNode) -> &BTreeSet<NodeId>,
    {
        let start = self.node(id)?;
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<&GraphNode> = VecDeque::from([start]);
        while let Some(node) = queue.pop_front() {
            for nb in next(node) {
                if nb != id && !seen.contains(nb) {
                    if let Some(n) = self.nodes.get(nb) {
                        seen.insert(nb.clone());
                        queue.push_back(n);
                    }
                }
            }
        }
        Ok(seen)
    }

    pub fn ancestors_or_self(&self, id: &NodeId) -> Result<BTreeSet<NodeId>, GraphError> {
        let mut set = self.ancestors(id)?;
        set.insert(id.clone());
        Ok(set)
    }

    /// Minimal common ancestors of a node set.
    ///
    /// A single node (after de-duplication) is its own abstraction. For larger
    /// sets the candidates are the common ancestors-or-self minus the inputs;
    /// when that is empty an input that is an ancestor of all others is
    /// admitted instead. Results are sorted by id.
    pub fn lowest_common_abstractions<'a, I>(&self, ids: I) -> Result<Vec<NodeId>, GraphError>
    where
        I: IntoIterator<Item = &'a NodeId>,
    {
        let inputs: BTreeSet<NodeId> = ids.into_iter().cloned().collect();
        let mut iter = inputs.iter();
        let first = iter.next().ok_or(GraphError::EmptyNodeSet)?;
        if inputs.len() == 1 {
            self.node(first)?;
            return Ok(vec![first.clone()]);
        }
        let mut common = self.ancestors_or_self(first)?;
        for id in iter {
            let anc = self.ancestors_or_self(id)?;
            common.retain(|c| anc.contains(c));
        }
        let strict: BTreeSet<NodeId> = common.difference(&inputs).cloned().collect();
        let candidates = if strict.is_empty() { common } else { strict };
        if candidates.is_empty() {
            return Err(GraphError::NoCommonAncestor(inputs.into_iter().collect()));
        }
        let mut dominated = BTreeSet::new();
        for c in &candidates {
            dominated.extend(self.ancestors(c)?);
        }
        Ok(candidates.into_iter().filter(|c| !dominated.contains(c)).collect())
    }

    /// Node ids with children listed before parents; ties broken by id.
    pub fn bottom_up_order(&self) -> Vec<NodeId> {
        let mut pending: BTreeMap<&NodeId, usize> =
            self.nodes.values().map(|n| (&n.id, n.children.len())).collect();
        let mut ready: BTreeSet<&NodeId> =
            pending.iter().filter(|(_, &c)| c == 0).map(|(&id, _)| id).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(id) = ready.pop_first() {
            order.push(id.clone());
            for parent in &self.nodes[id].parents {
                if let Some(count) = pending.get_mut(parent) {
                    *count -= 1;
                    if *count == 0 {
                        ready.insert(parent);
                    }
                }
            }
        }
        order
    }

    /// Graph spec entries in id order.
    pub fn to_specs(&self) -> Vec<NodeSpec> {
        self.nodes
            .values()
            .map(|n| NodeSpec {
                id: n.id.clone(),
                name: n.name.clone(),
                parents: n.parents.iter().cloned().collect(),
            })
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GraphError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let specs: Vec<NodeSpec> = serde_json::from_str(text)?;
        build_graph(&specs)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_specs()).expect("specs serialize");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GraphError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Check every structural invariant and list the violations found.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        for node in self.nodes.values() {
            for parent in &node.parents {
                match self.nodes.get(parent) {
                    None => violations.push(Violation::DanglingParent {
                        node: node.id.clone(),
                        parent: parent.clone(),
                    }),
                    Some(p) if !p.children.contains(&node.id) => {
                        violations.push(Violation::MissingChildLink {
                            parent: parent.clone(),
                            child: node.id.clone(),
                        })
                    }
                    Some(_) => {}
                }
            }
            for child in &node.children {
                match self.nodes.get(child) {
                    None => violations.push(Violation::DanglingChild {
                        node: node.id.clone(),
                        child: child.clone(),
                    }),
                    Some(c) if !c.parents.contains(&node.id) => {
                        violations.push(Violation::MissingParentLink {
                            parent: node.id.clone(),
                            child: child.clone(),
                        })
                    }
                    Some(_) => {}
                }
            }
            if node.parents.is_empty() && !self.roots.contains(&node.id) {
                violations.push(Violation::Orphan { node: node.id.clone() });
            }
        }
        for root in &self.roots {
            match self.nodes.get(root) {
                Some(n) if n.parents.is_empty() => {}
                _ => violations.push(Violation::FalseRoot { node: root.clone() }),
            }
        }
        for members in self.cyclic_components() {
            violations.push(Violation::Cycle { members });
        }
        ValidationReport { violations }
    }

    /// Strongly connected components (size > 1, or self-looped) over the union
    /// of parent and child links whose endpoints exist.
    fn cyclic_components(&self) -> Vec<Vec<NodeId>> {
        let ids: Vec<&NodeId> = self.nodes.keys().collect();
        let index: BTreeMap<&NodeId, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        // Edges point child -> parent.
        let mut edges: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); ids.len()];
        for (i, &id) in ids.iter().enumerate() {
            let node = &self.nodes[id];
            for p in &node.parents {
                if let Some(&j) = index.get(p) {
                    edges[i].insert(j);
                }
            }
            for c in &node.children {
                if let Some(&j) = index.get(c) {
                    edges[j].insert(i);
                }
            }
        }
        let sccs = tarjan(&edges);
        let mut out: Vec<Vec<NodeId>> = sccs
            .into_iter()
            .filter(|c| c.len() > 1 || edges[c[0]].contains(&c[0]))
            .map(|c| {
                let mut m: Vec<NodeId> = c.into_iter().map(|i| ids[i].clone()).collect();
                m.sort();
                m
            })
            .collect();
        out.sort();
        out
    }
}

fn tarjan(edges: &[BTreeSet<usize>]) -> Vec<Vec<usize>> {
    struct State<'a> {
        edges: &'a [BTreeSet<usize>],
        index: Vec<Option<usize>>,
        low: Vec<usize>,
        on_stack: Vec<bool>,
        stack: Vec<usize>,
        next: usize,
        out: Vec<Vec<usize>>,
    }
    fn visit(s: &mut State<'_>, v: usize) {
        s.index[v] = Some(s.next);
        s.low[v] = s.next;
        s.next += 1;
        s.stack.push(v);
        s.on_stack[v] = true;
        for &w in s.edges[v].iter() {
            match s.index[w] {
                None => {
                    visit(s, w);
                    s.low[v] = s.low[v].min(s.low[w]);
                }
                Some(iw) if s.on_stack[w] => s.low[v] = s.low[v].min(iw),
                Some(_) => {}
            }
        }
        if Some(s.low[v]) == s.index[v] {
            let mut comp = Vec::new();
            loop {
                let w = s.stack.pop().expect("scc stack");
                s.on_stack[w] = false;
                comp.push(w);
                if w == v {
                    break;
                }
            }
            s.out.push(comp);
        }
    }
    let n = edges.len();
    let mut s = State {
        edges,
        index: vec![None; n],
        low: vec![0; n],
        on_stack: vec![false; n],
        stack: Vec::new(),
        next: 0,
        out: Vec::new(),
    };
    for v in 0..n {
        if s.index[v].is_none() {
            visit(&mut s, v);
        }
    }
    s.out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    DanglingParent { node: NodeId, parent: NodeId },
    DanglingChild { node: NodeId, child: NodeId },
    /// `child` lists `parent`, but `parent` does not list `child`.
    MissingChildLink { parent: NodeId, child: NodeId },
    /// `parent` lists `child`, but `child` does not list `parent`.
    MissingParentLink { parent: NodeId, child: NodeId },
    Cycle { members: Vec<NodeId> },
    /// Parentless node absent from the root set.
    Orphan { node: NodeId },
    /// Root-set entry that is unknown or has parents.
    FalseRoot { node: NodeId },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }
}
