//! Balanced synthetic hierarchies with matching word vectors.

use std::collections::BTreeSet;

use crate::embed::{tokenize, WordVectorTable};
use crate::relgraph::{build_graph, GraphError, NodeSpec, RelationalGraph};

/// Node specs for a balanced tree below a single `root`. `branching[i]` is
/// the fan-out at depth `i`; the last level holds the leaves. Node ids are
/// path strings (`c0`, `c0-1`, `c0-1-3`), and each node's name lists the ids
/// along its path, so leaves of one subtree share name tokens.
pub fn hierarchy_specs(branching: &[usize]) -> Vec<NodeSpec> {
    let mut specs = vec![NodeSpec { id: "root".into(), name: "root".into(), parents: vec![] }];
    let mut frontier: Vec<(String, Vec<String>)> = vec![("root".into(), vec![])];
    for (depth, &fan) in branching.iter().enumerate() {
        let mut next = Vec::new();
        for (parent, path) in &frontier {
            for c in 0..fan {
                let id = if depth == 0 { format!("c{c}") } else { format!("{parent}-{c}") };
                let mut p = path.clone();
                p.push(id.clone());
                specs.push(NodeSpec { id: id.as_str().into(), name: p.join(" "), parents: vec![parent.as_str().into()] });
                next.push((id, p));
            }
        }
        frontier = next;
    }
    specs
}

pub fn hierarchy(branching: &[usize]) -> Result<RelationalGraph, GraphError> {
    build_graph(&hierarchy_specs(branching))
}

/// Scaled one-hot vector per distinct leaf-name token. Leaves under
/// different top-level branches get orthogonal, nonnegative embeddings.
pub fn one_hot_word_vectors(g: &RelationalGraph, magnitude: f64) -> WordVectorTable {
    let tokens: BTreeSet<String> = g.leaves().iter().flat_map(|id| tokenize(&g.node(id).expect("leaf").name)).collect();
    let mut wv = WordVectorTable::new(tokens.len());
    for (i, t) in tokens.iter().enumerate() {
        let mut v = vec![0.0; tokens.len()];
        v[i] = magnitude;
        wv.insert(t, v).expect("distinct tokens");
    }
    wv
}
