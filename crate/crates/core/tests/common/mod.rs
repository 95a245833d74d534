#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::Rng;
use setabs_core::relgraph::{NodeId, NodeSpec};
use setabs_core::sam::{forward_set, gradients, loss, SamParams};
use setabs_core::sampler::SubsetTarget;

/// Random DAG over `n` nodes: node `i` takes up to three parents among
/// earlier nodes. With `forest`, some later nodes start new roots.
pub fn random_dag(rng: &mut impl Rng, n: usize, forest: bool) -> Vec<NodeSpec> {
    let mut specs = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("n{i:03}");
        let earlier: Vec<usize> = (0..i).collect();
        let want = if i == 0 || (forest && rng.random_bool(0.03)) { 0 } else { rng.random_range(1..=3.min(i)) };
        let parents: BTreeSet<usize> = earlier.choose_multiple(rng, want).copied().collect();
        specs.push(NodeSpec {
            id: id.as_str().into(),
            name: format!("node {i}"),
            parents: parents.into_iter().map(|p| NodeId::from(format!("n{p:03}"))).collect(),
        });
    }
    specs
}

pub fn parent_map(specs: &[NodeSpec]) -> BTreeMap<NodeId, Vec<NodeId>> {
    specs.iter().map(|s| (s.id.clone(), s.parents.clone())).collect()
}

pub fn child_map(specs: &[NodeSpec]) -> BTreeMap<NodeId, Vec<NodeId>> {
    let mut out: BTreeMap<NodeId, Vec<NodeId>> = specs.iter().map(|s| (s.id.clone(), Vec::new())).collect();
    for s in specs {
        for p in &s.parents {
            out.get_mut(p).unwrap().push(s.id.clone());
        }
    }
    out
}

/// Transitive closure by repeated parent expansion until nothing changes.
pub fn brute_ancestors(parents: &BTreeMap<NodeId, Vec<NodeId>>, n: &NodeId) -> BTreeSet<NodeId> {
    let mut set: BTreeSet<NodeId> = parents[n].iter().cloned().collect();
    loop {
        let next: BTreeSet<NodeId> =
            set.iter().flat_map(|m| parents[m].iter().cloned()).chain(set.iter().cloned()).collect();
        if next.len() == set.len() {
            return set;
        }
        set = next;
    }
}

pub type AncestorTable = BTreeMap<NodeId, BTreeSet<NodeId>>;

pub fn brute_ancestor_table(parents: &BTreeMap<NodeId, Vec<NodeId>>) -> AncestorTable {
    parents.keys().map(|n| (n.clone(), brute_ancestors(parents, n))).collect()
}

/// Intersect ancestor-or-self sets, drop the inputs (unless nothing would
/// remain), keep the minimal elements.
pub fn brute_lca(anc: &AncestorTable, nodes: &[NodeId]) -> Option<Vec<NodeId>> {
    let inputs: BTreeSet<NodeId> = nodes.iter().cloned().collect();
    if inputs.len() == 1 {
        return Some(inputs.into_iter().collect());
    }
    let mut common: Option<BTreeSet<NodeId>> = None;
    for n in &inputs {
        let mut a = anc[n].clone();
        a.insert(n.clone());
        common = Some(match common {
            None => a,
            Some(c) => c.intersection(&a).cloned().collect(),
        });
    }
    let common = common.unwrap();
    if common.is_empty() {
        return None;
    }
    let without: BTreeSet<NodeId> = common.difference(&inputs).cloned().collect();
    let cand = if without.is_empty() { common } else { without };
    let minimal: Vec<NodeId> =
        cand.iter().filter(|c| !cand.iter().any(|d| d != *c && anc[d].contains(*c))).cloned().collect();
    Some(minimal)
}

/// Node vectors by direct recursion over children.
pub fn brute_propagate(
    children: &BTreeMap<NodeId, Vec<NodeId>>,
    leaves: &BTreeMap<NodeId, Vec<f64>>,
) -> BTreeMap<NodeId, Vec<f64>> {
    fn go(
        id: &NodeId,
        children: &BTreeMap<NodeId, Vec<NodeId>>,
        leaves: &BTreeMap<NodeId, Vec<f64>>,
        memo: &mut BTreeMap<NodeId, Vec<f64>>,
    ) -> Vec<f64> {
        if let Some(v) = memo.get(id) {
            return v.clone();
        }
        let kids = &children[id];
        let v = if kids.is_empty() {
            leaves[id].clone()
        } else {
            let vs: Vec<Vec<f64>> = kids.iter().map(|k| go(k, children, leaves, memo)).collect();
            let mut acc = vec![0.0; vs[0].len()];
            for v in &vs {
                for (a, b) in acc.iter_mut().zip(v) {
                    *a += b;
                }
            }
            acc.into_iter().map(|a| a / vs.len() as f64).collect()
        };
        memo.insert(id.clone(), v.clone());
        v
    }
    let mut memo = BTreeMap::new();
    for id in children.keys() {
        go(id, children, leaves, &mut memo);
    }
    memo
}

pub fn rel_close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0))
}

/// Result of comparing tape gradients with central differences.
pub struct GradCheck {
    /// `|analytic - numeric| / max(|analytic|, |numeric|)` over all parameters.
    pub relative_error: f64,
    /// Coordinates whose stencil straddled a ReLU kink and were re-probed
    /// with a smaller step.
    pub refined: usize,
}

/// Central differences of the loss over every parameter with step `step`.
/// Where the estimates at `step` and `step / 2` disagree, the stencil
/// crosses a point of non-differentiability and the coordinate is re-probed
/// with steps shrunk by 100 until two successive estimates agree.
pub fn gradient_check(params: &SamParams, features: &[Vec<f64>], targets: &[SubsetTarget], step: f64) -> GradCheck {
    let (_, analytic) = gradients(params, features, targets).unwrap();
    let analytic = analytic.flat();
    let mut probe = params.clone();
    let mut central = |i: usize, h: f64| {
        let orig = *probe.flat_mut().nth(i).unwrap();
        *probe.flat_mut().nth(i).unwrap() = orig + h;
        let up = loss(&probe, &forward_set(&probe, features).unwrap(), targets).unwrap();
        *probe.flat_mut().nth(i).unwrap() = orig - h;
        let down = loss(&probe, &forward_set(&probe, features).unwrap(), targets).unwrap();
        *probe.flat_mut().nth(i).unwrap() = orig;
        (up - down) / (2.0 * h)
    };
    let agree = |a: f64, b: f64| (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1.0);
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut refined = 0;
    for i in 0..analytic.len() {
        let mut h = step;
        let mut est = central(i, h);
        let mut half = central(i, h / 2.0);
        if !agree(est, half) {
            refined += 1;
            for _ in 0..4 {
                h /= 100.0;
                est = central(i, h);
                half = central(i, h / 2.0);
                if agree(est, half) {
                    break;
                }
            }
        }
        numeric.push(est);
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    GradCheck { relative_error: diff / na.max(nn).max(1e-12), refined }
}

pub struct GradCase {
    pub params: SamParams,
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<SubsetTarget>,
}

/// A small randomized module configuration with one input set and targets
/// for every subset the module produces.
pub fn random_grad_case(rng: &mut impl Rng, seed: u64) -> GradCase {
    use setabs_core::sam::{forward_set, Objective, SamConfig, SubsetMode};
    let mut cfg = SamConfig::new(rng.random_range(1..=8));
    cfg.hidden = rng.random_range(2..=8);
    cfg.max_set_size = rng.random_range(1..=4);
    cfg.subset_mode = if rng.random_bool(0.25) { SubsetMode::PairsOnly } else { SubsetMode::FullPowerSet };
    cfg.objective = *[Objective::SetAbstraction, Objective::SetAbstraction, Objective::Classification, Objective::MultiLabel]
        .choose(rng)
        .unwrap();
    cfg.seed = seed;
    let vocab: Vec<NodeId> = (0..rng.random_range(2..=6)).map(|i| NodeId::from(format!("c{i}"))).collect();
    let embed_dim = rng.random_range(1..=6);
    let params = SamParams::init(&cfg, vocab.clone(), embed_dim).unwrap();
    let n = rng.random_range(1..=cfg.max_set_size);
    let features: Vec<Vec<f64>> =
        (0..n).map(|_| (0..cfg.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let masks: Vec<u32> = forward_set(&params, &features).unwrap().subsets.iter().map(|s| s.mask).collect();
    let targets = masks
        .into_iter()
        .map(|mask| {
            let k = rng.random_range(1..=2);
            let mut nodes: Vec<NodeId> = vocab.choose_multiple(rng, k).cloned().collect();
            nodes.sort();
            SubsetTarget { mask, nodes, embedding: (0..embed_dim).map(|_| rng.random_range(-1.0..1.0)).collect() }
        })
        .collect();
    GradCase { params, features, targets }
}

pub struct World {
    pub graph: setabs_core::RelationalGraph,
    pub embeddings: setabs_core::EmbeddingTable,
    pub corpus: setabs_core::Corpus,
}

/// Forty-leaf benchmark tree with one-hot path-token embeddings and a
/// class-conditional Gaussian corpus.
pub fn bench_world(per_leaf: usize, feature_dim: usize, noise: f64, seed: u64) -> World {
    use setabs_core::corpus::{gen_synthetic_corpus, SynthParams};
    use setabs_core::embed::{leaf_vectors, propagate, OovPolicy};
    use setabs_core::synth::{hierarchy, one_hot_word_vectors};
    let graph = hierarchy(&[4, 2, 5]).unwrap();
    let wv = one_hot_word_vectors(&graph, 6.0);
    let embeddings = propagate(&graph, &leaf_vectors(&graph, &wv, OovPolicy::Error).unwrap()).unwrap();
    let corpus = gen_synthetic_corpus(&graph, &SynthParams { per_leaf, feature_dim, noise }, seed).unwrap();
    World { graph, embeddings, corpus }
}
