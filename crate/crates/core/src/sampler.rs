//! Power-set-labeled training sets, ranking tasks and planted-outlier sets.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split};
use crate::embed::{cosine_distance, video_embedding, EmbedError, EmbeddingTable};
use crate::relgraph::{GraphError, NodeId, RelationalGraph};

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("no abstraction node has descendant leaves with {0} videos")]
    NoEligibleParents(Split),
    #[error("set size must be in 1..=16, got {0}")]
    BadSetSize(usize),
    #[error("insufficient candidates: {0}")]
    Insufficient(String),
    #[error("unknown video `{0}`")]
    UnknownVideo(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Ground truth for one nonempty subset of a training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetTarget {
    /// Bit `i` set means video `i` is a member.
    pub mask: u32,
    pub nodes: Vec<NodeId>,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub video_ids: Vec<String>,
    /// Abstraction node the set was sampled under.
    pub parent: NodeId,
    /// One entry per nonempty subset, ordered by mask.
    pub subsets: Vec<SubsetTarget>,
}

impl TrainingExample {
    pub fn target(&self, mask: u32) -> Option<&SubsetTarget> {
        self.subsets.binary_search_by_key(&mask, |s| s.mask).ok().map(|i| &self.subsets[i])
    }

    /// Target for the whole set.
    pub fn full_target(&self) -> &SubsetTarget {
        self.subsets.last().expect("at least one subset")
    }

    /// The same example with videos listed in `perm` order
    /// (`perm[new] = old`), masks remapped accordingly.
    pub fn permuted(&self, perm: &[usize]) -> TrainingExample {
        let remap = |mask: u32| {
            perm.iter()
                .enumerate()
                .filter(|(_, &old)| mask & (1 << old) != 0)
                .fold(0u32, |m, (new, _)| m | (1 << new))
        };
        let mut subsets: Vec<SubsetTarget> = self
            .subsets
            .iter()
            .map(|s| SubsetTarget { mask: remap(s.mask), ..s.clone() })
            .collect();
        subsets.sort_by_key(|s| s.mask);
        TrainingExample {
            video_ids: perm.iter().map(|&i| self.video_ids[i].clone()).collect(),
            parent: self.parent.clone(),
            subsets,
        }
    }
}

/// Targets for every nonempty subset of `video_ids`.
///
/// Singletons take the video's own label set; larger subsets take the lowest
/// common abstractions of the union of their members' labels.
pub fn subset_targets(
    g: &RelationalGraph,
    corpus: &Corpus,
    emb: &EmbeddingTable,
    video_ids: &[String],
) -> Result<Vec<SubsetTarget>, SamplerError> {
    let n = video_ids.len();
    if n == 0 || n > 16 {
        return Err(SamplerError::BadSetSize(n));
    }
    let labels = video_ids
        .iter()
        .map(|id| corpus.get(id).map(|r| &r.labels).ok_or_else(|| SamplerError::UnknownVideo(id.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::with_capacity((1 << n) - 1);
    for mask in 1u32..(1 << n) {
        let members: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let nodes = if members.len() == 1 {
            labels[members[0]].clone()
        } else {
            let union: BTreeSet<&NodeId> = members.iter().flat_map(|&i| labels[i].iter()).collect();
            g.lowest_common_abstractions(union)?
        };
        let embedding = emb.mean_of(&nodes)?;
        out.push(SubsetTarget { mask, nodes, embedding });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_set_size")]
    pub n: usize,
    #[serde(default = "default_split")]
    pub split: Split,
}

fn default_set_size() -> usize {
    4
}

fn default_split() -> Split {
    Split::Train
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { n: 4, split: Split::Train }
    }
}

struct Eligible<'a> {
    node: NodeId,
    /// Descendant leaves holding videos, with their video ids.
    leaves: Vec<(NodeId, Vec<&'a str>)>,
}

fn eligible_parents<'a>(
    g: &RelationalGraph,
    corpus: &'a Corpus,
    split: Split,
) -> Result<(Vec<Eligible<'a>>, usize), SamplerError> {
    let by_leaf = corpus.by_leaf(split);
    let mut out = Vec::new();
    let mut skipped = 0;
    for node in g.internal_nodes() {
        let leaves: Vec<(NodeId, Vec<&str>)> = g
            .descendant_leaves(&node)?
            .into_iter()
            .filter_map(|l| by_leaf.get(&l).map(|v| (l, v.clone())))
            .collect();
        if leaves.is_empty() {
            skipped += 1;
        } else {
            out.push(Eligible { node, leaves });
        }
    }
    Ok((out, skipped))
}

/// Pick `n` leaves (distinct when possible), then one video per leaf,
/// avoiding repeated videos when a leaf has more than one.
fn pick_videos(rng: &mut ChaCha8Rng, leaves: &[(NodeId, Vec<&str>)], n: usize) -> Vec<String> {
    let chosen: Vec<&(NodeId, Vec<&str>)> = if leaves.len() >= n {
        leaves.choose_multiple(rng, n).collect()
    } else {
        (0..n).map(|_| leaves.choose(rng).expect("non-empty")).collect()
    };
    let mut used: BTreeSet<&str> = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    for (_, videos) in chosen {
        let fresh: Vec<&str> = videos.iter().copied().filter(|v| !used.contains(v)).collect();
        let pool = if fresh.is_empty() { videos.as_slice() } else { fresh.as_slice() };
        let v = *pool.choose(rng).expect("leaf holds videos");
        used.insert(v);
        out.push(v.to_owned());
    }
    out
}

/// Deterministic stream of training examples. Abstraction nodes are visited
/// round-robin in id order; nodes without any eligible video are skipped.
pub struct TrainingSampler<'a> {
    g: &'a RelationalGraph,
    corpus: &'a Corpus,
    emb: &'a EmbeddingTable,
    n: usize,
    eligible: Vec<Eligible<'a>>,
    skipped: usize,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl<'a> TrainingSampler<'a> {
    pub fn new(
        g: &'a RelationalGraph,
        corpus: &'a Corpus,
        emb: &'a EmbeddingTable,
        cfg: &SamplerConfig,
        seed: u64,
    ) -> Result<Self, SamplerError> {
        if cfg.n == 0 || cfg.n > 16 {
            return Err(SamplerError::BadSetSize(cfg.n));
        }
        let (eligible, skipped) = eligible_parents(g, corpus, cfg.split)?;
        if eligible.is_empty() {
            return Err(SamplerError::NoEligibleParents(cfg.split));
        }
        Ok(TrainingSampler {
            g,
            corpus,
            emb,
            n: cfg.n,
            eligible,
            skipped,
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Abstraction nodes skipped for lack of videos.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn next_example(&mut self) -> Result<TrainingExample, SamplerError> {
        let slot = &self.eligible[self.cursor % self.eligible.len()];
        self.cursor += 1;
        let video_ids = pick_videos(&mut self.rng, &slot.leaves, self.n);
        let subsets = subset_targets(self.g, self.corpus, self.emb, &video_ids)?;
        Ok(TrainingExample { video_ids, parent: slot.node.clone(), subsets })
    }
}

impl Iterator for TrainingSampler<'_> {
    type Item = Result<TrainingExample, SamplerError>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_example())
    }
}

/// Convenience wrapper: the first `count` examples of a seeded stream.
pub fn sample_training_examples(
    g: &RelationalGraph,
    corpus: &Corpus,
    emb: &EmbeddingTable,
    cfg: &SamplerConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<TrainingExample>, SamplerError> {
    TrainingSampler::new(g, corpus, emb, cfg, seed)?.take(count).collect()
}

/// Distance quantiles at which the five queries are drawn.
pub const QUERY_QUANTILES: [f64; 5] = [0.02, 0.25, 0.50, 0.75, 0.98];

/// Index into an ascending list of `len` items for quantile `q`.
pub fn quantile_index(q: f64, len: usize) -> usize {
    (q * (len - 1) as f64).round() as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingTask {
    pub task_id: String,
    pub reference_ids: Vec<String>,
    pub abstraction_ids: Vec<NodeId>,
    pub reference_vector: Vec<f64>,
    /// Query ids sorted by id.
    pub query_ids: Vec<String>,
    /// Cosine distance of each query to `reference_vector`.
    pub query_distances: Vec<f64>,
    /// Indices into `query_ids`, most similar first.
    pub ground_truth_order: Vec<usize>,
    #[serde(default)]
    pub is_vigilance: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted_similar: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted_dissimilar: Option<String>,
}

impl RankingTask {
    pub fn n(&self) -> usize {
        self.reference_ids.len()
    }

    /// Query ids in ground-truth order.
    pub fn ordered_queries(&self) -> Vec<&str> {
        self.ground_truth_order.iter().map(|&i| self.query_ids[i].as_str()).collect()
    }
}

fn video_vector(corpus: &Corpus, emb: &EmbeddingTable, id: &str) -> Result<Vec<f64>, SamplerError> {
    let rec = corpus.get(id).ok_or_else(|| SamplerError::UnknownVideo(id.to_owned()))?;
    Ok(video_embedding(&rec.labels, emb)?)
}

/// Mean of the reference video embeddings together with the abstraction vector.
pub fn reference_vector(
    corpus: &Corpus,
    emb: &EmbeddingTable,
    reference_ids: &[String],
    abstraction: &NodeId,
) -> Result<Vec<f64>, SamplerError> {
    let mut vs = reference_ids
        .iter()
        .map(|id| video_vector(corpus, emb, id))
        .collect::<Result<Vec<_>, _>>()?;
    vs.push(emb.get(abstraction)?.to_vec());
    Ok(crate::embed::mean(vs.iter().map(Vec::as_slice), emb.dim()))
}

/// Test-split videos not in `exclude`, sorted by (distance, id).
fn ranked_pool(
    corpus: &Corpus,
    emb: &EmbeddingTable,
    reference: &[f64],
    exclude: &BTreeSet<&str>,
) -> Result<Vec<(f64, String)>, SamplerError> {
    let mut pool = Vec::new();
    for rec in corpus.split(Split::Test) {
        if exclude.contains(rec.video_id.as_str()) {
            continue;
        }
        let d = cosine_distance(reference, &video_embedding(&rec.labels, emb)?)?;
        pool.push((d, rec.video_id.clone()));
    }
    pool.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    Ok(pool)
}

fn finish_task(
    task_id: String,
    reference_ids: Vec<String>,
    abstraction: NodeId,
    reference_vector: Vec<f64>,
    mut picked: Vec<(f64, String)>,
) -> RankingTask {
    picked.sort_by(|a, b| a.1.cmp(&b.1));
    let query_ids: Vec<String> = picked.iter().map(|(_, id)| id.clone()).collect();
    let query_distances: Vec<f64> = picked.iter().map(|(d, _)| *d).collect();
    let mut order: Vec<usize> = (0..picked.len()).collect();
    order.sort_by(|&a, &b| {
        query_distances[a].total_cmp(&query_distances[b]).then_with(|| query_ids[a].cmp(&query_ids[b]))
    });
    RankingTask {
        task_id,
        reference_ids,
        abstraction_ids: vec![abstraction],
        reference_vector,
        query_ids,
        query_distances,
        ground_truth_order: order,
        is_vigilance: false,
        planted_similar: None,
        planted_dissimilar: None,
    }
}

/// Test-split eligibility for reference sets of size `n`: abstraction nodes
/// with at least `n` descendant videos and at least five other test videos.
fn ranking_candidates<'a>(
    g: &RelationalGraph,
    corpus: &'a Corpus,
    n: usize,
) -> Result<Vec<Eligible<'a>>, SamplerError> {
    let total = corpus.split(Split::Test).count();
    let (eligible, _) = eligible_parents(g, corpus, Split::Test)?;
    Ok(eligible
        .into_iter()
        .filter(|e| {
            let videos: BTreeSet<&str> = e.leaves.iter().flat_map(|(_, v)| v.iter().copied()).collect();
            videos.len() >= n && total >= n + 5
        })
        .collect())
}

/// Build one reference/query ranking task from the test split.
pub fn build_ranking_task(
    g: &RelationalGraph,
    corpus: &Corpus,
    emb: &EmbeddingTable,
    n: usize,
    seed: u64,
) -> Result<RankingTask, SamplerError> {
    if !(1..=4).contains(&n) {
        return Err(SamplerError::BadSetSize(n));
    }
    let eligible = ranking_candidates(g, corpus, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slot = eligible
        .choose(&mut rng)
        .ok_or_else(|| SamplerError::Insufficient(format!("no abstraction node supports N={n}")))?;
    let reference_ids = pick_distinct_videos(&mut rng, &slot.leaves, n);
    let rv = reference_vector(corpus, emb, &reference_ids, &slot.node)?;
    let exclude: BTreeSet<&str> = reference_ids.iter().map(String::as_str).collect();
    let pool = ranked_pool(corpus, emb, &rv, &exclude)?;
    if pool.len() < 5 {
        return Err(SamplerError::Insufficient(format!("{} candidate queries", pool.len())));
    }
    let picked = QUERY_QUANTILES
        .iter()
        .map(|&q| pool[quantile_index(q, pool.len())].clone())
        .collect();
    Ok(finish_task(format!("n{n}-{seed:016x}"), reference_ids, slot.node.clone(), rv, picked))
}

/// Like [`pick_videos`] but never repeats a video.
fn pick_distinct_videos(rng: &mut ChaCha8Rng, leaves: &[(NodeId, Vec<&str>)], n: usize) -> Vec<String> {
    let mut ids = pick_videos(rng, leaves, n);
    let all: Vec<&str> = {
        let set: BTreeSet<&str> = leaves.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        set.into_iter().collect()
    };
    let mut seen = BTreeSet::new();
    for id in ids.iter_mut() {
        if !seen.insert(id.clone()) {
            let fresh: Vec<&str> = all.iter().copied().filter(|v| !seen.contains(*v)).collect();
            *id = fresh.choose(rng).expect("enough videos checked by caller").to_string();
            seen.insert(id.clone());
        }
    }
    ids
}

/// Ancestors-or-self of every label of the given videos.
fn lineage(g: &RelationalGraph, corpus: &Corpus, ids: &[&str]) -> Result<BTreeSet<NodeId>, SamplerError> {
    let mut out = BTreeSet::new();
    for id in ids {
        let rec = corpus.get(id).ok_or_else(|| SamplerError::UnknownVideo((*id).to_owned()))?;
        for l in &rec.labels {
            out.extend(g.ancestors_or_self(l)?);
        }
    }
    Ok(out)
}

/// True when the two lineages share nothing except graph roots.
fn disjoint_below_root(g: &RelationalGraph, a: &BTreeSet<NodeId>, b: &BTreeSet<NodeId>) -> bool {
    a.intersection(b).all(|n| g.roots().contains(n))
}

/// Quality-control ranking task: one query shares a reference's exact
/// labels and is the closest query, one comes from a branch disjoint from
/// the references below the root and is the farthest.
pub fn build_vigilance_task(
    g: &RelationalGraph,
    corpus: &Corpus,
    emb: &EmbeddingTable,
    n: usize,
    seed: u64,
) -> Result<RankingTask, SamplerError> {
    if !(1..=4).contains(&n) {
        return Err(SamplerError::BadSetSize(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eligible = ranking_candidates(g, corpus, n)?;
    eligible.shuffle(&mut rng);
    for slot in &eligible {
        for _attempt in 0..8 {
            let reference_ids = pick_distinct_videos(&mut rng, &slot.leaves, n);
            if let Some(task) = try_vigilance(g, corpus, emb, n, seed, slot, reference_ids)? {
                return Ok(task);
            }
        }
    }
    Err(SamplerError::Insufficient(format!("no vigilance task constructible for N={n}")))
}

fn try_vigilance(
    g: &RelationalGraph,
    corpus: &Corpus,
    emb: &EmbeddingTable,
    n: usize,
    seed: u64,
    slot: &Eligible<'_>,
    reference_ids: Vec<String>,
) -> Result<Option<RankingTask>, SamplerError> {
    let rv = reference_vector(corpus, emb, &reference_ids, &slot.node)?;
    let exclude: BTreeSet<&str> = reference_ids.iter().map(String::as_str).collect();
    let pool = ranked_pool(corpus, emb, &rv, &exclude)?;
    let ref_labels: BTreeSet<&Vec<NodeId>> =
        reference_ids.iter().filter_map(|id| corpus.get(id)).map(|r| &r.labels).collect();
    let ref_strs: Vec<&str> = reference_ids.iter().map(String::as_str).collect();
    let ref_lineage = lineage(g, corpus, &ref_strs)?;
    let Some(similar) = pool
        .iter()
        .position(|(_, id)| corpus.get(id).is_some_and(|r| ref_labels.contains(&r.labels)))
    else {
        return Ok(None);
    };
    let mut dissimilar = None;
    for (i, (_, id)) in pool.iter().enumerate().rev() {
        if disjoint_below_root(g, &ref_lineage, &lineage(g, corpus, &[id.as_str()])?) {
            dissimilar = Some(i);
            break;
        }
    }
    let Some(dissimilar) = dissimilar else { return Ok(None) };
    let (ds, dd) = (pool[similar].0, pool[dissimilar].0);
    let middle: Vec<&(f64, String)> = pool.iter().filter(|(d, _)| *d > ds && *d < dd).collect();
    if middle.len() < 3 {
        return Ok(None);
    }
    let mut picked = vec![pool[similar].clone(), pool[dissimilar].clone()];
    for q in [0.25, 0.50, 0.75] {
        picked.push(middle[quantile_index(q, middle.len())].clone());
    }
    let ids: BTreeSet<&String> = picked.iter().map(|(_, id)| id).collect();
    if ids.len() != 5 {
        return Ok(None);
    }
    let similar_id = pool[similar].1.clone();
    let dissimilar_id = pool[dissimilar].1.clone();
    let mut task = finish_task(format!("v{n}-{seed:016x}"), reference_ids, slot.node.clone(), rv, picked);
    task.is_vigilance = true;
    task.planted_similar = Some(similar_id);
    task.planted_dissimilar = Some(dissimilar_id);
    Ok(Some(task))
}

/// Mix a base seed with an index into an independent stream seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A pool of ranking tasks: `per_n` regular and `vigilance_per_n` vigilance
/// tasks for each reference-set size in `sizes`. Task ids are unique.
pub fn build_task_pool(
    g: &RelationalGraph,
    corpus: &Corpus,
    emb: &EmbeddingTable,
    sizes: &[usize],
    per_n: usize,
    vigilance_per_n: usize,
    seed: u64,
) -> Result<Vec<RankingTask>, SamplerError> {
    let mut out = Vec::new();
    let mut k = 0u64;
    for &n in sizes {
        for i in 0..per_n {
            let mut t = build_ranking_task(g, corpus, emb, n, derive_seed(seed, k))?;
            t.task_id = format!("n{n}-{i:05}");
            out.push(t);
            k += 1;
        }
        for i in 0..vigilance_per_n {
            let mut t = build_vigilance_task(g, corpus, emb, n, derive_seed(seed, k))?;
            t.task_id = format!("v{n}-{i:05}");
            out.push(t);
            k += 1;
        }
    }
    Ok(out)
}

/// A set with exactly one member from a branch unrelated to the others.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierSet {
    pub set_id: String,
    pub video_ids: Vec<String>,
    pub outlier: usize,
    /// Abstraction node the inliers were drawn under.
    pub inlier_node: NodeId,
}

/// Draw `n - 1` test videos under a non-root abstraction node and one test
/// video whose lineage shares nothing with theirs below the root.
pub fn build_outlier_set(
    g: &RelationalGraph,
    corpus: &Corpus,
    n: usize,
    seed: u64,
) -> Result<OutlierSet, SamplerError> {
    if !(2..=4).contains(&n) {
        return Err(SamplerError::BadSetSize(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (eligible, _) = eligible_parents(g, corpus, Split::Test)?;
    let mut inlier_slots: Vec<&Eligible<'_>> =
        eligible.iter().filter(|e| !g.roots().contains(&e.node)).collect();
    if inlier_slots.is_empty() {
        inlier_slots = eligible.iter().collect();
    }
    inlier_slots.shuffle(&mut rng);
    let by_leaf = corpus.by_leaf(Split::Test);
    for slot in inlier_slots {
        let distinct: BTreeSet<&str> = slot.leaves.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        if distinct.len() < n - 1 {
            continue;
        }
        let inliers = pick_distinct_videos(&mut rng, &slot.leaves, n - 1);
        let strs: Vec<&str> = inliers.iter().map(String::as_str).collect();
        let lin = lineage(g, corpus, &strs)?;
        let mut outlier_pool: Vec<&str> = Vec::new();
        for (leaf, videos) in &by_leaf {
            if disjoint_below_root(g, &lin, &g.ancestors_or_self(leaf)?) {
                for v in videos {
                    let rec = corpus.get(v).expect("indexed video");
                    if rec.labels.len() == 1 || disjoint_below_root(g, &lin, &lineage(g, corpus, &[v])?) {
                        outlier_pool.push(v);
                    }
                }
            }
        }
        outlier_pool.sort_unstable();
        outlier_pool.dedup();
        let Some(&outlier_video) = outlier_pool.choose(&mut rng) else { continue };
        let pos = rng.random_range(0..n);
        let mut video_ids = inliers;
        video_ids.insert(pos, outlier_video.to_owned());
        return Ok(OutlierSet {
            set_id: format!("o{n}-{seed:016x}"),
            video_ids,
            outlier: pos,
            inlier_node: slot.node.clone(),
        });
    }
    Err(SamplerError::Insufficient(format!("no planted-outlier set constructible for N={n}")))
}

pub fn build_outlier_sets(
    g: &RelationalGraph,
    corpus: &Corpus,
    n: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<OutlierSet>, SamplerError> {
    (0..count)
        .map(|i| {
            let mut s = build_outlier_set(g, corpus, n, derive_seed(seed, i as u64))?;
            s.set_id = format!("o{n}-{i:05}");
            Ok(s)
        })
        .collect()
}

/// Count of each abstraction node among a list of target sets.
pub fn target_histogram<'a>(targets: impl IntoIterator<Item = &'a [NodeId]>) -> BTreeMap<NodeId, usize> {
    let mut out = BTreeMap::new();
    for t in targets {
        for node in t {
            *out.entry(node.clone()).or_insert(0) += 1;
        }
    }
    out
}
