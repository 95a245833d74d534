//! Abstraction recognition, set completion and odd-one-out evaluations,
//! their baselines, and chance levels.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split};
use crate::embed::{cosine_distance, mean, video_embedding, EmbedError, EmbeddingTable};
use crate::relgraph::{GraphError, NodeId, RelationalGraph};
use crate::sam::{
    abstraction_representation, class_probabilities, forward_set, softmax, top_k, Objective, SamConfig, SamError,
    SamParams, SubsetMode, TrainError,
};
use crate::sampler::{reference_vector, OutlierSet, RankingTask, SamplerError, SubsetTarget, TrainingExample};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("unknown video `{0}`")]
    UnknownVideo(String),
    #[error("video `{0}` has no features")]
    MissingFeatures(String),
    #[error("no items to evaluate")]
    Empty,
    #[error("k = {k} exceeds the {len} available classes")]
    KTooLarge { k: usize, len: usize },
    #[error("invalid frequency {0}")]
    BadFrequency(f64),
    #[error("orderings are not permutations of the same items")]
    NotPermutation,
    #[error("no prediction for video `{0}`")]
    MissingPrediction(String),
    #[error(transparent)]
    Model(#[from] SamError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

/// Per-item evidence behind a report's metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub item_id: String,
    /// Ground truth: target nodes, the true query order, or the outlier id.
    pub expected: Vec<String>,
    /// Prediction, best first.
    pub predicted: Vec<String>,
    /// Boolean outcomes averaged into accuracy metrics.
    #[serde(default)]
    pub hits: BTreeMap<String, bool>,
    /// Real outcomes averaged into mean metrics.
    #[serde(default)]
    pub values: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub model: String,
    pub n: usize,
    pub metrics: BTreeMap<String, f64>,
    pub items: Vec<AuditRecord>,
}

impl EvalReport {
    pub fn from_items(task: &str, model: &str, n: usize, items: Vec<AuditRecord>) -> Result<Self, EvalError> {
        if items.is_empty() {
            return Err(EvalError::Empty);
        }
        let metrics = aggregate(&items);
        Ok(EvalReport { task: task.to_owned(), model: model.to_owned(), n, metrics, items })
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// Accuracies lie in [0, 1] and correlations in [-1, 1].
    pub fn in_range(&self) -> bool {
        self.metrics.iter().all(|(k, &v)| {
            if k == "rho" {
                (-1.0..=1.0).contains(&v)
            } else if k.starts_with("top") {
                (0.0..=1.0).contains(&v)
            } else {
                v.is_finite()
            }
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Recomputes metrics from audit records: every hit key becomes a fraction
/// of items and every value key an item mean.
pub fn aggregate(items: &[AuditRecord]) -> BTreeMap<String, f64> {
    let mut hits: BTreeMap<&str, usize> = BTreeMap::new();
    let mut sums: BTreeMap<&str, f64> = BTreeMap::new();
    for it in items {
        for (k, &h) in &it.hits {
            *hits.entry(k).or_insert(0) += h as usize;
        }
        for (k, &v) in &it.values {
            *sums.entry(k).or_insert(0.0) += v;
        }
    }
    let n = items.len() as f64;
    hits.into_iter()
        .map(|(k, c)| (k.to_owned(), c as f64 / n))
        .chain(sums.into_iter().map(|(k, s)| (k.to_owned(), s / n)))
        .collect()
}

fn features<'a>(corpus: &'a Corpus, ids: &[String]) -> Result<Vec<&'a [f64]>, EvalError> {
    ids.iter()
        .map(|id| {
            let rec = corpus.get(id).ok_or_else(|| EvalError::UnknownVideo(id.clone()))?;
            if rec.features.is_empty() {
                return Err(EvalError::MissingFeatures(id.clone()));
            }
            Ok(rec.features.as_slice())
        })
        .collect()
}

fn abstraction_record(item_id: String, targets: &[NodeId], ranked: Vec<NodeId>) -> AuditRecord {
    let hit_at = |k: usize| ranked.iter().take(k).any(|p| targets.contains(p));
    AuditRecord {
        item_id,
        expected: targets.iter().map(|t| t.to_string()).collect(),
        hits: BTreeMap::from([("top1".to_owned(), hit_at(1)), ("top5".to_owned(), hit_at(5))]),
        predicted: ranked.iter().map(|p| p.to_string()).collect(),
        values: BTreeMap::new(),
        scores: Vec::new(),
    }
}

fn item_id(ex: &TrainingExample) -> String {
    ex.video_ids.join("+")
}

/// Ranks each set's whole-set targets against externally supplied class
/// scores over `vocabulary`. Shared by the model and oracle paths.
pub fn eval_abstraction_scores(
    model: &str,
    vocabulary: &[NodeId],
    examples: &[TrainingExample],
    scores: impl Fn(&TrainingExample) -> Result<Vec<f64>, EvalError>,
) -> Result<EvalReport, EvalError> {
    let n = examples.first().map_or(0, |e| e.video_ids.len());
    let items = examples
        .iter()
        .map(|ex| {
            let s = scores(ex)?;
            let ranked = top_k(&s, 5).into_iter().map(|i| vocabulary[i].clone()).collect();
            Ok(abstraction_record(item_id(ex), &ex.full_target().nodes, ranked))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    EvalReport::from_items("abstraction", model, n, items)
}

/// Whole-set top-1/top-5 of a trained module. A set counts as a hit at `k`
/// if any of its target nodes is among the `k` best classes.
pub fn eval_abstraction(
    params: &SamParams,
    corpus: &Corpus,
    examples: &[TrainingExample],
) -> Result<EvalReport, EvalError> {
    let model = match params.config.subset_mode {
        SubsetMode::FullPowerSet => "set-abstraction",
        SubsetMode::PairsOnly => "pairs-only",
    };
    eval_abstraction_scores(model, &params.vocabulary, examples, |ex| {
        let out = forward_set(params, &features(corpus, &ex.video_ids)?)?;
        Ok(out.full().logits.clone())
    })
}

/// Class probabilities of each video under a singleton classifier, aligned
/// with the classifier's vocabulary.
pub fn video_probabilities<'a>(
    params: &SamParams,
    corpus: &Corpus,
    ids: impl IntoIterator<Item = &'a String>,
) -> Result<BTreeMap<String, Vec<f64>>, EvalError> {
    let mut out = BTreeMap::new();
    for id in ids {
        if out.contains_key(id) {
            continue;
        }
        let x = features(corpus, std::slice::from_ref(id))?;
        let logits = forward_set(params, &x)?.full().logits.clone();
        out.insert(id.clone(), class_probabilities(params, &logits));
    }
    Ok(out)
}

/// Per-video leaf predictions turned into set predictions through the graph.
/// Top-1 is the lowest common abstraction of each video's best leaf. Lower
/// ranks come from joint leaf assignments over each video's five best
/// leaves, ordered by summed log-probability and mapped to their lowest
/// common abstractions, keeping first occurrences.
pub fn baseline_graph_lookup(
    g: &RelationalGraph,
    leaf_vocabulary: &[NodeId],
    probabilities: &BTreeMap<String, Vec<f64>>,
    examples: &[TrainingExample],
) -> Result<EvalReport, EvalError> {
    let n = examples.first().map_or(0, |e| e.video_ids.len());
    let mut items = Vec::with_capacity(examples.len());
    for ex in examples {
        let per_video = ex
            .video_ids
            .iter()
            .map(|id| probabilities.get(id).ok_or_else(|| EvalError::MissingPrediction(id.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let options: Vec<Vec<(usize, f64)>> = per_video
            .iter()
            .map(|p| top_k(p, 5).into_iter().map(|i| (i, p[i].max(f64::MIN_POSITIVE).ln())).collect())
            .collect();
        let mut joint: Vec<(f64, Vec<usize>)> = vec![(0.0, Vec::new())];
        for opts in &options {
            joint = joint
                .iter()
                .flat_map(|(s, picks)| {
                    opts.iter().map(move |&(i, lp)| {
                        let mut p = picks.clone();
                        p.push(i);
                        (s + lp, p)
                    })
                })
                .collect();
        }
        // stable: the all-best assignment stays first among equal scores
        joint.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut ranked: Vec<NodeId> = Vec::new();
        for (_, picks) in &joint {
            let leaves: Vec<&NodeId> = picks.iter().map(|&i| &leaf_vocabulary[i]).collect();
            for node in g.lowest_common_abstractions(leaves)? {
                if !ranked.contains(&node) {
                    ranked.push(node);
                }
            }
            if ranked.len() >= 5 {
                break;
            }
        }
        ranked.truncate(5);
        items.push(abstraction_record(item_id(ex), &ex.full_target().nodes, ranked));
    }
    EvalReport::from_items("abstraction", "graph-lookup", n, items)
}

/// Multi-label baseline: each set predicts the nodes with the highest mean
/// per-video probability.
pub fn baseline_bce(
    vocabulary: &[NodeId],
    probabilities: &BTreeMap<String, Vec<f64>>,
    examples: &[TrainingExample],
) -> Result<EvalReport, EvalError> {
    let mut report = eval_abstraction_scores("multi-label", vocabulary, examples, |ex| {
        let rows = ex
            .video_ids
            .iter()
            .map(|id| probabilities.get(id).map(Vec::as_slice).ok_or_else(|| EvalError::MissingPrediction(id.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(mean(rows.into_iter(), vocabulary.len()))
    })?;
    report.model = "multi-label".into();
    Ok(report)
}

/// Fraction of evaluation items whose target set contains each node.
pub fn target_distribution(examples: &[TrainingExample]) -> BTreeMap<NodeId, f64> {
    let mut counts: BTreeMap<NodeId, usize> = BTreeMap::new();
    for ex in examples {
        for node in &ex.full_target().nodes {
            *counts.entry(node.clone()).or_insert(0) += 1;
        }
    }
    counts.into_iter().map(|(k, c)| (k, c as f64 / examples.len() as f64)).collect()
}

/// Accuracy of always guessing the `k` most frequent nodes: the sum of their
/// frequencies, capped at 1 for multi-target distributions.
pub fn chance_level(frequencies: &BTreeMap<NodeId, f64>, k: usize) -> Result<f64, EvalError> {
    if k > frequencies.len() {
        return Err(EvalError::KTooLarge { k, len: frequencies.len() });
    }
    if let Some(&bad) = frequencies.values().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(EvalError::BadFrequency(bad));
    }
    let mut f: Vec<f64> = frequencies.values().copied().collect();
    f.sort_by(|a, b| b.total_cmp(a));
    Ok(f[..k].iter().sum::<f64>().min(1.0))
}

/// Spearman's rank correlation between two orderings of the same items.
pub fn spearman<T: Ord>(a: &[T], b: &[T]) -> Result<f64, EvalError> {
    let n = a.len();
    if n != b.len() {
        return Err(EvalError::NotPermutation);
    }
    let pos_b: BTreeMap<&T, usize> = b.iter().enumerate().map(|(i, x)| (x, i)).collect();
    if pos_b.len() != n {
        return Err(EvalError::NotPermutation);
    }
    let mut seen = BTreeSet::new();
    let mut d2 = 0usize;
    for (i, x) in a.iter().enumerate() {
        let j = *pos_b.get(x).ok_or(EvalError::NotPermutation)?;
        if !seen.insert(x) {
            return Err(EvalError::NotPermutation);
        }
        d2 += i.abs_diff(j).pow(2);
    }
    if n < 2 {
        return Ok(1.0);
    }
    let n = n as f64;
    Ok(1.0 - 6.0 * d2 as f64 / (n * (n * n - 1.0)))
}

/// Maps items and sets into a space where cosine distance measures
/// dissimilarity.
pub trait SetScorer {
    fn name(&self) -> &str;
    fn item(&self, id: &str) -> Result<Vec<f64>, EvalError>;
    fn set(&self, ids: &[String]) -> Result<Vec<f64>, EvalError>;
    /// Representation of a completion task's reference set.
    fn task_reference(&self, task: &RankingTask) -> Result<Vec<f64>, EvalError> {
        self.set(&task.reference_ids)
    }
}

/// The trained module's embedding head: singleton entries for items, the
/// whole-set entry for sets.
pub struct ModelScorer<'a> {
    pub params: &'a SamParams,
    pub corpus: &'a Corpus,
    pub name: String,
}

impl<'a> ModelScorer<'a> {
    pub fn new(params: &'a SamParams, corpus: &'a Corpus) -> Self {
        let name = match params.config.subset_mode {
            SubsetMode::FullPowerSet => "set-abstraction",
            SubsetMode::PairsOnly => "pairs-only",
        };
        ModelScorer { params, corpus, name: name.to_owned() }
    }
}

impl SetScorer for ModelScorer<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn item(&self, id: &str) -> Result<Vec<f64>, EvalError> {
        self.set(&[id.to_owned()])
    }

    fn set(&self, ids: &[String]) -> Result<Vec<f64>, EvalError> {
        Ok(abstraction_representation(self.params, &features(self.corpus, ids)?)?)
    }
}

/// Raw features, with sets represented by their mean.
pub struct MeanFeatureScorer<'a> {
    pub corpus: &'a Corpus,
}

impl SetScorer for MeanFeatureScorer<'_> {
    fn name(&self) -> &str {
        "mean-feature"
    }

    fn item(&self, id: &str) -> Result<Vec<f64>, EvalError> {
        Ok(features(self.corpus, &[id.to_owned()])?[0].to_vec())
    }

    fn set(&self, ids: &[String]) -> Result<Vec<f64>, EvalError> {
        let f = features(self.corpus, ids)?;
        Ok(mean(f.into_iter(), self.corpus.feature_dim()))
    }
}

/// Ground-truth category embeddings: items map to their label embedding,
/// sets to the embedding of their lowest common abstraction, and completion
/// references to the task's construction vector.
pub struct OracleScorer<'a> {
    pub graph: &'a RelationalGraph,
    pub corpus: &'a Corpus,
    pub embeddings: &'a EmbeddingTable,
}

impl SetScorer for OracleScorer<'_> {
    fn name(&self) -> &str {
        "oracle"
    }

    fn item(&self, id: &str) -> Result<Vec<f64>, EvalError> {
        let rec = self.corpus.get(id).ok_or_else(|| EvalError::UnknownVideo(id.to_owned()))?;
        Ok(video_embedding(&rec.labels, self.embeddings)?)
    }

    fn set(&self, ids: &[String]) -> Result<Vec<f64>, EvalError> {
        let mut labels = BTreeSet::new();
        for id in ids {
            let rec = self.corpus.get(id).ok_or_else(|| EvalError::UnknownVideo(id.clone()))?;
            labels.extend(rec.labels.iter().cloned());
        }
        let lca = self.graph.lowest_common_abstractions(&labels)?;
        Ok(self.embeddings.mean_of(&lca)?)
    }

    fn task_reference(&self, task: &RankingTask) -> Result<Vec<f64>, EvalError> {
        let mut acc = vec![0.0; self.embeddings.dim()];
        for node in &task.abstraction_ids {
            let v = reference_vector(self.corpus, self.embeddings, &task.reference_ids, node)?;
            acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
        let k = task.abstraction_ids.len() as f64;
        Ok(acc.into_iter().map(|a| a / k).collect())
    }
}

/// Query indices by ascending distance; equal distances keep id order.
pub fn order_by_distance(distances: &[f64]) -> (Vec<usize>, usize) {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    let ties = order.windows(2).filter(|w| distances[w[0]] == distances[w[1]]).count();
    (order, ties)
}

/// Mean Spearman correlation between the scorer's query order and the
/// ground-truth order.
pub fn eval_completion(scorer: &dyn SetScorer, tasks: &[RankingTask]) -> Result<EvalReport, EvalError> {
    let n = tasks.first().map_or(0, RankingTask::n);
    let mut items = Vec::with_capacity(tasks.len());
    for task in tasks {
        let reference = scorer.task_reference(task)?;
        let distances = task
            .query_ids
            .iter()
            .map(|q| Ok(cosine_distance(&reference, &scorer.item(q)?)?))
            .collect::<Result<Vec<f64>, EvalError>>()?;
        let (order, ties) = order_by_distance(&distances);
        let rho = spearman(&order, &task.ground_truth_order)?;
        items.push(AuditRecord {
            item_id: task.task_id.clone(),
            expected: task.ordered_queries().into_iter().map(str::to_owned).collect(),
            predicted: order.iter().map(|&i| task.query_ids[i].clone()).collect(),
            hits: BTreeMap::new(),
            values: BTreeMap::from([("rho".to_owned(), rho), ("ties".to_owned(), ties as f64)]),
            scores: distances,
        });
    }
    EvalReport::from_items("completion", scorer.name(), n, items)
}

/// Odd-one-out scores of a set: each member's distance to the representation
/// of the others.
pub fn odd_one_out_scores(scorer: &dyn SetScorer, ids: &[String]) -> Result<Vec<f64>, EvalError> {
    (0..ids.len())
        .map(|i| {
            let rest: Vec<String> = ids.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v.clone()).collect();
            Ok(cosine_distance(&scorer.item(&ids[i])?, &scorer.set(&rest)?)?)
        })
        .collect()
}

/// Top-1/top-2 of picking the planted outlier as the member farthest from
/// the rest. Audit scores are softmax-normalized distances.
pub fn eval_odd_one_out(scorer: &dyn SetScorer, sets: &[OutlierSet]) -> Result<EvalReport, EvalError> {
    let n = sets.first().map_or(0, |s| s.video_ids.len());
    let mut items = Vec::with_capacity(sets.len());
    for set in sets {
        let scores = odd_one_out_scores(scorer, &set.video_ids)?;
        items.push(odd_one_out_record(&set.set_id, &set.video_ids, set.outlier, &scores));
    }
    EvalReport::from_items("odd-one-out", scorer.name(), n, items)
}

pub fn odd_one_out_record(set_id: &str, ids: &[String], outlier: usize, scores: &[f64]) -> AuditRecord {
    let ranked = top_k(scores, ids.len());
    AuditRecord {
        item_id: set_id.to_owned(),
        expected: vec![ids[outlier].clone()],
        predicted: ranked.iter().map(|&i| ids[i].clone()).collect(),
        hits: BTreeMap::from([
            ("top1".to_owned(), ranked[0] == outlier),
            ("top2".to_owned(), ranked.iter().take(2).any(|&i| i == outlier)),
        ]),
        values: BTreeMap::new(),
        scores: softmax(scores),
    }
}

/// One single-video example per video of `split`. With `ancestors`, each
/// target holds the video's labels and all their ancestors.
pub fn singleton_examples(
    g: &RelationalGraph,
    corpus: &Corpus,
    emb: &EmbeddingTable,
    split: Split,
    ancestors: bool,
) -> Result<Vec<TrainingExample>, EvalError> {
    corpus
        .split(split)
        .map(|rec| {
            let mut nodes: BTreeSet<NodeId> = rec.labels.iter().cloned().collect();
            if ancestors {
                for l in &rec.labels {
                    nodes.extend(g.ancestors(l)?);
                }
            }
            let nodes: Vec<NodeId> = nodes.into_iter().collect();
            let embedding = emb.mean_of(&nodes)?;
            Ok(TrainingExample {
                video_ids: vec![rec.video_id.clone()],
                parent: rec.labels[0].clone(),
                subsets: vec![SubsetTarget { mask: 1, nodes, embedding }],
            })
        })
        .collect()
}

/// Configuration for a single-video classifier derived from `base`.
pub fn singleton_config(base: &SamConfig, objective: Objective) -> SamConfig {
    SamConfig { max_set_size: 1, subset_mode: SubsetMode::FullPowerSet, objective, ..base.clone() }
}

/// Plain-text table with one row per model and one column group per set
/// size. Accuracies print as percentages.
pub fn render_table(title: &str, reports: &[EvalReport], metrics: &[&str]) -> String {
    let mut models: Vec<&str> = Vec::new();
    let mut sizes: BTreeSet<usize> = BTreeSet::new();
    for r in reports {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
        sizes.insert(r.n);
    }
    let cell = |model: &str, n: usize, metric: &str| {
        reports
            .iter()
            .find(|r| r.model == model && r.n == n)
            .and_then(|r| r.metric(metric))
            .map_or_else(|| "-".to_owned(), |v| if metric == "rho" { format!("{v:.3}") } else { format!("{:.1}", 100.0 * v) })
    };
    let width = models.iter().map(|m| m.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{title}\n");
    let _ = write!(out, "{:width$}", "Model");
    for n in &sizes {
        for m in metrics {
            let _ = write!(out, " {:>10}", format!("N={n} {m}"));
        }
    }
    out.push('\n');
    for model in models {
        let _ = write!(out, "{model:width$}");
        for &n in &sizes {
            for m in metrics {
                let _ = write!(out, " {:>10}", cell(model, n, m));
            }
        }
        out.push('\n');
    }
    out
}
