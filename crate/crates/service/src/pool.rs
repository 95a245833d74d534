use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use setabs_core::sampler::RankingTask;
use setabs_core::{Corpus, RelationalGraph};

#[derive(Debug, thiserror::Error)]
pub enum PoolError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("task pool is empty")]
    Empty,
    #[error("duplicate task id `{0}`")]
    DuplicateTask(String),
    #[error("task `{0}` does not have exactly 5 queries")]
    BadTask(String),
    #[error("vigilance task `{0}` lacks its planted queries")]
    BadVigilance(String),
}

/// What a client is shown for one item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemDisplay {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thumbnail: Option<String>,
}

#[derive(Clone, Debug)]
pub struct TaskPool {
    pub tasks: Vec<RankingTask>,
    pub display: BTreeMap<String, ItemDisplay>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PoolError> {
    let text = std::fs::read_to_string(path).map_err(|source| PoolError::Io { path: path.display().to_string(), source })?;
    serde_json::from_str(&text).map_err(|source| PoolError::Json { path: path.display().to_string(), source })
}

impl TaskPool {
    pub fn new(tasks: Vec<RankingTask>, display: BTreeMap<String, ItemDisplay>) -> Result<Self, PoolError> {
        if tasks.is_empty() {
            return Err(PoolError::Empty);
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &tasks {
            if !seen.insert(t.task_id.as_str()) {
                return Err(PoolError::DuplicateTask(t.task_id.clone()));
            }
            if t.query_ids.len() != 5 || t.ground_truth_order.len() != 5 {
                return Err(PoolError::BadTask(t.task_id.clone()));
            }
            if t.is_vigilance {
                let has = |q: &Option<String>| q.as_ref().is_some_and(|q| t.query_ids.contains(q));
                if !has(&t.planted_similar) || !has(&t.planted_dissimilar) {
                    return Err(PoolError::BadVigilance(t.task_id.clone()));
                }
            }
        }
        Ok(TaskPool { tasks, display })
    }

    /// Tasks from a JSON array; display metadata from an optional JSON map of
    /// item id to `{label, thumbnail}`. Items without metadata are labeled by id.
    pub fn load(tasks: impl AsRef<Path>, display: Option<&Path>) -> Result<Self, PoolError> {
        let tasks: Vec<RankingTask> = read_json(tasks.as_ref())?;
        let display = match display {
            Some(p) => read_json(p)?,
            None => BTreeMap::new(),
        };
        Self::new(tasks, display)
    }

    pub fn task(&self, id: &str) -> Option<&RankingTask> {
        self.tasks.iter().find(|t| t.task_id == id)
    }

    pub fn display(&self, item: &str) -> ItemDisplay {
        self.display.get(item).cloned().unwrap_or_else(|| ItemDisplay { label: item.to_owned(), thumbnail: None })
    }
}

/// Label text for every corpus item: the names of its label nodes.
pub fn display_from_corpus(graph: &RelationalGraph, corpus: &Corpus) -> BTreeMap<String, ItemDisplay> {
    corpus
        .records()
        .map(|r| {
            let names: Vec<&str> =
                r.labels.iter().map(|l| graph.node(l).map_or(l.as_str(), |n| n.name.as_str())).collect();
            (r.video_id.clone(), ItemDisplay { label: names.join(", "), thumbnail: None })
        })
        .collect()
}
