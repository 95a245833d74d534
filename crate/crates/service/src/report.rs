use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use setabs_core::evalsuite::{spearman, AuditRecord, EvalError, EvalReport};
use setabs_core::sampler::RankingTask;

use crate::rounds::ResponseRecord;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no responses remain after excluding flagged sessions")]
    Empty,
    #[error("logged task `{0}` is not in the task pool")]
    UnknownTask(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Clone, Debug, Serialize)]
pub struct HumanReport {
    pub report: EvalReport,
    /// Records in the log.
    pub responses: usize,
    /// Non-vigilance responses from unflagged sessions.
    pub included: usize,
    /// Non-vigilance responses dropped with their flagged session.
    pub excluded: usize,
    pub vigilance_responses: usize,
    pub flagged_sessions: Vec<String>,
}

/// Mean Spearman correlation of human rankings against the tasks' true
/// orders. Sessions with more than `max_vigilance_failures` failed vigilance
/// rounds are dropped, and vigilance rounds themselves are not scored. The
/// report's `n` is the common reference-set size, or 0 when sizes are mixed.
pub fn human_report(
    records: &[ResponseRecord],
    tasks: &[RankingTask],
    max_vigilance_failures: usize,
) -> Result<HumanReport, ReportError> {
    let by_id: BTreeMap<&str, &RankingTask> = tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();
    let mut failures: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        if r.vigilance_pass == Some(false) {
            *failures.entry(&r.session_id).or_default() += 1;
        }
    }
    let flagged: BTreeSet<&str> =
        failures.into_iter().filter(|&(_, f)| f > max_vigilance_failures).map(|(s, _)| s).collect();

    let mut items = Vec::new();
    let mut excluded = 0;
    let mut sizes = BTreeSet::new();
    for r in records.iter().filter(|r| !r.is_vigilance) {
        if flagged.contains(r.session_id.as_str()) {
            excluded += 1;
            continue;
        }
        let task = by_id.get(r.task_id.as_str()).ok_or_else(|| ReportError::UnknownTask(r.task_id.clone()))?;
        let truth = task.ordered_queries();
        let human: Vec<&str> = r.ranking.iter().map(String::as_str).collect();
        let rho = spearman(&human, &truth)?;
        sizes.insert(task.n());
        items.push(AuditRecord {
            item_id: format!("{}/{}", r.session_id, r.round_id),
            expected: truth.into_iter().map(str::to_owned).collect(),
            predicted: r.ranking.clone(),
            hits: BTreeMap::new(),
            values: BTreeMap::from([("rho".to_owned(), rho)]),
            scores: Vec::new(),
        });
    }
    if items.is_empty() {
        return Err(ReportError::Empty);
    }
    let n = if sizes.len() == 1 { sizes.into_iter().next().unwrap_or(0) } else { 0 };
    let included = items.len();
    Ok(HumanReport {
        report: EvalReport::from_items("completion", "human", n, items)?,
        responses: records.len(),
        included,
        excluded,
        vigilance_responses: records.iter().filter(|r| r.is_vigilance).count(),
        flagged_sessions: flagged.into_iter().map(str::to_owned).collect(),
    })
}
