use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use setabs_core::sampler::derive_seed;

use crate::pool::TaskPool;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub seed: u64,
    /// Every this-many-th round of a session is a vigilance round; 0 disables them.
    #[serde(default = "default_vigilance_every")]
    pub vigilance_every: usize,
    /// A session with more failed vigilance rounds than this is excluded from reports.
    #[serde(default)]
    pub max_vigilance_failures: usize,
}

fn default_vigilance_every() -> usize {
    5
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig { seed: 0, vigilance_every: default_vigilance_every(), max_vigilance_failures: 0 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("session ids are 1-64 characters of [A-Za-z0-9_-]")]
    BadSession,
    #[error("reference set size must be in 1..=4, got {0}")]
    BadSetSize(usize),
    #[error("no outstanding round `{0}` for this session")]
    UnknownRound(String),
    #[error("round `{0}` was already answered")]
    Duplicate(String),
    #[error("order must be a permutation of 1..=5: {0}")]
    Malformed(String),
    #[error("response log: {0}")]
    Log(#[from] std::io::Error),
    #[error("response log line {line}: {message}")]
    CorruptLog { line: usize, message: String },
}

/// One item as shown to a client.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemView {
    pub id: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thumbnail: Option<String>,
}

/// Client view of a round. Carries nothing from which the expected order
/// or the round's kind could be read.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RoundView {
    Round { round_id: String, n: usize, references: Vec<ItemView>, queries: Vec<ItemView> },
    /// The session has seen every task of the requested size.
    Complete,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitRequest {
    pub session: String,
    pub round_id: String,
    /// Displayed query numbers (1-based) from "Least Similar" to "Most Similar".
    pub order: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitOutcome {
    pub accepted: bool,
    /// Verdict for vigilance rounds, `null` otherwise.
    pub vigilance: Option<bool>,
}

/// One line of the response log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseRecord {
    pub session_id: String,
    pub round_id: String,
    pub round_index: usize,
    pub task_id: String,
    pub n: usize,
    /// The submitted order, as received.
    pub order: Vec<usize>,
    /// Query ids, most similar first.
    pub ranking: Vec<String>,
    pub is_vigilance: bool,
    pub vigilance_pass: Option<bool>,
    pub timestamp_ms: u64,
}

struct Served {
    task: usize,
    round_index: usize,
    /// `shown[j]` indexes the task's `query_ids` for displayed query `j + 1`.
    shown: Vec<usize>,
    view: RoundView,
}

struct Schedule {
    tasks: Vec<usize>,
    cursor: usize,
}

struct Session {
    seed: u64,
    next_round: usize,
    schedules: BTreeMap<(usize, bool), Schedule>,
    outstanding: BTreeMap<String, Served>,
}

struct State {
    sessions: BTreeMap<String, Session>,
    answered: BTreeSet<(String, String)>,
    records: Vec<ResponseRecord>,
    log: File,
}

type Clock = Box<dyn Fn() -> u64 + Send + Sync>;

pub struct Service {
    pool: TaskPool,
    config: ServiceConfig,
    log_path: PathBuf,
    clock: Clock,
    state: Mutex<State>,
}

fn wall_clock_ms() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn session_seed(base: u64, session: &str) -> u64 {
    let digest = Sha256::digest(session.as_bytes());
    derive_seed(base, u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")))
}

fn valid_session(s: &str) -> bool {
    (1..=64).contains(&s.len()) && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

impl Session {
    fn new(config: &ServiceConfig, id: &str) -> Self {
        Session { seed: session_seed(config.seed, id), next_round: 0, schedules: BTreeMap::new(), outstanding: BTreeMap::new() }
    }

    fn schedule(&mut self, pool: &TaskPool, n: usize, vigilance: bool) -> &mut Schedule {
        let seed = derive_seed(self.seed, 2 * n as u64 + vigilance as u64);
        self.schedules.entry((n, vigilance)).or_insert_with(|| {
            let mut tasks: Vec<usize> =
                (0..pool.tasks.len()).filter(|&i| pool.tasks[i].n() == n && pool.tasks[i].is_vigilance == vigilance).collect();
            tasks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            Schedule { tasks, cursor: 0 }
        })
    }

    fn round_id(&self, round_index: usize) -> String {
        format!("{:016x}", derive_seed(self.seed, (1 << 32) + round_index as u64))
    }
}

impl Service {
    /// Opens the service over `log_path`, creating the log if needed and
    /// replaying any records it already holds.
    pub fn open(pool: TaskPool, config: ServiceConfig, log_path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let log_path = log_path.as_ref().to_path_buf();
        let records = read_log(&log_path)?;
        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        let mut state = State { sessions: BTreeMap::new(), answered: BTreeSet::new(), records: Vec::new(), log };
        for r in records {
            let session = state.sessions.entry(r.session_id.clone()).or_insert_with(|| Session::new(&config, &r.session_id));
            session.next_round = session.next_round.max(r.round_index + 1);
            if let Some(task) = pool.tasks.iter().position(|t| t.task_id == r.task_id) {
                let schedule = session.schedule(&pool, r.n, r.is_vigilance);
                if let Some(pos) = schedule.tasks.iter().position(|&t| t == task) {
                    schedule.cursor = schedule.cursor.max(pos + 1);
                }
            }
            state.answered.insert((r.session_id.clone(), r.round_id.clone()));
            state.records.push(r);
        }
        Ok(Service { pool, config, log_path, clock: Box::new(wall_clock_ms), state: Mutex::new(state) })
    }

    /// Replaces the timestamp source.
    pub fn with_clock(mut self, clock: impl Fn() -> u64 + Send + Sync + 'static) -> Self {
        self.clock = Box::new(clock);
        self
    }

    pub fn pool(&self) -> &TaskPool {
        &self.pool
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    pub fn records(&self) -> Vec<ResponseRecord> {
        self.lock().records.clone()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Next round of size `n` for `session`. An unanswered round of the same
    /// size is served again unchanged.
    pub fn serve_round(&self, session: &str, n: usize) -> Result<RoundView, ServiceError> {
        if !valid_session(session) {
            return Err(ServiceError::BadSession);
        }
        if !(1..=4).contains(&n) {
            return Err(ServiceError::BadSetSize(n));
        }
        let mut state = self.lock();
        let s = state.sessions.entry(session.to_owned()).or_insert_with(|| Session::new(&self.config, session));
        if let Some(served) = s.outstanding.values().find(|r| self.pool.tasks[r.task].n() == n) {
            return Ok(served.view.clone());
        }
        let round_index = s.next_round;
        let due = self.config.vigilance_every > 0 && (round_index + 1).is_multiple_of(self.config.vigilance_every);
        let mut pick = |vigilance: bool| {
            let schedule = s.schedule(&self.pool, n, vigilance);
            let t = schedule.tasks.get(schedule.cursor).copied();
            schedule.cursor += t.is_some() as usize;
            t
        };
        // a pool without vigilance tasks left still serves regular rounds
        let task = if due { pick(true).or_else(|| pick(false)) } else { pick(false) };
        let Some(task) = task else { return Ok(RoundView::Complete) };

        let mut shown: Vec<usize> = (0..5).collect();
        shown.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(s.seed, round_index as u64)));
        let t = &self.pool.tasks[task];
        let item = |id: &str| {
            let d = self.pool.display(id);
            ItemView { id: id.to_owned(), label: d.label, thumbnail: d.thumbnail }
        };
        let round_id = s.round_id(round_index);
        let view = RoundView::Round {
            round_id: round_id.clone(),
            n,
            references: t.reference_ids.iter().map(|r| item(r)).collect(),
            queries: shown.iter().map(|&q| item(&t.query_ids[q])).collect(),
        };
        s.next_round += 1;
        s.outstanding.insert(round_id, Served { task, round_index, shown, view: view.clone() });
        Ok(view)
    }

    /// Validates and logs a response. Rejected submissions leave the log untouched.
    pub fn submit(&self, req: &SubmitRequest) -> Result<SubmitOutcome, ServiceError> {
        let mut state = self.lock();
        let key = (req.session.clone(), req.round_id.clone());
        if state.answered.contains(&key) {
            return Err(ServiceError::Duplicate(req.round_id.clone()));
        }
        let served = state
            .sessions
            .get(&req.session)
            .and_then(|s| s.outstanding.get(&req.round_id))
            .ok_or_else(|| ServiceError::UnknownRound(req.round_id.clone()))?;
        let order = parse_order(&req.order)?;
        let task = &self.pool.tasks[served.task];
        // least similar first -> query indices, most similar first
        let most_similar_first: Vec<&str> =
            order.iter().rev().map(|&d| task.query_ids[served.shown[d - 1]].as_str()).collect();
        let vigilance_pass = task.is_vigilance.then(|| {
            Some(most_similar_first[0]) == task.planted_similar.as_deref()
                && Some(most_similar_first[4]) == task.planted_dissimilar.as_deref()
        });
        let record = ResponseRecord {
            session_id: req.session.clone(),
            round_id: req.round_id.clone(),
            round_index: served.round_index,
            task_id: task.task_id.clone(),
            n: task.n(),
            order,
            ranking: most_similar_first.into_iter().map(str::to_owned).collect(),
            is_vigilance: task.is_vigilance,
            vigilance_pass,
            timestamp_ms: (self.clock)(),
        };
        let mut line = serde_json::to_vec(&record).map_err(std::io::Error::from)?;
        line.push(b'\n');
        state.log.write_all(&line)?;
        state.log.flush()?;
        if let Some(s) = state.sessions.get_mut(&req.session) {
            s.outstanding.remove(&req.round_id);
        }
        state.answered.insert(key);
        state.records.push(record);
        Ok(SubmitOutcome { accepted: true, vigilance: vigilance_pass })
    }
}

fn parse_order(order: &[i64]) -> Result<Vec<usize>, ServiceError> {
    if order.len() != 5 {
        return Err(ServiceError::Malformed(format!("expected 5 entries, got {}", order.len())));
    }
    let mut seen = [false; 5];
    let mut out = Vec::with_capacity(5);
    for &d in order {
        if !(1..=5).contains(&d) || std::mem::replace(&mut seen[d as usize - 1], true) {
            return Err(ServiceError::Malformed(format!("{order:?}")));
        }
        out.push(d as usize);
    }
    Ok(out)
}

/// All records of a response log; a missing file is an empty log.
pub fn read_log(path: &Path) -> Result<Vec<ResponseRecord>, ServiceError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| ServiceError::CorruptLog { line: i + 1, message: e.to_string() })?;
        out.push(r);
    }
    Ok(out)
}
