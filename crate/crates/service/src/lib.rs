//! Ranking-round service for collecting human orderings of completion tasks.
//!
//! Rounds are drawn from a fixed pool of ranking tasks. Every response is
//! appended to a newline-delimited JSON log, which is the only persistent
//! state: reopening a service on an existing log restores answered rounds and
//! session progress, and the human report is a pure function of the log.

mod http;
mod pool;
mod report;
mod rounds;

pub use http::{port_from_env, router, serve, PORT_ENV};
pub use pool::{display_from_corpus, ItemDisplay, PoolError, TaskPool};
pub use report::{human_report, HumanReport, ReportError};
pub use rounds::{
    read_log, ItemView, ResponseRecord, RoundView, Service, ServiceConfig, ServiceError, SubmitOutcome,
    SubmitRequest,
};
