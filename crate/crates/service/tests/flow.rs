use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use setabs_core::corpus::{gen_synthetic_corpus, SynthParams};
use setabs_core::embed::{leaf_vectors, propagate, OovPolicy};
use setabs_core::sampler::{build_task_pool, RankingTask};
use setabs_core::synth::{hierarchy, one_hot_word_vectors};
use setabs_core::Corpus;
use setabs_service::{
    display_from_corpus, human_report, router, RoundView, Service, ServiceConfig, SubmitRequest, TaskPool,
};

struct Fixture {
    dir: tempfile::TempDir,
    pool: TaskPool,
    corpus: Corpus,
}

fn fixture() -> Fixture {
    let g = hierarchy(&[3, 2, 3]).unwrap();
    let emb = propagate(&g, &leaf_vectors(&g, &one_hot_word_vectors(&g, 1.0), OovPolicy::Error).unwrap()).unwrap();
    let corpus = gen_synthetic_corpus(&g, &SynthParams { per_leaf: 20, feature_dim: 4, noise: 0.1 }, 3).unwrap();
    let tasks = build_task_pool(&g, &corpus, &emb, &[1, 2], 12, 4, 17).unwrap();
    let pool = TaskPool::new(tasks, display_from_corpus(&g, &corpus)).unwrap();
    Fixture { dir: tempfile::tempdir().unwrap(), pool, corpus }
}

impl Fixture {
    fn log(&self) -> std::path::PathBuf {
        self.dir.path().join("responses.ndjson")
    }

    fn service(&self) -> Arc<Service> {
        Arc::new(Service::open(self.pool.clone(), ServiceConfig { seed: 5, ..Default::default() }, self.log()).unwrap().with_clock(|| 1_700_000_000_000))
    }
}

async fn call(svc: &Arc<Service>, req: Request<Body>) -> (StatusCode, Value) {
    let res = router(svc.clone()).oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn get_round(svc: &Arc<Service>, session: &str, n: usize) -> (StatusCode, Value) {
    call(svc, Request::get(format!("/api/round?session={session}&n={n}")).body(Body::empty()).unwrap()).await
}

async fn post_response(svc: &Arc<Service>, body: Value) -> (StatusCode, Value) {
    let req = Request::post("/api/response").header("content-type", "application/json").body(Body::from(body.to_string())).unwrap();
    call(svc, req).await
}

fn served_task<'a>(pool: &'a TaskPool, view: &Value) -> &'a RankingTask {
    let refs: Vec<&str> = view["references"].as_array().unwrap().iter().map(|r| r["id"].as_str().unwrap()).collect();
    let mut queries: Vec<&str> = view["queries"].as_array().unwrap().iter().map(|r| r["id"].as_str().unwrap()).collect();
    queries.sort();
    pool.tasks.iter().find(|t| t.reference_ids == refs && t.query_ids == queries).expect("served task is in the pool")
}

/// Displayed numbers, least similar first, that submit `ranking` (query ids,
/// most similar first).
fn order_for(view: &Value, ranking: &[&str]) -> Vec<usize> {
    let shown: Vec<&str> = view["queries"].as_array().unwrap().iter().map(|r| r["id"].as_str().unwrap()).collect();
    ranking.iter().rev().map(|id| shown.iter().position(|s| s == id).unwrap() + 1).collect()
}

fn vigilance_ranking(t: &RankingTask, pass: bool) -> Vec<&str> {
    let sim = t.planted_similar.as_deref().unwrap();
    let dis = t.planted_dissimilar.as_deref().unwrap();
    let mut r: Vec<&str> = vec![sim];
    r.extend(t.query_ids.iter().map(String::as_str).filter(|q| *q != sim && *q != dis));
    r.push(dis);
    if !pass {
        r.reverse();
    }
    r
}

fn keys(v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                out.push(k.clone());
                keys(x, out);
            }
        }
        Value::Array(a) => a.iter().for_each(|x| keys(x, out)),
        _ => {}
    }
}

// Permutations of the true order (indices, most similar first) and their
// hand-computed Spearman correlations, 1 - sum(d^2) / 20.
const SCRIPT: [([usize; 5], f64); 8] = [
    ([0, 1, 2, 3, 4], 1.0),
    ([4, 3, 2, 1, 0], -1.0),
    ([1, 0, 2, 3, 4], 0.9),
    ([2, 1, 0, 3, 4], 0.6),
    ([0, 1, 2, 4, 3], 0.9),
    ([0, 2, 1, 3, 4], 0.9),
    ([1, 0, 3, 2, 4], 0.8),
    ([0, 1, 2, 3, 4], 1.0),
];

#[tokio::test]
async fn scripted_ten_round_session() {
    let f = fixture();
    let svc = f.service();
    let mut scripted = SCRIPT.iter();
    let mut verdicts = Vec::new();
    for round in 0..10 {
        let (status, view) = get_round(&svc, "alice", 2).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(view["status"], "round");
        assert_eq!(view["references"].as_array().unwrap().len(), 2);
        assert_eq!(view["queries"].as_array().unwrap().len(), 5);
        let task = served_task(&f.pool, &view);
        assert_eq!(task.is_vigilance, round % 5 == 4, "round {round}");
        let ranking = if task.is_vigilance {
            vigilance_ranking(task, true)
        } else {
            let (perm, _) = scripted.next().unwrap();
            let truth = task.ordered_queries();
            perm.iter().map(|&i| truth[i]).collect()
        };
        let body = json!({ "session": "alice", "round_id": view["round_id"], "order": order_for(&view, &ranking) });
        let (status, out) = post_response(&svc, body).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(out["accepted"], true);
        verdicts.push(out["vigilance"].clone());
    }
    assert_eq!(verdicts.iter().filter(|v| **v == json!(true)).count(), 2);
    assert_eq!(verdicts.iter().filter(|v| v.is_null()).count(), 8);
    let log = std::fs::read_to_string(f.log()).unwrap();
    assert_eq!(log.lines().count(), 10);

    let expected = SCRIPT.iter().map(|(_, r)| r).sum::<f64>() / 8.0;
    let (status, report) = call(&svc, Request::get("/api/report").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(report["items"].as_array().unwrap().len(), 8);
    assert!((report["metrics"]["rho"].as_f64().unwrap() - expected).abs() < 1e-12);
}

#[tokio::test]
async fn failed_vigilance_session_is_excluded() {
    let f = fixture();
    let svc = f.service();
    for (session, pass) in [("alice", true), ("bob", false)] {
        for _ in 0..5 {
            let (_, view) = get_round(&svc, session, 2).await;
            let task = served_task(&f.pool, &view);
            let ranking = if task.is_vigilance { vigilance_ranking(task, pass) } else { task.ordered_queries() };
            let body = json!({ "session": session, "round_id": view["round_id"], "order": order_for(&view, &ranking) });
            let (_, out) = post_response(&svc, body).await;
            if task.is_vigilance {
                assert_eq!(out["vigilance"], json!(pass));
            }
        }
    }
    let h = human_report(&svc.records(), &f.pool.tasks, 0).unwrap();
    assert_eq!(h.responses, 10);
    assert_eq!(h.vigilance_responses, 2);
    assert_eq!((h.included, h.excluded), (4, 4));
    assert_eq!(h.included + h.excluded + h.vigilance_responses, h.responses);
    assert_eq!(h.flagged_sessions, vec!["bob".to_owned()]);
    assert_eq!(h.report.metric("rho"), Some(1.0));
    // with one failure tolerated nobody is flagged
    let lenient = human_report(&svc.records(), &f.pool.tasks, 1).unwrap();
    assert_eq!((lenient.included, lenient.excluded), (8, 0));
}

#[tokio::test]
async fn payloads_never_carry_the_true_order() {
    let f = fixture();
    let svc = f.service();
    let mut payloads = Vec::new();
    let mut agree = 0;
    for i in 0..16 {
        let session = format!("s{i}");
        for n in [1, 2] {
            let (_, view) = get_round(&svc, &session, n).await;
            let task = served_task(&f.pool, &view);
            let shown: Vec<&str> = view["queries"].as_array().unwrap().iter().map(|q| q["id"].as_str().unwrap()).collect();
            agree += (shown == task.ordered_queries()) as usize;
            let ranking = task.ordered_queries();
            let body = json!({ "session": session, "round_id": view["round_id"], "order": order_for(&view, &ranking) });
            let (_, out) = post_response(&svc, body).await;
            payloads.push(view);
            payloads.push(out);
        }
    }
    let (_, report) = call(&svc, Request::get("/api/report").body(Body::empty()).unwrap()).await;
    payloads.push(report.clone());
    let mut all = Vec::new();
    payloads.iter().for_each(|p| keys(p, &mut all));
    for k in &all {
        for bad in ["ground", "truth", "distance", "planted", "abstraction", "is_vigilance"] {
            assert!(!k.contains(bad), "payload key `{k}`");
        }
    }
    for view in payloads.iter().filter(|p| p["status"] == "round") {
        let mut ks: Vec<&str> = view.as_object().unwrap().keys().map(String::as_str).collect();
        ks.sort();
        assert_eq!(ks, ["n", "queries", "references", "round_id", "status"]);
    }
    let items = report["items"].as_array().unwrap();
    for item in items {
        assert_eq!(item["expected"], json!([]));
    }
    let mean = items.iter().map(|i| i["values"]["rho"].as_f64().unwrap()).sum::<f64>() / items.len() as f64;
    assert_eq!(report["metrics"]["rho"].as_f64().unwrap(), mean);
    // served order is a permutation, not the true order
    assert!(agree < 4, "{agree} of 32 rounds shown in true order");
}

#[tokio::test]
async fn rejected_submissions_leave_the_log_unchanged() {
    let f = fixture();
    let svc = f.service();
    let (_, view) = get_round(&svc, "carol", 1).await;
    let good = json!({ "session": "carol", "round_id": view["round_id"], "order": [1, 2, 3, 4, 5] });
    assert_eq!(post_response(&svc, good.clone()).await.0, StatusCode::OK);
    let before = std::fs::read(f.log()).unwrap();

    let (status, out) = post_response(&svc, good).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(out["accepted"], false);
    assert_eq!(std::fs::read(f.log()).unwrap(), before);

    let (_, next) = get_round(&svc, "carol", 1).await;
    let cases = [
        (json!({ "session": "carol", "round_id": "nope", "order": [1, 2, 3, 4, 5] }), StatusCode::NOT_FOUND),
        (json!({ "session": "dave", "round_id": next["round_id"], "order": [1, 2, 3, 4, 5] }), StatusCode::NOT_FOUND),
        (json!({ "session": "carol", "round_id": next["round_id"], "order": [1, 2, 3, 4] }), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({ "session": "carol", "round_id": next["round_id"], "order": [1, 1, 3, 4, 5] }), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({ "session": "carol", "round_id": next["round_id"], "order": "12345" }), StatusCode::UNPROCESSABLE_ENTITY),
    ];
    for (body, code) in cases {
        let (status, out) = post_response(&svc, body).await;
        assert_eq!(status, code);
        assert_eq!(out["accepted"], false);
        assert_eq!(std::fs::read(f.log()).unwrap(), before);
    }
    // the malformed attempts did not consume the round
    let ok = json!({ "session": "carol", "round_id": next["round_id"], "order": [5, 4, 3, 2, 1] });
    assert_eq!(post_response(&svc, ok).await.0, StatusCode::OK);
}

#[tokio::test]
async fn bad_round_requests() {
    let f = fixture();
    let svc = f.service();
    assert_eq!(get_round(&svc, "a%20b", 2).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(get_round(&svc, "ok", 5).await.0, StatusCode::BAD_REQUEST);
    let (status, _) = call(&svc, Request::get("/api/round?session=x").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&svc, Request::get("/api/report").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[test]
fn rounds_are_deterministic_per_session_and_seed() {
    let f = fixture();
    let run = |session: &str, dir: &std::path::Path| {
        let svc = Service::open(f.pool.clone(), ServiceConfig { seed: 5, ..Default::default() }, dir.join(format!("{session}.log"))).unwrap();
        (0..6)
            .map(|_| {
                let v = svc.serve_round(session, 2).unwrap();
                let RoundView::Round { round_id, .. } = &v else { panic!("pool exhausted") };
                svc.submit(&SubmitRequest { session: session.into(), round_id: round_id.clone(), order: vec![1, 2, 3, 4, 5] }).unwrap();
                v
            })
            .collect::<Vec<_>>()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(run("erin", a.path()), run("erin", b.path()));
    assert_ne!(run("erin", b.path()), run("frank", b.path()));
}

#[test]
fn unanswered_round_is_served_again() {
    let f = fixture();
    let svc = f.service();
    let a = svc.serve_round("gail", 2).unwrap();
    assert_eq!(svc.serve_round("gail", 2).unwrap(), a);
    assert_ne!(svc.serve_round("gail", 1).unwrap(), a);
}

#[test]
fn exhausted_pool_reports_complete() {
    let f = fixture();
    let tasks: Vec<RankingTask> = f.pool.tasks.iter().filter(|t| t.n() == 1 && !t.is_vigilance).take(2).cloned().collect();
    let pool = TaskPool::new(tasks, Default::default()).unwrap();
    let svc = Service::open(pool, ServiceConfig::default(), f.log()).unwrap();
    for _ in 0..2 {
        let RoundView::Round { round_id, .. } = svc.serve_round("hal", 1).unwrap() else { panic!("expected a round") };
        svc.submit(&SubmitRequest { session: "hal".into(), round_id, order: vec![1, 2, 3, 4, 5] }).unwrap();
    }
    assert_eq!(svc.serve_round("hal", 1).unwrap(), RoundView::Complete);
    assert_eq!(svc.serve_round("hal", 3).unwrap(), RoundView::Complete);
}

#[test]
fn reopening_the_log_restores_state_and_report() {
    let f = fixture();
    let first = f.service();
    let mut ids = Vec::new();
    for _ in 0..4 {
        let RoundView::Round { round_id, .. } = first.serve_round("ivy", 2).unwrap() else { panic!() };
        first.submit(&SubmitRequest { session: "ivy".into(), round_id: round_id.clone(), order: vec![2, 1, 3, 5, 4] }).unwrap();
        ids.push(round_id);
    }
    let next = first.serve_round("ivy", 2).unwrap();
    let report = human_report(&first.records(), &f.pool.tasks, 0).unwrap().report;
    drop(first);

    let second = f.service();
    assert_eq!(human_report(&second.records(), &f.pool.tasks, 0).unwrap().report, report);
    let dup = second.submit(&SubmitRequest { session: "ivy".into(), round_id: ids[0].clone(), order: vec![1, 2, 3, 4, 5] });
    assert!(matches!(dup, Err(setabs_service::ServiceError::Duplicate(_))));
    assert_eq!(second.serve_round("ivy", 2).unwrap(), next);
}

#[test]
fn vigilance_tasks_plant_a_same_label_and_an_unrelated_query() {
    let f = fixture();
    for t in f.pool.tasks.iter().filter(|t| t.is_vigilance) {
        let labels = |id: &str| f.corpus.get(id).unwrap().labels.clone();
        let sim = labels(t.planted_similar.as_deref().unwrap());
        assert!(t.reference_ids.iter().any(|r| labels(r) == sim));
        let dis = labels(t.planted_dissimilar.as_deref().unwrap());
        for r in &t.reference_ids {
            // the only shared ancestor is the root
            let branch = |id: &str| id.split('-').next().unwrap().to_owned();
            assert_ne!(branch(labels(r)[0].as_str()), branch(dis[0].as_str()));
        }
    }
}

#[test]
fn port_comes_from_the_environment() {
    std::env::set_var(setabs_service::PORT_ENV, "9123");
    assert_eq!(setabs_service::port_from_env(), Ok(9123));
    std::env::set_var(setabs_service::PORT_ENV, "nope");
    assert!(setabs_service::port_from_env().is_err());
    std::env::remove_var(setabs_service::PORT_ENV);
    assert_eq!(setabs_service::port_from_env(), Ok(8080));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_sessions_write_whole_log_lines() {
    let f = fixture();
    let svc = f.service();
    let mut handles = Vec::new();
    for i in 0..12 {
        let svc = svc.clone();
        handles.push(tokio::spawn(async move {
            let session = format!("c{i}");
            for _ in 0..6 {
                let (_, view) = get_round(&svc, &session, 1 + i % 2).await;
                let body = json!({ "session": session, "round_id": view["round_id"], "order": [3, 1, 4, 5, 2] });
                assert_eq!(post_response(&svc, body).await.0, StatusCode::OK);
            }
        }));
    }
    for h in handles {
        h.await.unwrap();
    }
    let log = std::fs::read_to_string(f.log()).unwrap();
    let lines: Vec<setabs_service::ResponseRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 72);
    assert_eq!(lines, svc.records());
}
