use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use handoff::actors::{scripted_act, Actor, ActorPair, ScriptedActor};
use handoff::choice::Constant;
use handoff::collector::{record_line, run_episode, BranchDataset};
use handoff::envs::{synth_generate, Difficulty, SuccessTable, SyntheticSuite};
use handoff::service::{router, Service, ServiceConfig, SessionView};
use handoff::trajectory::{CollabChoice, CollabState, Step};

fn suite() -> SyntheticSuite {
    let (q, t) = synth_generate(2, &[Difficulty::Easy; 2], SuccessTable::uniform(0.5, 0.8), 4, 3).unwrap();
    SyntheticSuite::single(q, t)
}

fn config(suite: &SyntheticSuite) -> ServiceConfig {
    let s = suite.clone();
    ServiceConfig {
        queries: suite.queries.clone(),
        env: Arc::new(move || Ok(Box::new(s.env(0)))),
        agent: Arc::new(|| Ok(Box::new(ScriptedActor::new("agent", CollabChoice::Agent)) as Box<dyn Actor>)),
        hint: false,
        turn_timeout: Duration::from_secs(30),
        default_lambda: 0.1,
        policy: None,
        dataset_out: None,
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn view(v: Value) -> SessionView {
    serde_json::from_value(v).unwrap()
}

/// What the scripted human would type at this point of the session.
fn next_action(suite: &SyntheticSuite, history: &[Step]) -> String {
    let mut state = CollabState::initial(Arc::clone(&suite.queries[0]));
    for s in history {
        state.push(s.clone());
    }
    scripted_act(&state).unwrap().render()
}

fn create_body(kind: &str, seed: u64) -> Value {
    json!({"query_id": "synth-0", "source": {"kind": kind}, "seed": seed})
}

#[tokio::test(flavor = "multi_thread")]
async fn agent_only_session_finishes_without_a_human() {
    let s = suite();
    let app = router(Service::new(config(&s)));
    let query_id = s.queries[0].id.clone();
    let (status, v) = call(&app, "POST", "/sessions", Some(json!({"query_id": query_id, "source": {"kind": "agent_only"}}))).await;
    assert_eq!(status, StatusCode::OK);
    let v = view(v);
    assert_eq!(serde_json::to_value(v.status).unwrap(), "finished");
    assert_eq!(v.interventions, Some(0));
    assert!(v.pending_turn.is_none());
    let (status, again) = call(&app, "GET", &format!("/sessions/{}", v.session_id), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(view(again).reward, v.reward);
    let (_, pending) = call(&app, "GET", "/pending", None).await;
    assert_eq!(pending, json!([]));
}

#[tokio::test(flavor = "multi_thread")]
async fn human_only_session_matches_direct_rollout() {
    let s = suite();
    let app = router(Service::new(config(&s)));
    let mut body = create_body("human_only", 41);
    body["query_id"] = json!(s.queries[0].id);
    let (_, v) = call(&app, "POST", "/sessions", Some(body)).await;
    let mut v = view(v);
    assert_eq!(serde_json::to_value(v.status).unwrap(), "awaiting_human");
    assert_eq!(v.pending_turn.as_ref().unwrap().turn_index, 1);
    let id = v.session_id.clone();

    // Malformed text keeps the turn open and attaches the parse error.
    let (status, err) = call(&app, "POST", &format!("/sessions/{id}/action"), Some(json!({"text": "go somewhere"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(!err["error"].as_str().unwrap().is_empty());
    let (_, still) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    let still = view(still);
    assert_eq!(still.pending_turn.as_ref().unwrap().turn_index, 1);
    assert!(still.pending_turn.as_ref().unwrap().error.is_some());
    assert!(still.history.is_empty());

    let mut submitted = 0;
    while v.pending_turn.is_some() {
        let turn = v.pending_turn.as_ref().unwrap().turn_index;
        let text = next_action(&s, &v.history);
        let uri = format!("/sessions/{id}/action");
        let (status, next) = call(&app, "POST", &uri, Some(json!({"turn_index": turn, "text": text}))).await;
        assert_eq!(status, StatusCode::OK, "{next}");
        // Repeating the same turn records nothing.
        let (status, dup) = call(&app, "POST", &uri, Some(json!({"turn_index": turn, "text": text}))).await;
        assert_eq!(status, StatusCode::OK);
        assert!(view(dup).duplicate);
        v = view(next);
        submitted += 1;
        assert_eq!(v.history.len(), submitted);
    }
    assert_eq!(serde_json::to_value(v.status).unwrap(), "finished");

    let mut env = s.env(0);
    let mut actors = ActorPair::new(
        Box::new(ScriptedActor::new("agent", CollabChoice::Agent)),
        Box::new(ScriptedActor::new("annotator", CollabChoice::Human)),
    );
    let direct = run_episode(&mut env, &mut actors, &mut Constant(CollabChoice::Human), &s.queries[0], 41, 0.1).unwrap();
    assert_eq!(v.record.as_deref(), Some(record_line(&direct).as_str()));

    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/action"), Some(json!({"text": "Hop[x]"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_ids_and_queries_are_404() {
    let s = suite();
    let app = router(Service::new(config(&s)));
    let (status, _) = call(&app, "GET", "/sessions/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "POST", "/sessions", Some(create_body("agent_only", 0))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "POST", "/sessions/nope/action", Some(json!({"text": "Hop[k]"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let body = json!({"query_id": s.queries[0].id, "source": {"kind": "policy"}});
    let (status, _) = call(&app, "POST", "/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn pending_lists_awaiting_sessions_oldest_first() {
    let s = suite();
    let mut cfg = config(&s);
    cfg.hint = true;
    let app = router(Service::new(cfg));
    let mut ids = Vec::new();
    for seed in [1, 2] {
        let mut body = create_body("human_only", seed);
        body["query_id"] = json!(s.queries[0].id);
        let (_, v) = call(&app, "POST", "/sessions", Some(body)).await;
        let v = view(v);
        assert!(v.pending_turn.as_ref().unwrap().hint.as_deref().unwrap().starts_with("Hop["));
        ids.push(v.session_id);
    }
    let mut body = create_body("agent_only", 3);
    body["query_id"] = json!(s.queries[0].id);
    call(&app, "POST", "/sessions", Some(body)).await;
    let (_, pending) = call(&app, "GET", "/pending", None).await;
    let listed: Vec<&str> = pending.as_array().unwrap().iter().map(|p| p["session_id"].as_str().unwrap()).collect();
    assert_eq!(listed, ids);
}

#[tokio::test(flavor = "multi_thread")]
async fn timed_out_turn_aborts_and_is_not_stored() {
    let s = suite();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("live.jsonl");
    let mut cfg = config(&s);
    cfg.turn_timeout = Duration::from_millis(50);
    cfg.dataset_out = Some(out.clone());
    let app = router(Service::new(cfg));
    let mut body = create_body("human_only", 5);
    body["query_id"] = json!(s.queries[0].id);
    let (_, v) = call(&app, "POST", "/sessions", Some(body)).await;
    let id = view(v).session_id;
    tokio::time::sleep(Duration::from_millis(300)).await;
    let (_, v) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    let v = view(v);
    assert_eq!(serde_json::to_value(v.status).unwrap(), "aborted");
    assert!(v.error.unwrap().contains("timed out"));
    assert!(!out.exists());

    let mut body = create_body("agent_only", 6);
    body["query_id"] = json!(s.queries[0].id);
    call(&app, "POST", "/sessions", Some(body)).await;
    let ds = BranchDataset::load(&out).unwrap();
    assert_eq!(ds.trajectories.len(), 1);
}
