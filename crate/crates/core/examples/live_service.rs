//! Starts the session service on a local port and plays the human side over
//! HTTP: create a session, answer each pending turn, read the result.

use std::sync::Arc;
use std::time::Duration;

use handoff::actors::{scripted_act, Actor, ScriptedActor};
use handoff::envs::{synth_generate, Difficulty, SuccessTable, SyntheticSuite};
use handoff::service::{router, Service, ServiceConfig, SessionStatus, SessionView};
use handoff::trajectory::{CollabChoice, CollabState};
use serde_json::json;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (query, task) = synth_generate(3, &[Difficulty::Easy; 3], SuccessTable::uniform(0.6, 1.0), 5, 2)?;
    let suite = SyntheticSuite::single(query, task);
    let env_suite = suite.clone();
    let svc = Service::new(ServiceConfig {
        queries: suite.queries.clone(),
        env: Arc::new(move || Ok(Box::new(env_suite.env(0)))),
        agent: Arc::new(|| Ok(Box::new(ScriptedActor::new("agent", CollabChoice::Agent)) as Box<dyn Actor>)),
        hint: true,
        turn_timeout: Duration::from_secs(30),
        default_lambda: 0.08,
        policy: None,
        dataset_out: None,
    });

    let runtime = tokio::runtime::Runtime::new()?;
    let listener = runtime.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
    let base = format!("http://{}", listener.local_addr()?);
    runtime.spawn(async move { axum::serve(listener, router(svc)).await });
    println!("serving on {base}");

    let mut view: SessionView = ureq::post(format!("{base}/sessions"))
        .send_json(json!({
            "query_id": suite.queries[0].id,
            "source": {"kind": "random", "p_human": 0.5},
            "seed": 4
        }))?
        .body_mut()
        .read_json()?;
    println!("session {}: {}", view.session_id, view.question);

    while let Some(turn) = view.pending_turn.clone() {
        let mut state = CollabState::initial(Arc::clone(&suite.queries[0]));
        for s in &view.history {
            state.push(s.clone());
        }
        let text = scripted_act(&state)?.render();
        println!("turn {} (hint {:?}): typing {text}", turn.turn_index, turn.hint);
        view = ureq::post(format!("{base}/sessions/{}/action", view.session_id))
            .send_json(json!({"turn_index": turn.turn_index, "text": text}))?
            .body_mut()
            .read_json()?;
    }
    if view.status != SessionStatus::Finished {
        return Err(format!("session ended as {:?}: {:?}", view.status, view.error).into());
    }
    for s in &view.history {
        println!("  {} {} -> {}", s.collab.label(), s.action.render(), s.observation.text);
    }
    println!(
        "T={:.3} C={} R={:.3}",
        view.task_reward.unwrap_or_default(),
        view.interventions.unwrap_or_default(),
        view.reward.unwrap_or_default()
    );
    Ok(())
}
