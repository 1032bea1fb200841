//! SQL task against a throwaway SQLite database. The agent guesses a wrong
//! query, the human fixes it, and the task reward is the IoU of the best
//! result against the gold rows.

use std::sync::Arc;

use handoff::actors::{Actor, ActorError, ActorPair};
use handoff::choice::Bernoulli;
use handoff::collector::run_episode;
use handoff::envs::{SqliteExecutor, TryAgainEnv};
use handoff::trajectory::{ActionKind, CollabChoice, CollabState, DatasetTag, Gold, TaskAction, TaskQuery};
use rand::RngCore;

struct Typist {
    id: &'static str,
    role: CollabChoice,
    sql: &'static str,
}

impl Actor for Typist {
    fn id(&self) -> &str {
        self.id
    }

    fn role(&self) -> CollabChoice {
        self.role
    }

    fn act(&mut self, state: &CollabState, _rng: &mut dyn RngCore) -> Result<TaskAction, ActorError> {
        let solved = state.history.last().is_some_and(|s| s.observation.text.contains("\"Oslo\""));
        let (kind, text) = if solved { (ActionKind::Submit, "submit") } else { (ActionKind::SqlCommand, self.sql) };
        TaskAction::new(kind, text).map_err(|e| ActorError::Unsupported(e.to_string()))
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let db = dir.path().join("cities.db");
    let conn = rusqlite::Connection::open(&db)?;
    conn.execute_batch(
        "CREATE TABLE city(name TEXT, country TEXT, population INTEGER);
         INSERT INTO city VALUES ('Oslo','NO',709000),('Bergen','NO',286000),('Lyon','FR',522000);",
    )?;
    drop(conn);

    let gold = Gold::Rows(vec![r#"["Bergen"]"#.to_string(), r#"["Oslo"]"#.to_string()]);
    let query = Arc::new(TaskQuery::new(
        "cities-1",
        "List the names of Norwegian cities.",
        gold,
        DatasetTag::Intercode,
        None,
    )?);
    let mut env = TryAgainEnv::new(SqliteExecutor::open(&db)?);
    let mut actors = ActorPair::new(
        Box::new(Typist { id: "agent", role: CollabChoice::Agent, sql: "SELECT name FROM city" }),
        Box::new(Typist { id: "human", role: CollabChoice::Human, sql: "SELECT name FROM city WHERE country = 'NO'" }),
    );
    for seed in 0..4 {
        let t = run_episode(&mut env, &mut actors, &mut Bernoulli { p_human: 0.5 }, &query, seed, 0.08)?;
        let path: Vec<&str> = t.steps.iter().map(|s| s.collab.label()).collect();
        println!(
            "seed {seed}: {:?} T={:.3} C={} R={:.3} ({:?})",
            path, t.task_reward, t.intervention_count, t.reward, t.status
        );
    }
    Ok(())
}
