//! "Try again" loop for SQL tasks: each statement is executed against a
//! read-only database and its rows (or error text) come back as the
//! observation. The episode is solved as soon as a result matches the gold
//! rows exactly; otherwise the task reward is the best IoU seen.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};

use super::{EnvError, Environment, Executor};
use crate::cassette::{Cassette, FixtureMode};
use crate::rewards::iou_score;
use crate::trajectory::{
    ActionFamily, ActionKind, CollabState, EpisodeStatus, Observation, SuccessHint, TaskAction,
};

/// Result of one statement. Rows are canonical JSON arrays, one per row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SqlOutcome {
    Rows { rows: Vec<String> },
    Error { message: String },
}

pub trait SqlExecutor: Send {
    /// `Err` means the executor itself is unusable, not that the statement failed.
    fn execute(&mut self, sql: &str) -> Result<SqlOutcome, String>;
}

impl<T: SqlExecutor + ?Sized> SqlExecutor for Box<T> {
    fn execute(&mut self, sql: &str) -> Result<SqlOutcome, String> {
        (**self).execute(sql)
    }
}

pub struct SqliteExecutor {
    path: PathBuf,
    conn: Connection,
}

impl SqliteExecutor {
    /// Opens `path` read-only.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, EnvError> {
        let path = path.as_ref().to_path_buf();
        let conn = Connection::open_with_flags(
            &path,
            OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
        )
        .map_err(|e| EnvError::ExecutorUnavailable(format!("{}: {e}", path.display())))?;
        Ok(SqliteExecutor { path, conn })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Canonical text of one row: a JSON array with SQL values mapped to JSON.
pub fn canonical_row(values: &[serde_json::Value]) -> String {
    serde_json::Value::Array(values.to_vec()).to_string()
}

fn json_value(v: ValueRef<'_>) -> serde_json::Value {
    match v {
        ValueRef::Null => serde_json::Value::Null,
        ValueRef::Integer(i) => i.into(),
        ValueRef::Real(f) => serde_json::Number::from_f64(f)
            .map(serde_json::Value::Number)
            .unwrap_or_else(|| f.to_string().into()),
        ValueRef::Text(t) => String::from_utf8_lossy(t).into_owned().into(),
        ValueRef::Blob(b) => hex::encode(b).into(),
    }
}

impl SqlExecutor for SqliteExecutor {
    fn execute(&mut self, sql: &str) -> Result<SqlOutcome, String> {
        let run = || -> rusqlite::Result<Vec<String>> {
            let mut stmt = self.conn.prepare(sql)?;
            let width = stmt.column_count();
            let mut rows = stmt.query([])?;
            let mut out = Vec::new();
            while let Some(row) = rows.next()? {
                let values: Vec<serde_json::Value> =
                    (0..width).map(|i| row.get_ref(i).map(json_value)).collect::<Result<_, _>>()?;
                out.push(canonical_row(&values));
            }
            Ok(out)
        };
        Ok(match run() {
            Ok(rows) => SqlOutcome::Rows { rows },
            Err(e) => SqlOutcome::Error { message: e.to_string() },
        })
    }
}

/// SQL executor backed by a cassette, optionally recording a live executor.
pub struct RecordedSqlExecutor {
    inner: Option<Box<dyn SqlExecutor>>,
    cassette: Cassette,
    mode: FixtureMode,
}

impl RecordedSqlExecutor {
    pub fn replay(cassette: Cassette) -> Self {
        RecordedSqlExecutor {
            inner: None,
            cassette,
            mode: FixtureMode::Replay,
        }
    }

    pub fn record(inner: Box<dyn SqlExecutor>, cassette: Cassette) -> Self {
        RecordedSqlExecutor {
            inner: Some(inner),
            cassette,
            mode: FixtureMode::Record,
        }
    }
}

impl SqlExecutor for RecordedSqlExecutor {
    fn execute(&mut self, sql: &str) -> Result<SqlOutcome, String> {
        match (self.mode, self.inner.as_mut()) {
            (FixtureMode::Record, Some(inner)) => {
                let out = inner.execute(sql)?;
                self.cassette.record(&sql, &out).map_err(|e| e.to_string())?;
                Ok(out)
            }
            (FixtureMode::Off, Some(inner)) => inner.execute(sql),
            _ => self.cassette.replay(&sql).map_err(|e| e.to_string()),
        }
    }
}

pub struct TryAgainEnv<E: SqlExecutor> {
    executor: E,
    cache: HashMap<String, SqlOutcome>,
}

impl<E: SqlExecutor> TryAgainEnv<E> {
    pub fn new(executor: E) -> Self {
        TryAgainEnv {
            executor,
            cache: HashMap::new(),
        }
    }

    fn run(&mut self, sql: &str) -> Result<SqlOutcome, EnvError> {
        if let Some(out) = self.cache.get(sql) {
            return Ok(out.clone());
        }
        let out = self.executor.execute(sql).map_err(EnvError::ExecutorUnavailable)?;
        self.cache.insert(sql.to_string(), out.clone());
        Ok(out)
    }
}

fn render_rows(rows: &[String]) -> String {
    if rows.is_empty() {
        "(no rows)".to_string()
    } else {
        rows.join("\n")
    }
}

impl<E: SqlExecutor> Environment for TryAgainEnv<E> {
    fn restore(&mut self, state: &CollabState) -> Result<(), EnvError> {
        if state.query.dataset_tag.family() != ActionFamily::Code {
            return Err(EnvError::UnknownQuery(format!("{} is not a code query", state.query.id)));
        }
        Ok(())
    }

    fn reseed(&mut self, _seed: u64) {}

    fn apply(
        &mut self,
        state: &CollabState,
        action: &TaskAction,
        _executor: &Executor<'_>,
    ) -> Result<Observation, EnvError> {
        action
            .validate_for(state.query.dataset_tag)
            .map_err(|e| EnvError::IllegalAction(e.to_string()))?;
        match action.kind {
            ActionKind::SqlCommand => {
                let gold = state.query.gold.as_rows().unwrap_or_default();
                Ok(match self.run(action.argument())? {
                    SqlOutcome::Rows { rows } => {
                        let hint = if iou_score(&rows, gold) == 1.0 {
                            SuccessHint::Hit
                        } else {
                            SuccessHint::Unknown
                        };
                        Observation::new(render_rows(&rows), hint)
                    }
                    SqlOutcome::Error { message } => Observation::new(format!("Error: {message}"), SuccessHint::Miss),
                })
            }
            ActionKind::Submit => Ok(Observation::new("Submitted.", SuccessHint::Unknown)),
            _ => unreachable!("validated above"),
        }
    }

    fn task_reward(&mut self, state: &CollabState, status: EpisodeStatus) -> Result<f64, EnvError> {
        if status == EpisodeStatus::SolvedByEnv {
            return Ok(1.0);
        }
        let gold = state.query.gold.as_rows().unwrap_or_default().to_vec();
        let mut best: f64 = 0.0;
        for step in &state.history {
            if step.action.kind != ActionKind::SqlCommand {
                continue;
            }
            if let SqlOutcome::Rows { rows } = self.run(step.action.argument())? {
                best = best.max(iou_score(&rows, &gold));
            }
        }
        Ok(best)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::envs::check_termination;
    use crate::trajectory::{CollabChoice, DatasetTag, Gold, Step, TaskQuery};

    fn database(dir: &Path) -> PathBuf {
        let path = dir.join("shop.db");
        let conn = Connection::open(&path).unwrap();
        conn.execute_batch(
            "CREATE TABLE item(id INTEGER, name TEXT, price REAL);
             INSERT INTO item VALUES (1, 'pen', 1.5), (2, 'ink', 3.0), (3, 'pad', 2.25);",
        )
        .unwrap();
        path
    }

    fn query() -> Arc<TaskQuery> {
        let gold = vec![r#"["ink"]"#.to_string(), r#"["pad"]"#.to_string()];
        Arc::new(
            TaskQuery::new("sql-1", "Names of items costing more than 2", Gold::Rows(gold), DatasetTag::Intercode, None)
                .unwrap(),
        )
    }

    const EXEC: Executor<'static> = Executor {
        role: CollabChoice::Agent,
        id: "agent",
        success_override: None,
    };

    fn act<E: SqlExecutor>(env: &mut TryAgainEnv<E>, state: &mut CollabState, kind: ActionKind, arg: &str) -> Observation {
        let action = TaskAction::new(kind, arg).unwrap();
        let obs = env.apply(state, &action, &EXEC).unwrap();
        state.push(Step {
            index: state.next_index(),
            collab: CollabChoice::Agent,
            action,
            observation: obs.clone(),
            executor_id: "agent".into(),
            behavior_prob: 0.5,
        });
        obs
    }

    #[test]
    fn exact_rows_solve_the_task() {
        let dir = tempfile::tempdir().unwrap();
        let mut env = TryAgainEnv::new(SqliteExecutor::open(database(dir.path())).unwrap());
        let mut state = env.reset(&query()).unwrap();
        let obs = act(&mut env, &mut state, ActionKind::SqlCommand, "SELECT name FROM item WHERE price > 2");
        assert_eq!(obs.success_hint, SuccessHint::Hit);
        let status = check_termination(&state).unwrap();
        assert_eq!(status, EpisodeStatus::SolvedByEnv);
        assert_eq!(env.task_reward(&state, status).unwrap(), 1.0);
    }

    #[test]
    fn errors_continue_and_budget_keeps_best_iou() {
        let dir = tempfile::tempdir().unwrap();
        let mut env = TryAgainEnv::new(SqliteExecutor::open(database(dir.path())).unwrap());
        let mut state = env.reset(&query()).unwrap();
        let obs = act(&mut env, &mut state, ActionKind::SqlCommand, "SELEC name FROM item");
        assert!(obs.text.starts_with("Error:"));
        assert_eq!(check_termination(&state), None);
        // {pen, ink, pad} vs {ink, pad}: IoU 2/3
        act(&mut env, &mut state, ActionKind::SqlCommand, "SELECT name FROM item");
        for _ in 0..6 {
            act(&mut env, &mut state, ActionKind::SqlCommand, "SELECT name FROM item WHERE id = 2");
        }
        let status = check_termination(&state).unwrap();
        assert_eq!(status, EpisodeStatus::BudgetExhausted);
        let t = env.task_reward(&state, status).unwrap();
        assert!((t - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn database_is_read_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut exec = SqliteExecutor::open(database(dir.path())).unwrap();
        match exec.execute("DELETE FROM item").unwrap() {
            SqlOutcome::Error { message } => assert!(message.contains("readonly") || message.contains("read-only")),
            other => panic!("write succeeded: {other:?}"),
        }
        assert!(SqliteExecutor::open(dir.path().join("missing.db")).is_err());
    }

    #[test]
    fn recorded_executor_replays() {
        let dir = tempfile::tempdir().unwrap();
        let db = database(dir.path());
        let cassette_path = dir.path().join("sql.jsonl");
        {
            let live = SqliteExecutor::open(&db).unwrap();
            let mut rec = RecordedSqlExecutor::record(Box::new(live), Cassette::open_for_recording(&cassette_path).unwrap());
            rec.execute("SELECT price FROM item WHERE id = 3").unwrap();
        }
        let mut replay = RecordedSqlExecutor::replay(Cassette::open(&cassette_path).unwrap());
        assert_eq!(
            replay.execute("SELECT price FROM item WHERE id = 3").unwrap(),
            SqlOutcome::Rows { rows: vec!["[2.25]".into()] }
        );
        assert!(replay.execute("SELECT 1").is_err());
    }
}
