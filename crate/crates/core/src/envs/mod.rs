//! Environments: the transition model behind each task family.
//!
//! Every environment keeps only per-episode scratch state that can be rebuilt
//! from a [`CollabState`] via [`Environment::restore`], so collection can fork
//! an episode at any recorded prefix.

pub mod react;
pub mod synthetic;
pub mod tryagain;

use std::sync::Arc;

use thiserror::Error;

use crate::trajectory::{
    ActionKind, CollabChoice, CollabState, DatasetTag, EpisodeStatus, Observation, SuccessHint, TaskAction,
    TaskQuery,
};

pub use react::{HttpWikiClient, ReactEnv, RecordedWikiClient, WikiClient, WikiResponse};
pub use synthetic::{
    brute_force_optimal, expected_sequence_reward, synth_generate, Difficulty, OptimalAllocation, SuccessTable,
    SyntheticEnv, SyntheticRelayTask, SyntheticSuite,
};
pub use tryagain::{RecordedSqlExecutor, SqlExecutor, SqlOutcome, SqliteExecutor, TryAgainEnv};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown query {0}")]
    UnknownQuery(String),
    #[error("illegal action: {0}")]
    IllegalAction(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },
    #[error("executor unavailable: {0}")]
    ExecutorUnavailable(String),
    #[error("enumeration over {0} steps is too large (max 12)")]
    BudgetTooLarge(usize),
    #[error("episode is already terminal")]
    Terminal,
}

/// The actor executing a step, as seen by the environment.
#[derive(Clone, Copy, Debug)]
pub struct Executor<'a> {
    pub role: CollabChoice,
    pub id: &'a str,
    /// Per-actor success probability for synthetic hops, overriding the task table.
    pub success_override: Option<f64>,
}

pub trait Environment: Send {
    /// Rebuilds per-episode scratch state to match `state`.
    fn restore(&mut self, state: &CollabState) -> Result<(), EnvError>;

    /// Reseeds the environment's own random stream.
    fn reseed(&mut self, seed: u64);

    fn apply(
        &mut self,
        state: &CollabState,
        action: &TaskAction,
        executor: &Executor<'_>,
    ) -> Result<Observation, EnvError>;

    /// Terminal task reward `T` in `[0, 1]` for a finished episode.
    fn task_reward(&mut self, state: &CollabState, status: EpisodeStatus) -> Result<f64, EnvError>;

    fn reset(&mut self, query: &Arc<TaskQuery>) -> Result<CollabState, EnvError> {
        let state = CollabState::initial(Arc::clone(query));
        self.restore(&state)?;
        Ok(state)
    }

    fn terminal(&self, state: &CollabState) -> Option<EpisodeStatus> {
        check_termination(state)
    }
}

/// Termination rules: a Finish/Submit action ends the episode; a code task
/// whose last execution matched the gold rows is solved; otherwise the
/// episode ends once the step threshold is reached.
pub fn check_termination(state: &CollabState) -> Option<EpisodeStatus> {
    let last = state.last_step()?;
    if last.action.kind.is_terminal() {
        return Some(EpisodeStatus::FinishedByAction);
    }
    if state.query.dataset_tag == DatasetTag::Intercode
        && last.action.kind == ActionKind::SqlCommand
        && last.observation.success_hint == SuccessHint::Hit
    {
        return Some(EpisodeStatus::SolvedByEnv);
    }
    let threshold = state
        .query
        .dataset_tag
        .step_threshold()
        .unwrap_or(state.query.step_threshold);
    if state.history.len() >= threshold {
        return Some(EpisodeStatus::BudgetExhausted);
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{Gold, Step};

    fn state(tag: DatasetTag, gold: Gold, actions: &[(ActionKind, &str, SuccessHint)]) -> CollabState {
        let q = Arc::new(TaskQuery::new("q", "question", gold, tag, None).unwrap());
        let mut s = CollabState::initial(q);
        for (i, (kind, arg, hint)) in actions.iter().enumerate() {
            s.push(Step {
                index: i + 1,
                collab: CollabChoice::Agent,
                action: TaskAction::new(*kind, *arg).unwrap(),
                observation: Observation::new("o", *hint),
                executor_id: "a".into(),
                behavior_prob: 0.5,
            });
        }
        s
    }

    #[test]
    fn hotpotqa_budget_is_seven() {
        let text = Gold::Text("x".into());
        let six = vec![(ActionKind::Search, "x", SuccessHint::Hit); 6];
        assert_eq!(check_termination(&state(DatasetTag::Hotpotqa, text.clone(), &six)), None);
        let seven = vec![(ActionKind::Search, "x", SuccessHint::Hit); 7];
        assert_eq!(
            check_termination(&state(DatasetTag::Hotpotqa, text, &seven)),
            Some(EpisodeStatus::BudgetExhausted)
        );
    }

    #[test]
    fn strategyqa_four_steps_is_not_terminal() {
        let four = vec![(ActionKind::Lookup, "x", SuccessHint::Miss); 4];
        assert_eq!(check_termination(&state(DatasetTag::Strategyqa, Gold::Text("yes".into()), &four)), None);
        let five = vec![(ActionKind::Lookup, "x", SuccessHint::Miss); 5];
        assert_eq!(
            check_termination(&state(DatasetTag::Strategyqa, Gold::Text("yes".into()), &five)),
            Some(EpisodeStatus::BudgetExhausted)
        );
    }

    #[test]
    fn intercode_solved_and_finish_rules() {
        let rows = Gold::Rows(vec!["[\"1\"]".into()]);
        let solved = [(ActionKind::SqlCommand, "SELECT 1", SuccessHint::Hit)];
        assert_eq!(
            check_termination(&state(DatasetTag::Intercode, rows.clone(), &solved)),
            Some(EpisodeStatus::SolvedByEnv)
        );
        let failed = [(ActionKind::SqlCommand, "SELEC 1", SuccessHint::Miss)];
        assert_eq!(check_termination(&state(DatasetTag::Intercode, rows.clone(), &failed)), None);
        let submit = [(ActionKind::Submit, "submit", SuccessHint::Unknown)];
        assert_eq!(
            check_termination(&state(DatasetTag::Intercode, rows, &submit)),
            Some(EpisodeStatus::FinishedByAction)
        );
        let finish = [(ActionKind::Finish, "x", SuccessHint::Unknown)];
        assert_eq!(
            check_termination(&state(DatasetTag::Hotpotqa, Gold::Text("x".into()), &finish)),
            Some(EpisodeStatus::FinishedByAction)
        );
    }
}
