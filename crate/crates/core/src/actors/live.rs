//! Bridge between an episode loop and a person typing actions elsewhere.
//!
//! The loop publishes a [`PendingTurn`] on the [`SessionBus`] and blocks
//! until a submission for that session and turn arrives. Turns are keyed by
//! session id, so concurrent sessions never see each other's submissions,
//! and by step index, so a repeated submission for a consumed turn is a no-op.

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::RngCore;
use serde::Serialize;

use super::parse::{action_templates, parse_submission};
use super::{Actor, ActorError};
use crate::trajectory::{CollabChoice, CollabState, DatasetTag, TaskAction};

pub const DEFAULT_TURN_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Clone, Debug, Serialize)]
pub struct PendingTurn {
    pub session_id: String,
    /// 1-based index of the step the human is asked to take.
    pub turn_index: usize,
    pub dataset_tag: DatasetTag,
    pub rendering: String,
    pub legal_actions: Vec<String>,
    pub hint: Option<String>,
    /// Parse error of the last rejected submission for this turn.
    pub error: Option<String>,
    #[serde(skip)]
    pub opened_at: Instant,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SubmitOutcome {
    Accepted,
    /// The turn was already answered; nothing was recorded.
    Duplicate,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum BusError {
    #[error("session {0} is not waiting for a human action")]
    NotAwaiting(String),
    #[error("turn {given} does not match the pending turn {pending}")]
    WrongTurn { given: usize, pending: usize },
}

#[derive(Default)]
struct BusState {
    pending: BTreeMap<String, PendingTurn>,
    inbox: BTreeMap<String, (usize, String)>,
    answered: BTreeMap<String, usize>,
}

#[derive(Default)]
pub struct SessionBus {
    state: Mutex<BusState>,
    changed: Condvar,
}

impl SessionBus {
    pub fn new() -> Arc<Self> {
        Arc::new(SessionBus::default())
    }

    fn lock(&self) -> MutexGuard<'_, BusState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn publish(&self, turn: PendingTurn) {
        let mut s = self.lock();
        s.inbox.remove(&turn.session_id);
        s.pending.insert(turn.session_id.clone(), turn);
        self.changed.notify_all();
    }

    pub fn pending(&self, session_id: &str) -> Option<PendingTurn> {
        self.lock().pending.get(session_id).cloned()
    }

    /// Every open turn, oldest first.
    pub fn list_pending(&self) -> Vec<PendingTurn> {
        let mut all: Vec<PendingTurn> = self.lock().pending.values().cloned().collect();
        all.sort_by(|a, b| a.opened_at.cmp(&b.opened_at).then_with(|| a.session_id.cmp(&b.session_id)));
        all
    }

    pub fn submit(&self, session_id: &str, turn_index: usize, text: &str) -> Result<SubmitOutcome, BusError> {
        let mut s = self.lock();
        if s.answered.get(session_id).is_some_and(|&t| t >= turn_index) {
            return Ok(SubmitOutcome::Duplicate);
        }
        let pending = s
            .pending
            .get(session_id)
            .ok_or_else(|| BusError::NotAwaiting(session_id.to_string()))?;
        if pending.turn_index != turn_index {
            return Err(BusError::WrongTurn {
                given: turn_index,
                pending: pending.turn_index,
            });
        }
        if s.inbox.contains_key(session_id) {
            return Ok(SubmitOutcome::Duplicate);
        }
        s.inbox.insert(session_id.to_string(), (turn_index, text.to_string()));
        self.changed.notify_all();
        Ok(SubmitOutcome::Accepted)
    }

    /// Blocks until a submission for the pending turn arrives or `timeout` elapses.
    pub fn wait_submission(&self, session_id: &str, turn_index: usize, timeout: Duration) -> Option<String> {
        let deadline = Instant::now() + timeout;
        let mut s = self.lock();
        loop {
            if s.inbox.get(session_id).is_some_and(|(t, _)| *t == turn_index) {
                return s.inbox.remove(session_id).map(|(_, text)| text);
            }
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            s = self
                .changed
                .wait_timeout(s, deadline - now)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    /// Keeps the turn open and attaches an error for the submitter.
    pub fn reject(&self, session_id: &str, error: String) {
        let mut s = self.lock();
        if let Some(turn) = s.pending.get_mut(session_id) {
            turn.error = Some(error);
        }
        self.changed.notify_all();
    }

    /// Marks the turn answered and closes it.
    pub fn complete(&self, session_id: &str, turn_index: usize) {
        let mut s = self.lock();
        s.pending.remove(session_id);
        s.inbox.remove(session_id);
        s.answered.insert(session_id.to_string(), turn_index);
        self.changed.notify_all();
    }

    /// Closes any open turn for the session without answering it.
    pub fn close(&self, session_id: &str) {
        let mut s = self.lock();
        s.pending.remove(session_id);
        s.inbox.remove(session_id);
        self.changed.notify_all();
    }

    /// Blocks until `predicate` holds for the session's pending turn or `timeout` elapses.
    pub fn wait_until<F>(&self, session_id: &str, timeout: Duration, predicate: F) -> bool
    where
        F: Fn(Option<&PendingTurn>) -> bool,
    {
        let deadline = Instant::now() + timeout;
        let mut s = self.lock();
        loop {
            if predicate(s.pending.get(session_id)) {
                return true;
            }
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            s = self
                .changed
                .wait_timeout(s, deadline - now)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    /// Wakes every waiter, e.g. after a session ends.
    pub fn notify(&self) {
        let _guard = self.lock();
        self.changed.notify_all();
    }
}

/// Human executor whose actions arrive over a [`SessionBus`].
pub struct LiveHumanActor {
    id: String,
    session_id: String,
    bus: Arc<SessionBus>,
    timeout: Duration,
    hint_source: Option<Box<dyn Actor>>,
}

impl LiveHumanActor {
    pub fn new(id: impl Into<String>, session_id: impl Into<String>, bus: Arc<SessionBus>) -> Self {
        LiveHumanActor {
            id: id.into(),
            session_id: session_id.into(),
            bus,
            timeout: DEFAULT_TURN_TIMEOUT,
            hint_source: None,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Shows the action `source` would take as a reference for the human.
    pub fn with_hint_source(mut self, source: Box<dyn Actor>) -> Self {
        self.hint_source = Some(source);
        self
    }
}

/// Publishes a turn for `state` and waits for a parseable submission.
pub fn live_human_act(
    bus: &SessionBus,
    session_id: &str,
    state: &CollabState,
    hint: Option<String>,
    timeout: Duration,
) -> Result<TaskAction, ActorError> {
    let tag = state.query.dataset_tag;
    let turn_index = state.next_index();
    bus.publish(PendingTurn {
        session_id: session_id.to_string(),
        turn_index,
        dataset_tag: tag,
        rendering: state.canonical_text(),
        legal_actions: action_templates(tag),
        hint,
        error: None,
        opened_at: Instant::now(),
    });
    let deadline = Instant::now() + timeout;
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        let Some(text) = bus.wait_submission(session_id, turn_index, left) else {
            bus.close(session_id);
            return Err(ActorError::Timeout(timeout));
        };
        match parse_submission(&text, tag) {
            Ok(action) => {
                bus.complete(session_id, turn_index);
                return Ok(action);
            }
            Err(e) => bus.reject(session_id, e),
        }
    }
}

impl Actor for LiveHumanActor {
    fn id(&self) -> &str {
        &self.id
    }

    fn role(&self) -> CollabChoice {
        CollabChoice::Human
    }

    fn act(&mut self, state: &CollabState, rng: &mut dyn RngCore) -> Result<TaskAction, ActorError> {
        let hint = match self.hint_source.as_mut() {
            Some(src) => src.act(state, rng).ok().map(|a| a.render()),
            None => None,
        };
        live_human_act(&self.bus, &self.session_id, state, hint, self.timeout)
    }
}

#[cfg(test)]
mod tests {
    use std::thread;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::trajectory::fixtures::qa_query;
    use crate::trajectory::ActionKind;

    fn wait_for_turn(bus: &SessionBus, session: &str) -> PendingTurn {
        assert!(bus.wait_until(session, Duration::from_secs(5), |t| t.is_some()));
        bus.pending(session).unwrap()
    }

    #[test]
    fn submission_is_parsed_and_malformed_text_reprompts() {
        let bus = SessionBus::new();
        let b = Arc::clone(&bus);
        let worker = thread::spawn(move || {
            let mut actor = LiveHumanActor::new("annotator", "s1", b);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            actor.act(&CollabState::initial(qa_query()), &mut rng)
        });
        let turn = wait_for_turn(&bus, "s1");
        assert_eq!(turn.turn_index, 1);
        assert_eq!(bus.submit("s1", 1, "search for manila").unwrap(), SubmitOutcome::Accepted);
        assert!(bus.wait_until("s1", Duration::from_secs(5), |t| t.is_some_and(|t| t.error.is_some())));
        bus.submit("s1", 1, "Search[Battle of Manila]").unwrap();
        let action = worker.join().unwrap().unwrap();
        assert_eq!((action.kind, action.argument()), (ActionKind::Search, "Battle of Manila"));
        assert_eq!(bus.submit("s1", 1, "Search[again]").unwrap(), SubmitOutcome::Duplicate);
        assert!(bus.list_pending().is_empty());
    }

    #[test]
    fn timeout_aborts() {
        let bus = SessionBus::new();
        let mut actor = LiveHumanActor::new("annotator", "s1", Arc::clone(&bus)).with_timeout(Duration::from_millis(20));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = actor.act(&CollabState::initial(qa_query()), &mut rng).unwrap_err();
        assert!(matches!(err, ActorError::Timeout(_)));
        assert!(bus.pending("s1").is_none());
    }

    #[test]
    fn sessions_are_routed_by_id() {
        let bus = SessionBus::new();
        let spawn = |id: &'static str| {
            let b = Arc::clone(&bus);
            thread::spawn(move || {
                let mut actor = LiveHumanActor::new("annotator", id, b);
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                actor.act(&CollabState::initial(qa_query()), &mut rng).unwrap()
            })
        };
        let (a, b) = (spawn("a"), spawn("b"));
        wait_for_turn(&bus, "a");
        wait_for_turn(&bus, "b");
        assert_eq!(bus.list_pending().len(), 2);
        bus.submit("b", 1, "Lookup[bee]").unwrap();
        bus.submit("a", 1, "Lookup[ant]").unwrap();
        assert_eq!(a.join().unwrap().argument(), "ant");
        assert_eq!(b.join().unwrap().argument(), "bee");
        assert!(matches!(bus.submit("c", 1, "x"), Err(BusError::NotAwaiting(_))));
    }
}
