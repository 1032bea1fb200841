//! Executors that produce task actions once the allocation policy has
//! picked a side: scripted relay solvers, chat-model actors, and a bridge to
//! a live person.

pub mod chat;
pub mod live;
pub mod parse;

use std::sync::LazyLock;
use std::time::Duration;

use rand::RngCore;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::synthetic::DECOY_ANSWER;
use crate::trajectory::{ActionFamily, ActionKind, CollabChoice, CollabState, SuccessHint, TaskAction};

pub use chat::{
    chat_act, render_prompt, ChatActor, ChatClient, ChatExchange, ChatMessage, ChatRequest, OpenAiChatClient,
    PromptRole, RecordedChatClient,
};
pub use live::{live_human_act, LiveHumanActor, PendingTurn, SessionBus, SubmitOutcome};
pub use parse::{parse_action, parse_submission};

#[derive(Debug, Error)]
pub enum ActorError {
    #[error("chat transport failure: {0}")]
    Transport(String),
    #[error("unparseable completion after re-ask ({detail}): {completion:?}")]
    Unparseable { detail: String, completion: String },
    #[error("no human action within {0:?}")]
    Timeout(Duration),
    #[error("actor cannot handle this task: {0}")]
    Unsupported(String),
}

pub trait Actor: Send {
    fn id(&self) -> &str;

    /// Which side of the allocation this actor executes for.
    fn role(&self) -> CollabChoice;

    /// Hop success probability this actor brings to relay tasks, if it
    /// overrides the task's table.
    fn success_override(&self) -> Option<f64> {
        None
    }

    fn act(&mut self, state: &CollabState, rng: &mut dyn RngCore) -> Result<TaskAction, ActorError>;
}

impl<T: Actor + ?Sized> Actor for Box<T> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn role(&self) -> CollabChoice {
        (**self).role()
    }

    fn success_override(&self) -> Option<f64> {
        (**self).success_override()
    }

    fn act(&mut self, state: &CollabState, rng: &mut dyn RngCore) -> Result<TaskAction, ActorError> {
        (**self).act(state, rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorKind {
    ScriptedAgent,
    ScriptedHuman,
    ChatAgent,
    ChatSimulatedHuman,
    LiveHuman,
}

/// Configuration of one executor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorProfile {
    pub kind: ActorKind,
    /// Scripted actors: hop success probability overriding the task table.
    #[serde(default)]
    pub success_prob: Option<f64>,
    /// Chat actors: base URL of the completions endpoint (defaults to the environment).
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    /// Live humans: session routing id.
    #[serde(default)]
    pub session: Option<String>,
}

impl ActorProfile {
    pub fn scripted(role: CollabChoice) -> Self {
        ActorProfile {
            kind: match role {
                CollabChoice::Agent => ActorKind::ScriptedAgent,
                CollabChoice::Human => ActorKind::ScriptedHuman,
            },
            success_prob: None,
            endpoint: None,
            model: None,
            temperature: 0.0,
            session: None,
        }
    }

    pub fn role(&self) -> CollabChoice {
        match self.kind {
            ActorKind::ScriptedAgent | ActorKind::ChatAgent => CollabChoice::Agent,
            _ => CollabChoice::Human,
        }
    }

    /// Builds scripted and chat actors. Live humans need a bus; see [`LiveHumanActor`].
    pub fn build(&self, id: impl Into<String>) -> Result<Box<dyn Actor>, ActorError> {
        let id = id.into();
        match self.kind {
            ActorKind::ScriptedAgent | ActorKind::ScriptedHuman => {
                if let Some(p) = self.success_prob {
                    if !(p > 0.0 && p <= 1.0) {
                        return Err(ActorError::Unsupported(format!("success probability {p} outside (0,1]")));
                    }
                }
                Ok(Box::new(ScriptedActor::new(id, self.role()).with_success_prob(self.success_prob)))
            }
            ActorKind::ChatAgent | ActorKind::ChatSimulatedHuman => {
                let client: Box<dyn ChatClient> = match &self.endpoint {
                    Some(url) => Box::new(OpenAiChatClient::new(
                        url.clone(),
                        std::env::var(chat::API_KEY_VAR).ok(),
                        Duration::from_secs(60),
                    )),
                    None => Box::new(OpenAiChatClient::from_env()),
                };
                let model = self.model.clone().unwrap_or_else(|| "gpt-4".into());
                let actor = if self.kind == ActorKind::ChatAgent {
                    ChatActor::agent(id, model, client)
                } else {
                    ChatActor::simulated_human(id, model, client)
                };
                Ok(Box::new(actor.with_temperature(self.temperature)))
            }
            ActorKind::LiveHuman => Err(ActorError::Unsupported(
                "live humans are attached through a session bus".into(),
            )),
        }
    }
}

static START_KEY: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"from key (\S+) to").expect("valid regex"));
static LINK: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(\S+) links to (\S+)\.$").expect("valid regex"));
static VALUE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(\S+) holds the value (.+)\.$").expect("valid regex"));

/// What a relay-chain state reveals: the key to hop from next, or the value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RelayProgress {
    AtKey(String),
    Resolved(String),
}

/// Reads chain progress from the rendered query and observations only.
pub fn relay_progress(state: &CollabState) -> Option<RelayProgress> {
    let mut progress = RelayProgress::AtKey(START_KEY.captures(&state.query.text)?[1].to_string());
    for step in &state.history {
        if step.action.kind != ActionKind::Hop || step.observation.success_hint != SuccessHint::Hit {
            continue;
        }
        let text = step.observation.text.trim();
        if let Some(c) = VALUE.captures(text) {
            progress = RelayProgress::Resolved(c[2].to_string());
        } else if let Some(c) = LINK.captures(text) {
            progress = RelayProgress::AtKey(c[2].to_string());
        }
    }
    Some(progress)
}

/// Relay-chain solver: hops until the value is revealed, then finishes with
/// it. Scripted agent and human differ only in hop success probability.
#[derive(Clone, Debug)]
pub struct ScriptedActor {
    id: String,
    role: CollabChoice,
    success_prob: Option<f64>,
}

impl ScriptedActor {
    pub fn new(id: impl Into<String>, role: CollabChoice) -> Self {
        ScriptedActor {
            id: id.into(),
            role,
            success_prob: None,
        }
    }

    pub fn with_success_prob(mut self, p: Option<f64>) -> Self {
        self.success_prob = p;
        self
    }
}

/// The scripted policy: Finish[value] once resolved, otherwise Hop on the
/// current key; with no budget left on an unresolved chain, Finish[decoy].
pub fn scripted_act(state: &CollabState) -> Result<TaskAction, ActorError> {
    if state.query.dataset_tag.family() != ActionFamily::Synthetic {
        return Err(ActorError::Unsupported(format!(
            "scripted actors only solve relay tasks, not {}",
            state.query.dataset_tag
        )));
    }
    let progress = relay_progress(state)
        .ok_or_else(|| ActorError::Unsupported("query does not name a start key".into()))?;
    let action = match progress {
        RelayProgress::Resolved(value) => TaskAction::new(ActionKind::Finish, value),
        RelayProgress::AtKey(_) if state.remaining_budget() == 0 => TaskAction::new(ActionKind::Finish, DECOY_ANSWER),
        RelayProgress::AtKey(key) => TaskAction::new(ActionKind::Hop, key),
    };
    action.map_err(|e| ActorError::Unsupported(e.to_string()))
}

impl Actor for ScriptedActor {
    fn id(&self) -> &str {
        &self.id
    }

    fn role(&self) -> CollabChoice {
        self.role
    }

    fn success_override(&self) -> Option<f64> {
        self.success_prob
    }

    fn act(&mut self, state: &CollabState, _rng: &mut dyn RngCore) -> Result<TaskAction, ActorError> {
        scripted_act(state)
    }
}

/// One executor per side of the allocation.
pub struct ActorPair {
    pub agent: Box<dyn Actor>,
    pub human: Box<dyn Actor>,
}

impl ActorPair {
    pub fn new(agent: Box<dyn Actor>, human: Box<dyn Actor>) -> Self {
        ActorPair { agent, human }
    }

    /// Scripted agent and human using the task's success table.
    pub fn scripted() -> Self {
        ActorPair {
            agent: Box::new(ScriptedActor::new("scripted-agent", CollabChoice::Agent)),
            human: Box::new(ScriptedActor::new("scripted-human", CollabChoice::Human)),
        }
    }

    pub fn get_mut(&mut self, choice: CollabChoice) -> &mut dyn Actor {
        match choice {
            CollabChoice::Agent => self.agent.as_mut(),
            CollabChoice::Human => self.human.as_mut(),
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::envs::{synth_generate, Difficulty, Executor, SuccessTable};
    use crate::trajectory::Step;

    fn run_hop(task: &crate::envs::SyntheticRelayTask, state: &mut CollabState, rng: &mut ChaCha8Rng) {
        let action = scripted_act(state).unwrap();
        let exec = Executor {
            role: CollabChoice::Agent,
            id: "a",
            success_override: None,
        };
        let obs = task.apply(state, &action, &exec, rng).unwrap();
        state.push(Step {
            index: state.next_index(),
            collab: CollabChoice::Agent,
            action,
            observation: obs,
            executor_id: "a".into(),
            behavior_prob: 1.0,
        });
    }

    #[test]
    fn hops_then_finishes_with_revealed_value() {
        let (q, task) = synth_generate(2, &[Difficulty::Easy; 2], SuccessTable::uniform(1.0, 1.0), 4, 3).unwrap();
        let mut state = CollabState::initial(Arc::new(q));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let first = scripted_act(&state).unwrap();
        assert_eq!((first.kind, first.argument()), (ActionKind::Hop, task.keys[0].as_str()));
        run_hop(&task, &mut state, &mut rng);
        assert_eq!(scripted_act(&state).unwrap().argument(), task.keys[1]);
        run_hop(&task, &mut state, &mut rng);
        let finish = scripted_act(&state).unwrap();
        assert_eq!((finish.kind, finish.argument()), (ActionKind::Finish, task.answer.as_str()));
    }

    #[test]
    fn decoy_only_without_budget() {
        let (q, task) = synth_generate(2, &[Difficulty::Easy; 2], SuccessTable::uniform(0.0, 0.0), 2, 3).unwrap();
        let mut state = CollabState::initial(Arc::new(q));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        run_hop(&task, &mut state, &mut rng);
        assert_eq!(scripted_act(&state).unwrap().kind, ActionKind::Hop);
        run_hop(&task, &mut state, &mut rng);
        let forced = scripted_act(&state).unwrap();
        assert_eq!((forced.kind, forced.argument()), (ActionKind::Finish, DECOY_ANSWER));
    }

    #[test]
    fn profiles_validate_probabilities() {
        let mut p = ActorProfile::scripted(CollabChoice::Human);
        p.success_prob = Some(0.0);
        assert!(p.build("h").is_err());
        p.success_prob = Some(0.9);
        let actor = p.build("h").unwrap();
        assert_eq!(actor.success_override(), Some(0.9));
        assert_eq!(actor.role(), CollabChoice::Human);
    }
}
