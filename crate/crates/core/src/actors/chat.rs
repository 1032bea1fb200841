//! Chat-model executors over an OpenAI-compatible completions endpoint.

use std::time::{Duration, Instant};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::parse::parse_action;
use super::{Actor, ActorError};
use crate::cassette::{Cassette, FixtureMode};
use crate::trajectory::{ActionFamily, CollabChoice, CollabState, TaskAction};

pub const BASE_URL_VAR: &str = "HANDOFF_CHAT_BASE_URL";
pub const API_KEY_VAR: &str = "HANDOFF_CHAT_API_KEY";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
}

pub trait ChatClient: Send {
    fn complete(&mut self, request: &ChatRequest) -> Result<String, String>;
}

impl<T: ChatClient + ?Sized> ChatClient for Box<T> {
    fn complete(&mut self, request: &ChatRequest) -> Result<String, String> {
        (**self).complete(request)
    }
}

pub struct OpenAiChatClient {
    base_url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl OpenAiChatClient {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        OpenAiChatClient {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            agent: ureq::Agent::config_builder()
                .timeout_global(Some(timeout))
                .build()
                .into(),
        }
    }

    /// Reads the base URL and key from `HANDOFF_CHAT_BASE_URL` / `HANDOFF_CHAT_API_KEY`.
    pub fn from_env() -> Self {
        let base = std::env::var(BASE_URL_VAR).unwrap_or_else(|_| DEFAULT_BASE_URL.to_string());
        Self::new(base, std::env::var(API_KEY_VAR).ok(), Duration::from_secs(60))
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: ChatMessage,
}

impl ChatClient for OpenAiChatClient {
    fn complete(&mut self, request: &ChatRequest) -> Result<String, String> {
        let mut req = self.agent.post(format!("{}/chat/completions", self.base_url));
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(request).map_err(|e| e.to_string())?;
        let body: CompletionResponse = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        body.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| "completion had no choices".to_string())
    }
}

/// Chat client backed by a cassette, optionally recording a live client.
pub struct RecordedChatClient {
    inner: Option<Box<dyn ChatClient>>,
    cassette: Cassette,
    mode: FixtureMode,
}

impl RecordedChatClient {
    pub fn replay(cassette: Cassette) -> Self {
        RecordedChatClient {
            inner: None,
            cassette,
            mode: FixtureMode::Replay,
        }
    }

    pub fn record(inner: Box<dyn ChatClient>, cassette: Cassette) -> Self {
        RecordedChatClient {
            inner: Some(inner),
            cassette,
            mode: FixtureMode::Record,
        }
    }
}

impl ChatClient for RecordedChatClient {
    fn complete(&mut self, request: &ChatRequest) -> Result<String, String> {
        match (self.mode, self.inner.as_mut()) {
            (FixtureMode::Record, Some(inner)) => {
                let out = inner.complete(request)?;
                self.cassette.record(request, &out).map_err(|e| e.to_string())?;
                Ok(out)
            }
            (FixtureMode::Off, Some(inner)) => inner.complete(request),
            _ => self.cassette.replay(request).map_err(|e| e.to_string()),
        }
    }
}

/// One model call made while choosing an action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub prompt: String,
    pub completion: String,
    /// `None` when the completion could not be parsed.
    pub action: Option<TaskAction>,
    pub latency_ms: u64,
}

/// Which role the model plays; only the system header differs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    Agent,
    SimulatedHuman,
}

impl PromptRole {
    pub fn header(self) -> &'static str {
        match self {
            PromptRole::Agent => "You are an AI agent solving the task below one step at a time.",
            PromptRole::SimulatedHuman => {
                "You are a human expert working alongside an AI agent. You have taken over the next step of the task below."
            }
        }
    }
}

fn instructions(family: ActionFamily) -> &'static str {
    match family {
        ActionFamily::Qa => {
            "Reply with one Thought line followed by one Action line. Actions: Search[entity] shows the first \
             sentences of the entity's Wikipedia page, Lookup[keyword] shows the next sentence containing the \
             keyword on the current page, Finish[answer] submits the final answer."
        }
        ActionFamily::Code => {
            "Reply with one SQL statement inside a ```sql fenced block, or reply `submit` when the last result \
             answers the question."
        }
        ActionFamily::Synthetic => {
            "Reply with one Action line. Actions: Hop[key] follows the link from the current key, \
             Finish[answer] submits the value at the end of the chain."
        }
    }
}

/// Messages for one decision. `exemplars` fill the few-shot slots.
pub fn render_prompt(role: PromptRole, state: &CollabState, exemplars: &[String]) -> Vec<ChatMessage> {
    let mut user = String::from(instructions(state.query.dataset_tag.family()));
    user.push_str("\n\n");
    for (i, ex) in exemplars.iter().enumerate() {
        user.push_str(&format!("Example {}:\n{}\n\n", i + 1, ex.trim_end()));
    }
    user.push_str(&state.canonical_text());
    user.push_str(&format!("Step {}\n", state.next_index()));
    vec![ChatMessage::system(role.header()), ChatMessage::user(user)]
}

const REASK: &str = "Your reply did not contain a valid action. Reply again using exactly the format described above.";

fn flatten(messages: &[ChatMessage]) -> String {
    messages
        .iter()
        .map(|m| format!("[{}]\n{}", m.role, m.content))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Asks the model for an action, re-asking once on a parse failure.
pub fn chat_act(
    client: &mut dyn ChatClient,
    model: &str,
    temperature: f64,
    role: PromptRole,
    state: &CollabState,
    exemplars: &[String],
) -> Result<(TaskAction, Vec<ChatExchange>), ActorError> {
    let tag = state.query.dataset_tag;
    let mut messages = render_prompt(role, state, exemplars);
    let mut exchanges = Vec::new();
    let mut last_error = String::new();
    for attempt in 0..2 {
        if attempt == 1 {
            messages.push(ChatMessage::user(REASK));
        }
        let request = ChatRequest {
            model: model.to_string(),
            temperature,
            messages: messages.clone(),
        };
        let started = Instant::now();
        let completion = client.complete(&request).map_err(ActorError::Transport)?;
        let parsed = parse_action(&completion, tag);
        exchanges.push(ChatExchange {
            prompt: flatten(&messages),
            completion: completion.clone(),
            action: parsed.as_ref().ok().cloned(),
            latency_ms: started.elapsed().as_millis() as u64,
        });
        match parsed {
            Ok(action) => return Ok((action, exchanges)),
            Err(e) => {
                last_error = e;
                messages.push(ChatMessage::assistant(completion));
            }
        }
    }
    Err(ActorError::Unparseable {
        detail: last_error,
        completion: exchanges.last().map(|e| e.completion.clone()).unwrap_or_default(),
    })
}

/// Executor backed by a chat model, as agent or as simulated human.
pub struct ChatActor {
    id: String,
    role: CollabChoice,
    prompt_role: PromptRole,
    model: String,
    temperature: f64,
    exemplars: Vec<String>,
    client: Box<dyn ChatClient>,
    exchanges: Vec<ChatExchange>,
}

impl ChatActor {
    pub fn agent(id: impl Into<String>, model: impl Into<String>, client: Box<dyn ChatClient>) -> Self {
        Self::build(id, CollabChoice::Agent, PromptRole::Agent, model, client)
    }

    pub fn simulated_human(id: impl Into<String>, model: impl Into<String>, client: Box<dyn ChatClient>) -> Self {
        Self::build(id, CollabChoice::Human, PromptRole::SimulatedHuman, model, client)
    }

    fn build(
        id: impl Into<String>,
        role: CollabChoice,
        prompt_role: PromptRole,
        model: impl Into<String>,
        client: Box<dyn ChatClient>,
    ) -> Self {
        ChatActor {
            id: id.into(),
            role,
            prompt_role,
            model: model.into(),
            temperature: 0.0,
            exemplars: Vec::new(),
            client,
            exchanges: Vec::new(),
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_exemplars(mut self, exemplars: Vec<String>) -> Self {
        self.exemplars = exemplars;
        self
    }

    /// Every exchange made so far, in order.
    pub fn exchanges(&self) -> &[ChatExchange] {
        &self.exchanges
    }
}

impl Actor for ChatActor {
    fn id(&self) -> &str {
        &self.id
    }

    fn role(&self) -> CollabChoice {
        self.role
    }

    fn act(&mut self, state: &CollabState, _rng: &mut dyn RngCore) -> Result<TaskAction, ActorError> {
        let result = chat_act(
            self.client.as_mut(),
            &self.model,
            self.temperature,
            self.prompt_role,
            state,
            &self.exemplars,
        );
        match result {
            Ok((action, exchanges)) => {
                self.exchanges.extend(exchanges);
                Ok(action)
            }
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::VecDeque;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::trajectory::fixtures::qa_query;
    use crate::trajectory::ActionKind;

    struct Canned(VecDeque<String>, Vec<ChatRequest>);

    impl ChatClient for Canned {
        fn complete(&mut self, request: &ChatRequest) -> Result<String, String> {
            self.1.push(request.clone());
            self.0.pop_front().ok_or_else(|| "no more replies".to_string())
        }
    }

    fn canned(replies: &[&str]) -> Canned {
        Canned(replies.iter().map(|s| s.to_string()).collect(), Vec::new())
    }

    #[test]
    fn parses_finish() {
        let state = CollabState::initial(qa_query());
        let mut client = canned(&["Thought: done.\nAction: Finish[Paris]"]);
        let (action, ex) = chat_act(&mut client, "m", 0.0, PromptRole::Agent, &state, &[]).unwrap();
        assert_eq!((action.kind, action.argument()), (ActionKind::Finish, "Paris"));
        assert_eq!(ex.len(), 1);
    }

    #[test]
    fn reasks_once_then_fails() {
        let state = CollabState::initial(qa_query());
        let mut client = canned(&["I think the answer is Paris.", "Still no action."]);
        let err = chat_act(&mut client, "m", 0.0, PromptRole::Agent, &state, &[]).unwrap_err();
        assert!(matches!(err, ActorError::Unparseable { .. }));
        assert_eq!(client.1.len(), 2);
        assert_eq!(client.1[1].messages.last().unwrap().content, REASK);

        let mut client = canned(&["no action", "Action: Search[Paris]"]);
        let (action, ex) = chat_act(&mut client, "m", 0.0, PromptRole::Agent, &state, &[]).unwrap();
        assert_eq!(action.kind, ActionKind::Search);
        assert_eq!(ex.len(), 2);
        assert!(ex[0].action.is_none());
    }

    #[test]
    fn roles_differ_only_in_header() {
        let state = CollabState::initial(qa_query());
        let a = render_prompt(PromptRole::Agent, &state, &["ex".into()]);
        let h = render_prompt(PromptRole::SimulatedHuman, &state, &["ex".into()]);
        assert_ne!(a[0], h[0]);
        assert_eq!(a[1..], h[1..]);
    }

    #[test]
    fn simulated_human_never_falls_back() {
        let mut actor = ChatActor::simulated_human("gpt", "m", Box::new(canned(&["?", "?"])));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let state = CollabState::initial(qa_query());
        assert!(actor.act(&state, &mut rng).is_err());
        assert_eq!(actor.role(), CollabChoice::Human);
    }

    #[test]
    fn cassette_replay_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chat.jsonl");
        let state = CollabState::initial(qa_query());
        let recorded = {
            let live = Box::new(canned(&["Thought: t\nAction: Lookup[capital]"]));
            let mut rec = RecordedChatClient::record(live, Cassette::open_for_recording(&path).unwrap());
            chat_act(&mut rec, "m", 0.0, PromptRole::Agent, &state, &[]).unwrap().0
        };
        let mut replay = RecordedChatClient::replay(Cassette::open(&path).unwrap());
        let replayed = chat_act(&mut replay, "m", 0.0, PromptRole::Agent, &state, &[]).unwrap().0;
        assert_eq!(recorded, replayed);
    }
}
