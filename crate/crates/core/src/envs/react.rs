//! ReAct-style question answering over a wiki client.
//!
//! `Search[entity]` loads a page and shows its first five sentences (or a
//! list of similar titles on a miss), `Lookup[keyword]` walks the sentences
//! of the loaded page that contain the keyword, `Finish[answer]` ends the
//! episode and is scored by token F1 against the gold answer.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{EnvError, Environment, Executor};
use crate::cassette::{Cassette, FixtureMode};
use crate::rewards::f1_score;
use crate::trajectory::{
    ActionFamily, ActionKind, CollabState, EpisodeStatus, Observation, SuccessHint, TaskAction,
};

pub const SEARCH_SENTENCES: usize = 5;
pub const WIKI_ATTEMPTS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum WikiResponse {
    Page { title: String, sentences: Vec<String> },
    NotFound { similar: Vec<String> },
}

pub trait WikiClient: Send {
    fn fetch(&mut self, entity: &str) -> Result<WikiResponse, String>;
}

/// `GET {base_url}/page?title=<entity>` returning a JSON [`WikiResponse`].
pub struct HttpWikiClient {
    base_url: String,
    agent: ureq::Agent,
}

impl HttpWikiClient {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        HttpWikiClient {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent: ureq::Agent::config_builder()
                .timeout_global(Some(timeout))
                .build()
                .into(),
        }
    }
}

impl WikiClient for HttpWikiClient {
    fn fetch(&mut self, entity: &str) -> Result<WikiResponse, String> {
        let mut resp = self
            .agent
            .get(format!("{}/page", self.base_url))
            .query("title", entity)
            .call()
            .map_err(|e| e.to_string())?;
        resp.body_mut().read_json::<WikiResponse>().map_err(|e| e.to_string())
    }
}

/// Wiki client backed by a cassette, optionally recording a live client.
pub struct RecordedWikiClient {
    inner: Option<Box<dyn WikiClient>>,
    cassette: Cassette,
    mode: FixtureMode,
}

impl RecordedWikiClient {
    pub fn replay(cassette: Cassette) -> Self {
        RecordedWikiClient {
            inner: None,
            cassette,
            mode: FixtureMode::Replay,
        }
    }

    pub fn record(inner: Box<dyn WikiClient>, cassette: Cassette) -> Self {
        RecordedWikiClient {
            inner: Some(inner),
            cassette,
            mode: FixtureMode::Record,
        }
    }
}

impl WikiClient for RecordedWikiClient {
    fn fetch(&mut self, entity: &str) -> Result<WikiResponse, String> {
        match (self.mode, self.inner.as_mut()) {
            (FixtureMode::Record, Some(inner)) => {
                let resp = inner.fetch(entity)?;
                self.cassette.record(&entity, &resp).map_err(|e| e.to_string())?;
                Ok(resp)
            }
            (FixtureMode::Off, Some(inner)) => inner.fetch(entity),
            _ => self.cassette.replay(&entity).map_err(|e| e.to_string()),
        }
    }
}

impl<T: WikiClient + ?Sized> WikiClient for Box<T> {
    fn fetch(&mut self, entity: &str) -> Result<WikiResponse, String> {
        (**self).fetch(entity)
    }
}

#[derive(Default)]
struct PageCursor {
    sentences: Vec<String>,
    keyword: Option<String>,
    next_match: usize,
}

pub struct ReactEnv<C: WikiClient> {
    client: C,
    page: Option<PageCursor>,
}

impl<C: WikiClient> ReactEnv<C> {
    pub fn new(client: C) -> Self {
        ReactEnv { client, page: None }
    }

    fn fetch_with_retry(&mut self, entity: &str) -> Result<WikiResponse, EnvError> {
        let mut last = String::new();
        for _ in 0..WIKI_ATTEMPTS {
            match self.client.fetch(entity) {
                Ok(r) => return Ok(r),
                Err(e) => last = e,
            }
        }
        Err(EnvError::Transport {
            attempts: WIKI_ATTEMPTS,
            message: last,
        })
    }

    fn search(&mut self, entity: &str) -> Result<Observation, EnvError> {
        match self.fetch_with_retry(entity)? {
            WikiResponse::Page { sentences, .. } => {
                let shown = sentences
                    .iter()
                    .take(SEARCH_SENTENCES)
                    .map(String::as_str)
                    .collect::<Vec<_>>()
                    .join(" ");
                self.page = Some(PageCursor {
                    sentences,
                    ..PageCursor::default()
                });
                Ok(Observation::new(shown, SuccessHint::Hit))
            }
            WikiResponse::NotFound { similar } => {
                self.page = None;
                Ok(Observation::new(
                    format!("Could not find {entity}. Similar: [{}].", similar.join(", ")),
                    SuccessHint::Miss,
                ))
            }
        }
    }

    fn lookup(&mut self, keyword: &str) -> Observation {
        let Some(page) = self.page.as_mut() else {
            return Observation::new("no page loaded", SuccessHint::Miss);
        };
        let needle = keyword.to_lowercase();
        if page.keyword.as_deref() != Some(needle.as_str()) {
            page.keyword = Some(needle.clone());
            page.next_match = 0;
        }
        let matches: Vec<&String> = page
            .sentences
            .iter()
            .filter(|s| s.to_lowercase().contains(&needle))
            .collect();
        if page.next_match >= matches.len() {
            return Observation::new("No more results.", SuccessHint::Miss);
        }
        let i = page.next_match;
        page.next_match += 1;
        Observation::new(
            format!("(Result {} / {}) {}", i + 1, matches.len(), matches[i]),
            SuccessHint::Hit,
        )
    }
}

impl<C: WikiClient> Environment for ReactEnv<C> {
    fn restore(&mut self, state: &CollabState) -> Result<(), EnvError> {
        if state.query.dataset_tag.family() != ActionFamily::Qa {
            return Err(EnvError::UnknownQuery(format!(
                "{} is not a QA query",
                state.query.id
            )));
        }
        self.page = None;
        let last_search = state
            .history
            .iter()
            .rposition(|s| s.action.kind == ActionKind::Search);
        if let Some(i) = last_search {
            self.search(state.history[i].action.argument())?;
            for step in &state.history[i + 1..] {
                if step.action.kind == ActionKind::Lookup {
                    self.lookup(step.action.argument());
                }
            }
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
            ActionKind::Search => self.search(action.argument()),
            ActionKind::Lookup => Ok(self.lookup(action.argument())),
            ActionKind::Finish => Ok(Observation::new(
                format!("Episode finished, answer submitted: {}.", action.argument()),
                SuccessHint::Unknown,
            )),
            _ => unreachable!("validated above"),
        }
    }

    fn task_reward(&mut self, state: &CollabState, _status: EpisodeStatus) -> Result<f64, EnvError> {
        let gold = state.query.gold.as_text().unwrap_or_default();
        Ok(match state.last_step() {
            Some(s) if s.action.kind == ActionKind::Finish => f1_score(s.action.argument(), gold),
            _ => 0.0,
        })
    }
}
