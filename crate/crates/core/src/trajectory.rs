//! Queries, steps, states and trajectories.
//!
//! A [`CollabState`] is a query plus the prefix of completed steps; it is the
//! unit every policy, return estimate and dataset index is keyed on. States
//! are identified by [`StateKey`], a SHA-256 digest of [`CollabState::canonical_text`].

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("step index {t} out of range for trajectory with {len} steps")]
    IndexOutOfRange { t: usize, len: usize },
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
}

/// Source corpus of a query; selects the action grammar, the task reward
/// and the termination rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetTag {
    Hotpotqa,
    Strategyqa,
    Intercode,
    Synthetic,
}

/// Action grammar shared by a group of datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionFamily {
    Qa,
    Code,
    Synthetic,
}

impl DatasetTag {
    pub const ALL: [DatasetTag; 4] = [
        DatasetTag::Hotpotqa,
        DatasetTag::Strategyqa,
        DatasetTag::Intercode,
        DatasetTag::Synthetic,
    ];

    /// Fixed per-dataset step threshold. Synthetic tasks carry their own budget.
    pub fn step_threshold(self) -> Option<usize> {
        match self {
            DatasetTag::Hotpotqa => Some(7),
            DatasetTag::Strategyqa => Some(5),
            DatasetTag::Intercode => Some(8),
            DatasetTag::Synthetic => None,
        }
    }

    pub fn family(self) -> ActionFamily {
        match self {
            DatasetTag::Hotpotqa | DatasetTag::Strategyqa => ActionFamily::Qa,
            DatasetTag::Intercode => ActionFamily::Code,
            DatasetTag::Synthetic => ActionFamily::Synthetic,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetTag::Hotpotqa => "hotpotqa",
            DatasetTag::Strategyqa => "strategyqa",
            DatasetTag::Intercode => "intercode",
            DatasetTag::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for DatasetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DatasetTag {
    type Err = TrajectoryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DatasetTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| TrajectoryError::InvalidQuery(format!("unknown dataset tag {s:?}")))
    }
}

/// Canonical answer payload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gold {
    /// Answer text for QA and synthetic tasks.
    Text(String),
    /// Canonicalized result rows for code tasks (a multiset).
    Rows(Vec<String>),
}

impl Gold {
    fn is_empty(&self) -> bool {
        match self {
            Gold::Text(t) => t.trim().is_empty(),
            Gold::Rows(r) => r.is_empty(),
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Gold::Text(t) => Some(t),
            Gold::Rows(_) => None,
        }
    }

    pub fn as_rows(&self) -> Option<&[String]> {
        match self {
            Gold::Rows(r) => Some(r),
            Gold::Text(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskQuery {
    pub id: String,
    pub text: String,
    pub gold: Gold,
    pub dataset_tag: DatasetTag,
    pub step_threshold: usize,
}

impl TaskQuery {
    /// Builds a query. For the three benchmark tags the step threshold is
    /// the dataset's fixed one and `step_threshold` must be `None` or agree.
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        gold: Gold,
        dataset_tag: DatasetTag,
        step_threshold: Option<usize>,
    ) -> Result<Self, TrajectoryError> {
        let threshold = match (dataset_tag.step_threshold(), step_threshold) {
            (Some(fixed), None) => fixed,
            (Some(fixed), Some(given)) if given == fixed => fixed,
            (Some(fixed), Some(given)) => {
                return Err(TrajectoryError::InvalidQuery(format!(
                    "{dataset_tag} uses step threshold {fixed}, got {given}"
                )))
            }
            (None, Some(given)) => given,
            (None, None) => {
                return Err(TrajectoryError::InvalidQuery(
                    "synthetic queries need an explicit step threshold".into(),
                ))
            }
        };
        let query = TaskQuery {
            id: id.into(),
            text: text.into(),
            gold,
            dataset_tag,
            step_threshold: threshold,
        };
        query.validate()?;
        Ok(query)
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if self.step_threshold == 0 {
            return Err(TrajectoryError::InvalidQuery("step_threshold must be >= 1".into()));
        }
        if self.gold.is_empty() {
            return Err(TrajectoryError::InvalidQuery(format!("query {} has empty gold", self.id)));
        }
        match (&self.gold, self.dataset_tag.family()) {
            (Gold::Rows(_), ActionFamily::Code) | (Gold::Text(_), ActionFamily::Qa | ActionFamily::Synthetic) => {}
            _ => {
                return Err(TrajectoryError::InvalidQuery(format!(
                    "gold payload kind does not match dataset {}",
                    self.dataset_tag
                )))
            }
        }
        Ok(())
    }
}

/// Who executes the next task action.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollabChoice {
    Agent,
    Human,
}

impl CollabChoice {
    pub const BOTH: [CollabChoice; 2] = [CollabChoice::Agent, CollabChoice::Human];

    /// `0` for the agent, `1` for the human.
    pub fn bit(self) -> u8 {
        match self {
            CollabChoice::Agent => 0,
            CollabChoice::Human => 1,
        }
    }

    pub fn other(self) -> Self {
        match self {
            CollabChoice::Agent => CollabChoice::Human,
            CollabChoice::Human => CollabChoice::Agent,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            CollabChoice::Agent => "Agent",
            CollabChoice::Human => "Human",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Search,
    Lookup,
    Finish,
    SqlCommand,
    Submit,
    Hop,
}

impl ActionKind {
    pub fn legal_for(self, tag: DatasetTag) -> bool {
        use ActionKind::*;
        match tag.family() {
            ActionFamily::Qa => matches!(self, Search | Lookup | Finish),
            ActionFamily::Code => matches!(self, SqlCommand | Submit),
            ActionFamily::Synthetic => matches!(self, Hop | Finish),
        }
    }

    pub fn legal_kinds(tag: DatasetTag) -> &'static [ActionKind] {
        use ActionKind::*;
        match tag.family() {
            ActionFamily::Qa => &[Search, Lookup, Finish],
            ActionFamily::Code => &[SqlCommand, Submit],
            ActionFamily::Synthetic => &[Hop, Finish],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActionKind::Search => "Search",
            ActionKind::Lookup => "Lookup",
            ActionKind::Finish => "Finish",
            ActionKind::SqlCommand => "SqlCommand",
            ActionKind::Submit => "Submit",
            ActionKind::Hop => "Hop",
        }
    }

    /// Whether executing this action ends the episode.
    pub fn is_terminal(self) -> bool {
        matches!(self, ActionKind::Finish | ActionKind::Submit)
    }
}

const THOUGHT_PREFIX: &str = "Thought: ";

/// A task action. The optional ReAct thought lives in the payload as a
/// leading `Thought: ...` line; the argument is everything after it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskAction {
    pub kind: ActionKind,
    pub payload: String,
}

impl TaskAction {
    pub fn new(kind: ActionKind, argument: impl Into<String>) -> Result<Self, TrajectoryError> {
        let action = TaskAction {
            kind,
            payload: argument.into(),
        };
        action.check_payload()?;
        Ok(action)
    }

    pub fn with_thought(
        kind: ActionKind,
        thought: &str,
        argument: &str,
    ) -> Result<Self, TrajectoryError> {
        let thought = thought.trim();
        if thought.is_empty() {
            return Self::new(kind, argument);
        }
        if thought.contains('\n') {
            return Err(TrajectoryError::InvalidAction("thought must be a single line".into()));
        }
        let action = TaskAction {
            kind,
            payload: format!("{THOUGHT_PREFIX}{thought}\n{argument}"),
        };
        action.check_payload()?;
        Ok(action)
    }

    fn check_payload(&self) -> Result<(), TrajectoryError> {
        if self.kind.is_terminal() && self.argument().trim().is_empty() {
            return Err(TrajectoryError::InvalidAction(format!(
                "{} needs a non-empty payload",
                self.kind.name()
            )));
        }
        Ok(())
    }

    pub fn thought(&self) -> Option<&str> {
        let rest = self.payload.strip_prefix(THOUGHT_PREFIX)?;
        Some(rest.split_once('\n').map_or(rest, |(t, _)| t))
    }

    pub fn argument(&self) -> &str {
        match self.payload.strip_prefix(THOUGHT_PREFIX) {
            Some(rest) => rest.split_once('\n').map_or("", |(_, a)| a),
            None => &self.payload,
        }
    }

    pub fn validate_for(&self, tag: DatasetTag) -> Result<(), TrajectoryError> {
        if !self.kind.legal_for(tag) {
            return Err(TrajectoryError::InvalidAction(format!(
                "{} is not legal for {tag}",
                self.kind.name()
            )));
        }
        self.check_payload()
    }

    /// Action line as it appears in rendered trajectories.
    pub fn render(&self) -> String {
        match self.kind {
            ActionKind::SqlCommand => self.argument().to_string(),
            ActionKind::Submit => "submit".to_string(),
            kind => format!("{}[{}]", kind.name(), self.argument()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuccessHint {
    Hit,
    Miss,
    #[default]
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub text: String,
    #[serde(default)]
    pub success_hint: SuccessHint,
}

impl Observation {
    pub fn new(text: impl Into<String>, success_hint: SuccessHint) -> Self {
        Observation {
            text: text.into(),
            success_hint,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// 1-based position in the trajectory.
    pub index: usize,
    pub collab: CollabChoice,
    pub action: TaskAction,
    pub observation: Observation,
    pub executor_id: String,
    /// Probability the behavior policy gave `collab` when this step was recorded.
    pub behavior_prob: f64,
}

/// Number of human-executed steps.
pub fn intervention_count(steps: &[Step]) -> usize {
    steps.iter().filter(|s| s.collab == CollabChoice::Human).count()
}

/// Hex SHA-256 of a state's canonical text.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateKey(String);

impl StateKey {
    pub fn from_text(text: &str) -> Self {
        StateKey(hex::encode(Sha256::digest(text.as_bytes())))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0[..12.min(self.0.len())])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollabState {
    pub query: Arc<TaskQuery>,
    pub history: Vec<Step>,
}

impl CollabState {
    pub fn initial(query: Arc<TaskQuery>) -> Self {
        CollabState {
            query,
            history: Vec::new(),
        }
    }

    /// 1-based index of the next step to be taken.
    pub fn next_index(&self) -> usize {
        self.history.len() + 1
    }

    pub fn remaining_budget(&self) -> usize {
        self.query.step_threshold.saturating_sub(self.history.len())
    }

    pub fn last_step(&self) -> Option<&Step> {
        self.history.last()
    }

    /// Deterministic rendering: query text, then one block per step.
    /// Executor identity is not part of the rendering.
    pub fn canonical_text(&self) -> String {
        render_steps(&self.query, &self.history)
    }

    pub fn key(&self) -> StateKey {
        StateKey::from_text(&self.canonical_text())
    }

    pub fn push(&mut self, step: Step) {
        self.history.push(step);
    }
}

pub fn canonical_text(state: &CollabState) -> String {
    state.canonical_text()
}

pub fn state_key(state: &CollabState) -> StateKey {
    state.key()
}

pub(crate) fn render_steps(query: &TaskQuery, steps: &[Step]) -> String {
    let family = query.dataset_tag.family();
    let mut out = format!("Question: {}\n", query.text);
    for step in steps {
        out.push_str(&format!("Step {} [{}]\n", step.index, step.collab.label()));
        match family {
            ActionFamily::Qa => {
                out.push_str(&format!("Thought: {}\n", step.action.thought().unwrap_or("")));
            }
            ActionFamily::Synthetic => {
                if let Some(thought) = step.action.thought() {
                    out.push_str(&format!("Thought: {thought}\n"));
                }
            }
            ActionFamily::Code => {}
        }
        out.push_str(&format!("Action: {}\n", step.action.render()));
        out.push_str(&format!("Observation: {}\n", step.observation.text));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    FinishedByAction,
    SolvedByEnv,
    BudgetExhausted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub query: Arc<TaskQuery>,
    pub steps: Vec<Step>,
    pub status: EpisodeStatus,
    pub task_reward: f64,
    pub intervention_count: usize,
    pub reward: f64,
    /// 1-based index of the first step sampled by this rollout. Earlier steps
    /// replay the prefix of the trajectory it was forked from.
    #[serde(default = "first_step")]
    pub branch_step: usize,
}

fn first_step() -> usize {
    1
}

impl Trajectory {
    /// Scores a finished episode under penalty `lambda`.
    pub fn scored(
        query: Arc<TaskQuery>,
        steps: Vec<Step>,
        status: EpisodeStatus,
        task_reward: f64,
        lambda: f64,
    ) -> Result<Self, TrajectoryError> {
        let c = intervention_count(&steps);
        let traj = Trajectory {
            query,
            steps,
            status,
            task_reward,
            intervention_count: c,
            reward: task_reward - lambda * c as f64,
            branch_step: 1,
        };
        traj.validate(lambda)?;
        Ok(traj)
    }

    /// Marks the steps before `t` as a replayed prefix.
    pub fn with_branch_step(mut self, t: usize) -> Result<Self, TrajectoryError> {
        if t == 0 || t > self.steps.len().max(1) {
            return Err(TrajectoryError::IndexOutOfRange { t, len: self.steps.len() });
        }
        self.branch_step = t;
        Ok(self)
    }

    /// Same episode scored under another penalty.
    pub fn rescored(&self, lambda: f64) -> Self {
        Trajectory {
            reward: self.task_reward - lambda * self.intervention_count as f64,
            ..self.clone()
        }
    }

    pub fn validate(&self, lambda: f64) -> Result<(), TrajectoryError> {
        let bad = |msg: String| Err(TrajectoryError::InvalidTrajectory(msg));
        if self.steps.len() > self.query.step_threshold {
            return bad(format!(
                "{} steps exceed threshold {}",
                self.steps.len(),
                self.query.step_threshold
            ));
        }
        if !(0.0..=1.0).contains(&self.task_reward) {
            return bad(format!("task reward {} outside [0,1]", self.task_reward));
        }
        for (i, step) in self.steps.iter().enumerate() {
            if step.index != i + 1 {
                return bad(format!("step {} carries index {}", i + 1, step.index));
            }
            if !(step.behavior_prob > 0.0 && step.behavior_prob <= 1.0) {
                return bad(format!("step {} behavior_prob {} outside (0,1]", step.index, step.behavior_prob));
            }
            if let Err(e) = step.action.validate_for(self.query.dataset_tag) {
                return bad(format!("step {}: {e}", step.index));
            }
        }
        if self.intervention_count != intervention_count(&self.steps) {
            return bad(format!(
                "intervention_count {} does not match {} human steps",
                self.intervention_count,
                intervention_count(&self.steps)
            ));
        }
        if self.branch_step == 0 || self.branch_step > self.steps.len().max(1) {
            return bad(format!("branch step {} outside the trajectory", self.branch_step));
        }
        let expected = self.task_reward - lambda * self.intervention_count as f64;
        if (self.reward - expected).abs() > 1e-12 {
            return bad(format!("reward {} != T - lambda*C = {expected}", self.reward));
        }
        Ok(())
    }

    /// State before step `t` (1-based): the query plus the first `t - 1` steps.
    pub fn state_at(&self, t: usize) -> Result<CollabState, TrajectoryError> {
        if t == 0 || t > self.steps.len() + 1 {
            return Err(TrajectoryError::IndexOutOfRange {
                t,
                len: self.steps.len(),
            });
        }
        Ok(CollabState {
            query: Arc::clone(&self.query),
            history: self.steps[..t - 1].to_vec(),
        })
    }

    /// Rendering of the whole episode; two trajectories with equal text made
    /// the same choices, actions and observations.
    pub fn canonical_text(&self) -> String {
        render_steps(&self.query, &self.steps)
    }

    pub fn human_steps(&self) -> usize {
        self.intervention_count
    }

    pub fn agent_steps(&self) -> usize {
        self.steps.len() - self.intervention_count
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn qa_query() -> Arc<TaskQuery> {
        Arc::new(
            TaskQuery::new(
                "q1",
                "Which battle came first?",
                Gold::Text("Seven Days Battles".into()),
                DatasetTag::Hotpotqa,
                None,
            )
            .unwrap(),
        )
    }

    pub fn step(index: usize, collab: CollabChoice, arg: &str, obs: &str) -> Step {
        Step {
            index,
            collab,
            action: TaskAction::with_thought(ActionKind::Search, "look it up", arg).unwrap(),
            observation: Observation::new(obs, SuccessHint::Unknown),
            executor_id: format!("{}-1", collab.label().to_lowercase()),
            behavior_prob: 0.5,
        }
    }

    pub fn three_step() -> Trajectory {
        let steps = vec![
            step(1, CollabChoice::Agent, "Battle of Manila", "page a"),
            step(2, CollabChoice::Human, "Seven Days Battles", "page b"),
            step(3, CollabChoice::Agent, "Glendale", "page c"),
        ];
        Trajectory::scored(qa_query(), steps, EpisodeStatus::BudgetExhausted, 0.5, 0.1).unwrap()
    }
}
