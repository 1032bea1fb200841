//! Trajectory collection: rollouts, uniform collection, branch completion,
//! dedup, and the JSONL dataset format.
//!
//! Dataset files start with a header line
//! `{"schema_version", "provenance", "feature_layout_version", "lambda", "queries"}`
//! followed by one [`TrajectoryRecord`] per line.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actors::{ActorError, ActorPair};
use crate::choice::{Bernoulli, ChoiceError, ChoiceSource, Decision};
use crate::envs::{EnvError, Environment, Executor};
use crate::policy::FEATURE_LAYOUT_VERSION;
use crate::seed::mix_seed;
use crate::trajectory::{
    CollabChoice, CollabState, EpisodeStatus, StateKey, Step, TaskQuery, Trajectory, TrajectoryError,
};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

const CHOICE_STREAM: u64 = 0x00C4_01CE_5EED_0001;
const FORK_STREAM: u64 = 0x00F0_4B5E_ED00_0002;

#[derive(Debug, Error)]
pub enum CollectError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("actor failed at step {step}: {source}")]
    Actor {
        step: usize,
        #[source]
        source: ActorError,
    },
    #[error(transparent)]
    Choice(#[from] ChoiceError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("invalid collection config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("unsupported dataset schema version {found} (expected {DATASET_SCHEMA_VERSION})")]
    UnsupportedVersion { found: u32 },
}

/// Who supplied the human steps. Simulated collections drop duplicate paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    RealHuman,
    SimulatedHuman,
    /// Scripted relay-chain executors; duplicates are kept so returns stay unbiased.
    Synthetic,
}

impl Provenance {
    pub fn keeps_duplicates(self) -> bool {
        self != Provenance::SimulatedHuman
    }

    pub fn label(self) -> &'static str {
        match self {
            Provenance::RealHuman => "real",
            Provenance::SimulatedHuman => "simulated",
            Provenance::Synthetic => "synthetic",
        }
    }
}

impl std::str::FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "real_human" => Ok(Provenance::RealHuman),
            "simulated_human" => Ok(Provenance::SimulatedHuman),
            "synthetic" => Ok(Provenance::Synthetic),
            other => Err(format!("unknown provenance {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectConfig {
    /// Probability of routing a step to the human.
    pub behavior: f64,
    pub per_query_budget: usize,
    pub allow_duplicates: bool,
    pub seed: u64,
    pub lambda: f64,
    pub provenance: Provenance,
    /// Cap on forked rollouts per query during branch completion.
    pub max_forks_per_query: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            behavior: 0.5,
            per_query_budget: 14,
            allow_duplicates: true,
            seed: 0,
            lambda: 0.08,
            provenance: Provenance::Synthetic,
            max_forks_per_query: 256,
        }
    }
}

impl CollectConfig {
    pub fn validate(&self) -> Result<(), CollectError> {
        if !(self.behavior > 0.0 && self.behavior < 1.0) {
            return Err(CollectError::Config(format!("behavior {} outside (0,1)", self.behavior)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(CollectError::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.per_query_budget == 0 {
            return Err(CollectError::Config("per_query_budget must be >= 1".into()));
        }
        Ok(())
    }
}

/// Executes one allocated step: the chosen actor acts, the environment answers.
pub fn take_step(
    env: &mut dyn Environment,
    actors: &mut ActorPair,
    state: &mut CollabState,
    decision: Decision,
    rng: &mut dyn RngCore,
) -> Result<(), CollectError> {
    let index = state.next_index();
    let actor = actors.get_mut(decision.choice);
    let action = actor
        .act(state, rng)
        .map_err(|source| CollectError::Actor { step: index, source })?;
    let executor = Executor {
        role: decision.choice,
        id: actor.id(),
        success_override: actor.success_override(),
    };
    let observation = env.apply(state, &action, &executor)?;
    let executor_id = actor.id().to_string();
    state.push(Step {
        index,
        collab: decision.choice,
        action,
        observation,
        executor_id,
        behavior_prob: decision.behavior_prob,
    });
    Ok(())
}

/// Scores a terminal state.
pub fn finish_episode(
    env: &mut dyn Environment,
    state: CollabState,
    status: EpisodeStatus,
    lambda: f64,
) -> Result<Trajectory, CollectError> {
    let t = env.task_reward(&state, status)?;
    Ok(Trajectory::scored(state.query, state.history, status, t, lambda)?)
}

/// Runs from `start` until termination. A `forced` choice replaces the
/// first decision and is recorded with behavior probability 1.
#[allow(clippy::too_many_arguments)]
pub fn rollout_with(
    env: &mut dyn Environment,
    actors: &mut ActorPair,
    source: &mut dyn ChoiceSource,
    start: CollabState,
    forced: Option<CollabChoice>,
    rng: &mut dyn RngCore,
    lambda: f64,
    mut observer: Option<&mut dyn FnMut(&CollabState)>,
) -> Result<Trajectory, CollectError> {
    let mut state = start;
    let mut forced = forced;
    let status = loop {
        if let Some(status) = env.terminal(&state) {
            break status;
        }
        let decision = match forced.take() {
            Some(choice) => Decision::certain(choice),
            None => source.decide(&state, rng)?,
        };
        take_step(env, actors, &mut state, decision, rng)?;
        if let Some(obs) = observer.as_mut() {
            obs(&state);
        }
    };
    finish_episode(env, state, status, lambda)
}

pub fn rollout(
    env: &mut dyn Environment,
    actors: &mut ActorPair,
    source: &mut dyn ChoiceSource,
    start: CollabState,
    rng: &mut dyn RngCore,
    lambda: f64,
) -> Result<Trajectory, CollectError> {
    rollout_with(env, actors, source, start, None, rng, lambda, None)
}

/// One episode on `query` with the environment and decision streams both
/// derived from `seed`. Equal seeds give common random numbers across
/// choice sources.
pub fn run_episode(
    env: &mut dyn Environment,
    actors: &mut ActorPair,
    source: &mut dyn ChoiceSource,
    query: &Arc<TaskQuery>,
    seed: u64,
    lambda: f64,
) -> Result<Trajectory, CollectError> {
    env.reseed(seed);
    let mut rng = choice_rng(seed);
    let start = env.reset(query)?;
    rollout(env, actors, source, start, &mut rng, lambda)
}

/// Decision stream paired with an episode seed.
pub fn choice_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ CHOICE_STREAM)
}

/// State key → recorded (choice, trajectory id) pairs.
pub type PrefixIndex = BTreeMap<StateKey, BTreeSet<(CollabChoice, usize)>>;

#[derive(Clone, Debug, PartialEq)]
pub struct BranchDataset {
    pub queries: Vec<Arc<TaskQuery>>,
    pub trajectories: Vec<Trajectory>,
    pub provenance: Provenance,
    pub feature_layout_version: u32,
    /// Penalty the stored rewards were scored under.
    pub lambda: f64,
    prefix_index: PrefixIndex,
}

fn index_trajectory(index: &mut PrefixIndex, id: usize, traj: &Trajectory) {
    for (i, step) in traj.steps.iter().enumerate() {
        let key = traj.state_at(i + 1).expect("prefix within trajectory").key();
        index.entry(key).or_default().insert((step.collab, id));
    }
}

impl BranchDataset {
    pub fn new(
        queries: Vec<Arc<TaskQuery>>,
        trajectories: Vec<Trajectory>,
        provenance: Provenance,
        lambda: f64,
    ) -> Self {
        let mut ds = BranchDataset {
            queries,
            trajectories,
            provenance,
            feature_layout_version: FEATURE_LAYOUT_VERSION,
            lambda,
            prefix_index: PrefixIndex::new(),
        };
        ds.rebuild_index();
        ds
    }

    pub fn rebuild_index(&mut self) {
        let mut index = PrefixIndex::new();
        for (id, t) in self.trajectories.iter().enumerate() {
            index_trajectory(&mut index, id, t);
        }
        self.prefix_index = index;
    }

    pub fn prefix_index(&self) -> &PrefixIndex {
        &self.prefix_index
    }

    pub fn push(&mut self, traj: Trajectory) {
        let id = self.trajectories.len();
        index_trajectory(&mut self.prefix_index, id, &traj);
        self.trajectories.push(traj);
    }

    /// Choices recorded at `key`.
    pub fn branches(&self, key: &StateKey) -> BTreeSet<CollabChoice> {
        self.prefix_index
            .get(key)
            .map(|s| s.iter().map(|(c, _)| *c).collect())
            .unwrap_or_default()
    }

    /// States where only one choice has been recorded, shallowest first.
    pub fn single_branch_states(&self) -> Vec<(StateKey, CollabChoice, usize, usize)> {
        let mut out = Vec::new();
        for (key, entries) in &self.prefix_index {
            let choices: BTreeSet<CollabChoice> = entries.iter().map(|(c, _)| *c).collect();
            if choices.len() == 1 {
                let present = *choices.iter().next().expect("one choice");
                let &(_, id) = entries.iter().next().expect("non-empty");
                let t = state_position(&self.trajectories[id], key);
                out.push((key.clone(), present.other(), id, t));
            }
        }
        out.sort_by(|a, b| a.3.cmp(&b.3).then_with(|| a.0.cmp(&b.0)));
        out
    }

    /// Same trajectories with rewards scored under `lambda`.
    pub fn rescored(&self, lambda: f64) -> Self {
        BranchDataset {
            trajectories: self.trajectories.iter().map(|t| t.rescored(lambda)).collect(),
            lambda,
            ..self.clone()
        }
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.steps.len()).sum()
    }

    pub fn human_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.intervention_count).sum()
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let ids: HashSet<&str> = self.queries.iter().map(|q| q.id.as_str()).collect();
        for t in &self.trajectories {
            if !ids.contains(t.query.id.as_str()) {
                return Err(TrajectoryError::InvalidTrajectory(format!("unknown query {}", t.query.id)));
            }
            t.validate(self.lambda)?;
        }
        Ok(())
    }

    /// Question and trajectory counts per dataset.
    pub fn shape(&self) -> Vec<ShapeRow> {
        let mut rows: BTreeMap<String, (BTreeSet<&str>, usize)> = BTreeMap::new();
        for q in &self.queries {
            rows.entry(q.dataset_tag.as_str().to_string()).or_default().0.insert(&q.id);
        }
        for t in &self.trajectories {
            rows.entry(t.query.dataset_tag.as_str().to_string()).or_default().1 += 1;
        }
        rows.into_iter()
            .map(|(dataset, (qs, n))| ShapeRow {
                dataset: format!("{dataset} ({})", self.provenance.label()),
                questions: qs.len(),
                trajectories: n,
            })
            .collect()
    }

    pub fn shape_report(&self) -> String {
        let rows = self.shape();
        let width = rows.iter().map(|r| r.dataset.len()).max().unwrap_or(0).max("Dataset".len());
        let mut out = format!("{:<width$}  {:>9}  {:>12}\n", "Dataset", "Questions", "Trajectories");
        for r in rows {
            out.push_str(&format!("{r:width$}\n"));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CollectError> {
        let path = path.as_ref();
        let io = |source| CollectError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(w, "{}", serde_json::to_string(&self.header()).expect("header serializes")).map_err(io)?;
        for t in &self.trajectories {
            writeln!(w, "{}", record_line(t)).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CollectError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| CollectError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let parse_err = |line: usize, message: String| CollectError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = BufReader::new(file).lines().enumerate();
        let header_text = match lines.next() {
            Some((_, l)) => l.map_err(|source| CollectError::Io {
                path: path.to_path_buf(),
                source,
            })?,
            None => return Err(parse_err(1, "empty dataset file".into())),
        };
        let raw: serde_json::Value =
            serde_json::from_str(&header_text).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
        let version = raw.get("schema_version").and_then(|v| v.as_u64());
        match version {
            Some(v) if v == DATASET_SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(CollectError::UnsupportedVersion { found: v as u32 }),
            None => return Err(parse_err(1, "header lacks schema_version".into())),
        }
        let header: DatasetHeader =
            serde_json::from_value(raw).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
        let queries: Vec<Arc<TaskQuery>> = header.queries.into_iter().map(Arc::new).collect();
        let by_id: BTreeMap<&str, &Arc<TaskQuery>> = queries.iter().map(|q| (q.id.as_str(), q)).collect();
        let mut trajectories = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|source| CollectError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TrajectoryRecord = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
            let query = by_id
                .get(rec.query_id.as_str())
                .ok_or_else(|| parse_err(i + 1, format!("unknown query {}", rec.query_id)))?;
            let traj = Trajectory {
                query: Arc::clone(query),
                steps: rec.steps,
                status: rec.status,
                task_reward: rec.task_reward,
                intervention_count: rec.intervention_count,
                reward: rec.reward,
                branch_step: rec.branch_step,
            };
            traj.validate(header.lambda).map_err(|e| parse_err(i + 1, e.to_string()))?;
            trajectories.push(traj);
        }
        let mut ds = BranchDataset::new(queries, trajectories, header.provenance, header.lambda);
        ds.feature_layout_version = header.feature_layout_version;
        Ok(ds)
    }

    fn header(&self) -> DatasetHeader {
        DatasetHeader {
            schema_version: DATASET_SCHEMA_VERSION,
            provenance: self.provenance,
            feature_layout_version: self.feature_layout_version,
            lambda: self.lambda,
            queries: self.queries.iter().map(|q| (**q).clone()).collect(),
        }
    }
}

fn state_position(traj: &Trajectory, key: &StateKey) -> usize {
    (1..=traj.steps.len())
        .find(|&t| traj.state_at(t).map(|s| &s.key() == key).unwrap_or(false))
        .expect("indexed state lies on the trajectory")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeRow {
    pub dataset: String,
    pub questions: usize,
    pub trajectories: usize,
}

impl fmt::Display for ShapeRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = f.width().unwrap_or(0);
        write!(f, "{:<width$}  {:>9}  {:>12}", self.dataset, self.questions, self.trajectories)
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    schema_version: u32,
    provenance: Provenance,
    feature_layout_version: u32,
    lambda: f64,
    queries: Vec<TaskQuery>,
}

/// One dataset line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub query_id: String,
    pub steps: Vec<Step>,
    pub status: EpisodeStatus,
    pub task_reward: f64,
    pub intervention_count: usize,
    pub reward: f64,
    #[serde(default = "one")]
    pub branch_step: usize,
}

fn one() -> usize {
    1
}

impl From<&Trajectory> for TrajectoryRecord {
    fn from(t: &Trajectory) -> Self {
        TrajectoryRecord {
            query_id: t.query.id.clone(),
            steps: t.steps.clone(),
            status: t.status,
            task_reward: t.task_reward,
            intervention_count: t.intervention_count,
            reward: t.reward,
            branch_step: t.branch_step,
        }
    }
}

/// The JSONL line a trajectory is stored as.
pub fn record_line(t: &Trajectory) -> String {
    serde_json::to_string(&TrajectoryRecord::from(t)).expect("record serializes")
}

/// Appends trajectories to a dataset file, writing the header first if the
/// file is new.
pub struct DatasetAppender {
    path: PathBuf,
    file: File,
}

impl DatasetAppender {
    pub fn open(
        path: impl AsRef<Path>,
        queries: &[Arc<TaskQuery>],
        provenance: Provenance,
        lambda: f64,
    ) -> Result<Self, CollectError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| CollectError::Io {
            path: path.clone(),
            source,
        };
        let fresh = std::fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
        let mut file = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        if fresh {
            let header = BranchDataset::new(queries.to_vec(), Vec::new(), provenance, lambda).header();
            writeln!(file, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(io)?;
        }
        Ok(DatasetAppender { path, file })
    }

    pub fn append(&mut self, t: &Trajectory) -> Result<(), CollectError> {
        writeln!(self.file, "{}", record_line(t)).map_err(|source| CollectError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

/// Drops trajectories repeating an earlier one's choices, actions and
/// observations, unless the provenance keeps duplicates.
pub fn dedup(dataset: &BranchDataset, provenance: Provenance) -> BranchDataset {
    if provenance.keeps_duplicates() {
        return dataset.clone();
    }
    let mut seen = HashSet::new();
    let kept: Vec<Trajectory> = dataset
        .trajectories
        .iter()
        .filter(|t| seen.insert(t.canonical_text()))
        .cloned()
        .collect();
    BranchDataset::new(dataset.queries.clone(), kept, dataset.provenance, dataset.lambda)
}

/// `per_query_budget` rollouts per query under `Bernoulli(behavior)`.
pub fn uniform_collect(
    queries: &[Arc<TaskQuery>],
    env: &mut dyn Environment,
    actors: &mut ActorPair,
    cfg: &CollectConfig,
) -> Result<BranchDataset, CollectError> {
    cfg.validate()?;
    let mut source = Bernoulli { p_human: cfg.behavior };
    let mut trajectories = Vec::with_capacity(queries.len() * cfg.per_query_budget);
    for (qi, query) in queries.iter().enumerate() {
        for r in 0..cfg.per_query_budget {
            let seed = mix_seed(cfg.seed, qi as u64, r as u64);
            trajectories.push(run_episode(env, actors, &mut source, query, seed, cfg.lambda)?);
        }
    }
    let ds = BranchDataset::new(queries.to_vec(), trajectories, cfg.provenance, cfg.lambda);
    Ok(if cfg.allow_duplicates { ds } else { dedup(&ds, Provenance::SimulatedHuman) })
}

/// Forks a rollout at every state where only one choice was recorded,
/// forcing the missing choice and continuing uniformly, until both
/// branches exist everywhere or the per-query fork cap is reached.
pub fn branch_complete(
    dataset: &BranchDataset,
    env: &mut dyn Environment,
    actors: &mut ActorPair,
    cfg: &CollectConfig,
) -> Result<BranchDataset, CollectError> {
    cfg.validate()?;
    let mut ds = dataset.clone();
    let mut source = Bernoulli { p_human: cfg.behavior };
    let mut forks: BTreeMap<String, usize> = BTreeMap::new();
    let mut counter = 0u64;
    for round in 0u64.. {
        let mut added = 0;
        for (_, missing, id, t) in ds.single_branch_states() {
            let query_id = ds.trajectories[id].query.id.clone();
            let used = forks.entry(query_id).or_default();
            if *used >= cfg.max_forks_per_query {
                continue;
            }
            *used += 1;
            let start = ds.trajectories[id].state_at(t)?;
            let seed = mix_seed(cfg.seed ^ FORK_STREAM, round, counter);
            counter += 1;
            env.reseed(seed);
            env.restore(&start)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ CHOICE_STREAM);
            let traj = rollout_with(env, actors, &mut source, start, Some(missing), &mut rng, cfg.lambda, None)?
                .with_branch_step(t)?;
            ds.push(traj);
            added += 1;
        }
        if added == 0 {
            break;
        }
    }
    Ok(if cfg.allow_duplicates { ds } else { dedup(&ds, Provenance::SimulatedHuman) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::choice::Constant;
    use crate::envs::{synth_generate, Difficulty, SuccessTable, SyntheticSuite};

    fn suite(p_agent: f64, p_human: f64, k: usize, budget: usize) -> SyntheticSuite {
        let (q, t) = synth_generate(k, &vec![Difficulty::Easy; k], SuccessTable::uniform(p_agent, p_human), budget, 7)
            .unwrap();
        SyntheticSuite::single(q, t)
    }

    #[test]
    fn constant_sources() {
        let s = suite(0.5, 1.0, 2, 4);
        let mut env = s.env(0);
        let mut actors = ActorPair::scripted();
        let agent = run_episode(&mut env, &mut actors, &mut Constant(CollabChoice::Agent), &s.queries[0], 3, 0.1).unwrap();
        assert_eq!(agent.intervention_count, 0);
        assert_eq!(agent.reward, agent.task_reward);
        let human = run_episode(&mut env, &mut actors, &mut Constant(CollabChoice::Human), &s.queries[0], 3, 0.1).unwrap();
        assert_eq!(human.task_reward, 1.0);
        assert_eq!(human.status, EpisodeStatus::FinishedByAction);
        let again = run_episode(&mut env, &mut actors, &mut Constant(CollabChoice::Agent), &s.queries[0], 3, 0.1).unwrap();
        assert_eq!(agent, again);
    }

    #[test]
    fn uniform_collection_records_half() {
        let s = suite(0.5, 0.5, 3, 6);
        let mut env = s.env(0);
        let cfg = CollectConfig {
            per_query_budget: 300,
            seed: 5,
            ..CollectConfig::default()
        };
        let ds = uniform_collect(&s.queries, &mut env, &mut ActorPair::scripted(), &cfg).unwrap();
        assert!(ds.total_steps() >= 1000);
        let frac = ds.human_steps() as f64 / ds.total_steps() as f64;
        assert!((frac - 0.5).abs() < 0.05, "{frac}");
        assert!(ds.trajectories.iter().flat_map(|t| &t.steps).all(|s| s.behavior_prob == 0.5));
        assert!(ds.shape_report().contains("synthetic (synthetic)"));
    }

    #[test]
    fn branch_completion_fills_missing_choices() {
        let s = suite(0.5, 0.9, 2, 3);
        let mut env = s.env(0);
        let cfg = CollectConfig {
            per_query_budget: 1,
            seed: 1,
            ..CollectConfig::default()
        };
        let mut actors = ActorPair::scripted();
        let ds = uniform_collect(&s.queries, &mut env, &mut actors, &cfg).unwrap();
        assert!(!ds.single_branch_states().is_empty());
        let done = branch_complete(&ds, &mut env, &mut actors, &cfg).unwrap();
        assert!(done.single_branch_states().is_empty());
        for t in &done.trajectories[1..] {
            assert!(t.branch_step >= 1);
            assert_eq!(t.steps[t.branch_step - 1].behavior_prob, 1.0);
        }
        let again = branch_complete(&done, &mut env, &mut actors, &cfg).unwrap();
        assert_eq!(again.trajectories.len(), done.trajectories.len());
        assert!(done
            .trajectories
            .iter()
            .flat_map(|t| &t.steps)
            .all(|s| s.behavior_prob == 0.5 || s.behavior_prob == 1.0));
    }

    #[test]
    fn dedup_rules() {
        let s = suite(1.0, 1.0, 1, 2);
        let mut env = s.env(0);
        let mut actors = ActorPair::scripted();
        let t = run_episode(&mut env, &mut actors, &mut Constant(CollabChoice::Agent), &s.queries[0], 1, 0.1).unwrap();
        let mut other = t.clone();
        other.steps[0].observation.text.push('!');
        let ds = BranchDataset::new(s.queries.clone(), vec![t.clone(), t.clone(), other], Provenance::SimulatedHuman, 0.1);
        let d = dedup(&ds, Provenance::SimulatedHuman);
        assert_eq!(d.trajectories.len(), 2);
        assert_eq!(dedup(&d, Provenance::SimulatedHuman), d);
        assert_eq!(dedup(&ds, Provenance::RealHuman).trajectories.len(), 3);
    }

    #[test]
    fn save_load_round_trip_and_errors() {
        let s = suite(0.5, 1.0, 2, 3);
        let mut env = s.env(0);
        let cfg = CollectConfig {
            per_query_budget: 5,
            ..CollectConfig::default()
        };
        let ds = uniform_collect(&s.queries, &mut env, &mut ActorPair::scripted(), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        ds.save(&path).unwrap();
        assert_eq!(BranchDataset::load(&path).unwrap(), ds);

        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[3] = "{\"query_id\": 3";
        std::fs::write(&path, lines.join("\n")).unwrap();
        match BranchDataset::load(&path) {
            Err(CollectError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }

        let old = text.replacen("\"schema_version\":1", "\"schema_version\":0", 1);
        std::fs::write(&path, old).unwrap();
        assert!(matches!(BranchDataset::load(&path), Err(CollectError::UnsupportedVersion { found: 0 })));
    }
}
