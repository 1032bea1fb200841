//! Relay-chain tasks: a hidden chain of `k` key→key links ending in a value.
//!
//! Each Hop on the current link succeeds with a probability that depends on
//! who executes it and on the link's difficulty. The task reward is F1 of a
//! Finish answer, or partial chain credit `resolved / k` when the budget runs
//! out. Because the hop-position process is a small Markov chain, fixed
//! allocation sequences can be scored exactly, which is what
//! [`brute_force_optimal`] does.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvError, Environment, Executor};
use crate::rewards::f1_score;
use crate::seed::mix_seed;
use crate::trajectory::{
    ActionKind, CollabChoice, CollabState, DatasetTag, EpisodeStatus, Gold, Observation, SuccessHint, TaskAction,
    TaskQuery,
};

/// Answer the scripted actors give when forced to finish on an unresolved chain.
pub const DECOY_ANSWER: &str = "no answer found";

const MAX_ENUMERATION_STEPS: usize = 12;
const TIE_TOLERANCE: f64 = 1e-12;

const ADJECTIVES: &[&str] = &[
    "amber", "silent", "crimson", "hollow", "golden", "frozen", "velvet", "distant", "bright", "quiet", "iron",
    "scarlet", "misty", "ancient", "lunar", "coral",
];
const NOUNS: &[&str] = &[
    "falcon", "harbor", "lantern", "meadow", "compass", "orchard", "glacier", "beacon", "willow", "canyon",
    "quarry", "summit", "thistle", "ember", "harp", "vessel",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

impl Difficulty {
    fn label(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        }
    }
}

/// Per-hop success probability by executor and link difficulty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessTable {
    pub agent_easy: f64,
    pub agent_hard: f64,
    pub human_easy: f64,
    pub human_hard: f64,
}

impl SuccessTable {
    /// Same probability for both difficulties.
    pub fn uniform(p_agent: f64, p_human: f64) -> Self {
        SuccessTable {
            agent_easy: p_agent,
            agent_hard: p_agent,
            human_easy: p_human,
            human_hard: p_human,
        }
    }

    pub fn get(&self, role: CollabChoice, difficulty: Difficulty) -> f64 {
        match (role, difficulty) {
            (CollabChoice::Agent, Difficulty::Easy) => self.agent_easy,
            (CollabChoice::Agent, Difficulty::Hard) => self.agent_hard,
            (CollabChoice::Human, Difficulty::Easy) => self.human_easy,
            (CollabChoice::Human, Difficulty::Hard) => self.human_hard,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        for p in [self.agent_easy, self.agent_hard, self.human_easy, self.human_hard] {
            if !(0.0..=1.0).contains(&p) {
                return Err(EnvError::InvalidTask(format!("success probability {p} outside [0,1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRelayTask {
    pub query_id: String,
    /// `k + 1` distinct keys; `keys[0]` is named in the query.
    pub keys: Vec<String>,
    pub answer: String,
    pub difficulty: Vec<Difficulty>,
    pub success: SuccessTable,
    pub budget: usize,
}

impl SyntheticRelayTask {
    pub fn hops(&self) -> usize {
        self.difficulty.len()
    }

    /// Links resolved so far: successful hops recorded in the history.
    pub fn resolved_hops(&self, state: &CollabState) -> usize {
        state
            .history
            .iter()
            .filter(|s| s.action.kind == ActionKind::Hop && s.observation.success_hint == SuccessHint::Hit)
            .count()
            .min(self.hops())
    }

    /// Hop success probability at link `position` for `role`.
    pub fn success_prob(&self, role: CollabChoice, position: usize) -> f64 {
        self.success.get(role, self.difficulty[position])
    }

    fn partial_credit(&self, state: &CollabState) -> f64 {
        self.resolved_hops(state) as f64 / self.hops() as f64
    }

    /// Task reward of a terminal state.
    pub fn task_reward(&self, state: &CollabState) -> f64 {
        match state.last_step() {
            Some(last) if last.action.kind == ActionKind::Finish => {
                let answer = last.action.argument();
                if answer.trim() == DECOY_ANSWER {
                    self.partial_credit(state)
                } else {
                    f1_score(answer, &self.answer)
                }
            }
            _ => self.partial_credit(state),
        }
    }

    /// Observation for `action` at `state`, drawing one uniform per attempted hop.
    pub fn apply<R: Rng + ?Sized>(
        &self,
        state: &CollabState,
        action: &TaskAction,
        executor: &Executor<'_>,
        rng: &mut R,
    ) -> Result<Observation, EnvError> {
        match action.kind {
            ActionKind::Hop => {
                let position = self.resolved_hops(state);
                if position == self.hops() {
                    return Ok(Observation::new("The chain is already resolved.", SuccessHint::Unknown));
                }
                let current = &self.keys[position];
                let asked = action.argument().trim();
                if asked != current {
                    return Ok(Observation::new(format!("Unknown key {asked}."), SuccessHint::Miss));
                }
                let p = executor
                    .success_override
                    .unwrap_or_else(|| self.success_prob(executor.role, position));
                let u: f64 = rng.random();
                if u < p {
                    let text = if position + 1 == self.hops() {
                        format!("{current} holds the value {}.", self.answer)
                    } else {
                        format!("{current} links to {}.", self.keys[position + 1])
                    };
                    Ok(Observation::new(text, SuccessHint::Hit))
                } else {
                    Ok(Observation::new(format!("No link found from {current}."), SuccessHint::Miss))
                }
            }
            ActionKind::Finish => Ok(Observation::new(
                format!("Answer submitted: {}.", action.argument()),
                SuccessHint::Unknown,
            )),
            other => Err(EnvError::IllegalAction(format!(
                "{} is not a synthetic action",
                other.name()
            ))),
        }
    }
}

/// Deterministic task from a seed: `k` hops with the given difficulties.
pub fn synth_generate(
    k: usize,
    difficulties: &[Difficulty],
    probs: SuccessTable,
    budget: usize,
    seed: u64,
) -> Result<(TaskQuery, SyntheticRelayTask), EnvError> {
    if k == 0 {
        return Err(EnvError::InvalidTask("a relay chain needs at least one hop".into()));
    }
    if difficulties.len() != k {
        return Err(EnvError::InvalidTask(format!(
            "{} difficulties given for {k} hops",
            difficulties.len()
        )));
    }
    if budget == 0 {
        return Err(EnvError::InvalidTask("budget must be at least 1".into()));
    }
    probs.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut keys = Vec::with_capacity(k + 1);
    while keys.len() < k + 1 {
        let n: u32 = rng.random_range(100..1000);
        if seen.insert(n) {
            keys.push(format!("k{n}"));
        }
    }
    let answer = format!(
        "{} {}",
        ADJECTIVES.choose(&mut rng).expect("non-empty"),
        NOUNS.choose(&mut rng).expect("non-empty")
    );
    let mut text = format!("Follow the relay chain from key {} to its value.", keys[0]);
    for (i, d) in difficulties.iter().enumerate() {
        text.push_str(&format!(" Link {} is {}.", i + 1, d.label()));
    }
    let query_id = format!("relay-{seed}");
    let query = TaskQuery::new(
        query_id.clone(),
        text,
        Gold::Text(answer.clone()),
        DatasetTag::Synthetic,
        Some(budget),
    )
    .map_err(|e| EnvError::InvalidTask(e.to_string()))?;
    let task = SyntheticRelayTask {
        query_id,
        keys,
        answer,
        difficulty: difficulties.to_vec(),
        success: probs,
        budget,
    };
    Ok((query, task))
}

/// Environment over a set of relay tasks, selected by query id.
#[derive(Clone, Debug)]
pub struct SyntheticEnv {
    tasks: BTreeMap<String, SyntheticRelayTask>,
    current: Option<String>,
    rng: ChaCha8Rng,
}

impl SyntheticEnv {
    pub fn new(tasks: impl IntoIterator<Item = SyntheticRelayTask>, seed: u64) -> Self {
        SyntheticEnv {
            tasks: tasks.into_iter().map(|t| (t.query_id.clone(), t)).collect(),
            current: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn task(&self, query_id: &str) -> Option<&SyntheticRelayTask> {
        self.tasks.get(query_id)
    }

    fn task_for(&self, state: &CollabState) -> Result<&SyntheticRelayTask, EnvError> {
        self.tasks
            .get(&state.query.id)
            .ok_or_else(|| EnvError::UnknownQuery(state.query.id.clone()))
    }
}

impl Environment for SyntheticEnv {
    fn restore(&mut self, state: &CollabState) -> Result<(), EnvError> {
        self.task_for(state)?;
        self.current = Some(state.query.id.clone());
        Ok(())
    }

    fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn apply(
        &mut self,
        state: &CollabState,
        action: &TaskAction,
        executor: &Executor<'_>,
    ) -> Result<Observation, EnvError> {
        if self.current.as_deref() != Some(state.query.id.as_str()) {
            return Err(EnvError::UnknownQuery(format!(
                "{} (environment not reset for it)",
                state.query.id
            )));
        }
        let task = self
            .tasks
            .get(&state.query.id)
            .ok_or_else(|| EnvError::UnknownQuery(state.query.id.clone()))?;
        task.apply(state, action, executor, &mut self.rng)
    }

    fn task_reward(&mut self, state: &CollabState, _status: EpisodeStatus) -> Result<f64, EnvError> {
        Ok(self.task_for(state)?.task_reward(state))
    }
}

/// A fixed set of generated relay tasks with shared success probabilities.
#[derive(Clone, Debug)]
pub struct SyntheticSuite {
    pub queries: Vec<Arc<TaskQuery>>,
    pub tasks: Vec<SyntheticRelayTask>,
}

impl SyntheticSuite {
    /// `n` tasks; hop counts cycle through `hop_counts`, each link is hard
    /// with probability `hard_fraction`, and the budget is `k + budget_slack`.
    pub fn generate(
        n: usize,
        hop_counts: &[usize],
        hard_fraction: f64,
        probs: SuccessTable,
        budget_slack: usize,
        seed: u64,
    ) -> Result<Self, EnvError> {
        if hop_counts.is_empty() {
            return Err(EnvError::InvalidTask("no hop counts given".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut queries = Vec::with_capacity(n);
        let mut tasks = Vec::with_capacity(n);
        for i in 0..n {
            let k = hop_counts[i % hop_counts.len()];
            let difficulties: Vec<Difficulty> = (0..k)
                .map(|_| {
                    if rng.random::<f64>() < hard_fraction {
                        Difficulty::Hard
                    } else {
                        Difficulty::Easy
                    }
                })
                .collect();
            let (q, t) = synth_generate(k, &difficulties, probs, k + budget_slack, mix_seed(seed, i as u64, 0))?;
            queries.push(Arc::new(q));
            tasks.push(t);
        }
        Ok(SyntheticSuite { queries, tasks })
    }

    /// Single-task suite.
    pub fn single(query: TaskQuery, task: SyntheticRelayTask) -> Self {
        SyntheticSuite {
            queries: vec![Arc::new(query)],
            tasks: vec![task],
        }
    }

    pub fn env(&self, seed: u64) -> SyntheticEnv {
        SyntheticEnv::new(self.tasks.iter().cloned(), seed)
    }
}

/// Best open-loop allocation sequence and the value of every sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimalAllocation {
    pub choices: Vec<CollabChoice>,
    pub expected_reward: f64,
    /// Every enumerated sequence with its expected reward, AGENT-first lexicographic order.
    pub table: Vec<(Vec<CollabChoice>, f64)>,
}

/// Exact `E[T] - λ·E[C]` of a fixed per-step allocation, propagating the
/// hop-position distribution. A resolved chain spends its next step on
/// Finish, which ends the episode; later choices then cost nothing.
pub fn expected_sequence_reward(task: &SyntheticRelayTask, sequence: &[CollabChoice], lambda: f64) -> f64 {
    let k = task.hops();
    let mut open = vec![0.0; k + 1];
    open[0] = 1.0;
    let mut finished = 0.0;
    let mut expected_humans = 0.0;
    for &choice in sequence {
        let mut next = vec![0.0; k + 1];
        for (pos, &mass) in open.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            if choice == CollabChoice::Human {
                expected_humans += mass;
            }
            if pos == k {
                finished += mass;
            } else {
                let p = task.success_prob(choice, pos);
                next[pos + 1] += mass * p;
                next[pos] += mass * (1.0 - p);
            }
        }
        open = next;
    }
    let partial: f64 = open
        .iter()
        .enumerate()
        .map(|(pos, m)| m * pos as f64 / k as f64)
        .sum();
    finished + partial - lambda * expected_humans
}

/// Enumerates all `2^budget` allocation sequences. Ties prefer fewer human
/// steps, then the lexicographically AGENT-first sequence.
pub fn brute_force_optimal(
    task: &SyntheticRelayTask,
    lambda: f64,
    budget: usize,
) -> Result<OptimalAllocation, EnvError> {
    if budget > MAX_ENUMERATION_STEPS {
        return Err(EnvError::BudgetTooLarge(budget));
    }
    let mut table = Vec::with_capacity(1 << budget);
    let mut best: Option<(usize, f64, usize)> = None;
    for mask in 0u32..(1u32 << budget) {
        let seq: Vec<CollabChoice> = (0..budget)
            .map(|i| {
                if mask & (1 << (budget - 1 - i)) != 0 {
                    CollabChoice::Human
                } else {
                    CollabChoice::Agent
                }
            })
            .collect();
        let value = expected_sequence_reward(task, &seq, lambda);
        let humans = mask.count_ones() as usize;
        let better = match best {
            None => true,
            Some((_, v, h)) => value > v + TIE_TOLERANCE || ((value - v).abs() <= TIE_TOLERANCE && humans < h),
        };
        if better {
            best = Some((table.len(), value, humans));
        }
        table.push((seq, value));
    }
    let (idx, value, _) = best.expect("at least one sequence");
    Ok(OptimalAllocation {
        choices: table[idx].0.clone(),
        expected_reward: value,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::Step;
    use CollabChoice::{Agent as A, Human as H};

    fn two_hop(p_agent: f64, p_human: f64, budget: usize) -> (TaskQuery, SyntheticRelayTask) {
        synth_generate(2, &[Difficulty::Easy; 2], SuccessTable::uniform(p_agent, p_human), budget, 11).unwrap()
    }

    #[test]
    fn generation_is_deterministic_and_acyclic() {
        let a = synth_generate(1, &[Difficulty::Easy], SuccessTable::uniform(0.5, 1.0), 3, 5).unwrap();
        let b = synth_generate(1, &[Difficulty::Easy], SuccessTable::uniform(0.5, 1.0), 3, 5).unwrap();
        assert_eq!(a, b);
        let (q, t) = synth_generate(3, &[Difficulty::Easy, Difficulty::Hard, Difficulty::Easy],
            SuccessTable::uniform(0.5, 1.0), 5, 9).unwrap();
        assert!(q.text.contains(&t.keys[0]));
        assert_eq!(q.gold, Gold::Text(t.answer.clone()));
        let unique: BTreeSet<_> = t.keys.iter().collect();
        assert_eq!(unique.len(), 4);
        assert!(synth_generate(0, &[], SuccessTable::uniform(0.5, 1.0), 2, 1).is_err());
        assert!(synth_generate(1, &[Difficulty::Easy], SuccessTable::uniform(1.5, 1.0), 2, 1).is_err());
    }

    #[test]
    fn query_length_grows_with_hops() {
        use crate::policy::{QUERY_MEDIUM_MAX_WORDS, QUERY_SHORT_MAX_WORDS};
        let words = |k: usize| {
            let (q, _) = synth_generate(k, &vec![Difficulty::Easy; k], SuccessTable::uniform(0.5, 1.0), k, 3).unwrap();
            q.text.split_whitespace().count()
        };
        assert!(words(1) <= QUERY_SHORT_MAX_WORDS);
        assert!(words(2) > QUERY_SHORT_MAX_WORDS && words(2) <= QUERY_MEDIUM_MAX_WORDS);
        assert!(words(3) > QUERY_MEDIUM_MAX_WORDS);
    }

    fn hop_step(i: usize, task: &SyntheticRelayTask, obs: Observation) -> Step {
        Step {
            index: i,
            collab: A,
            action: TaskAction::new(ActionKind::Hop, task.keys[task.hops().min(i - 1)].clone()).unwrap(),
            observation: obs,
            executor_id: "a".into(),
            behavior_prob: 0.5,
        }
    }

    fn drive(task: &SyntheticRelayTask, query: &TaskQuery, p: f64, attempts: usize, seed: u64) -> CollabState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = CollabState::initial(Arc::new(query.clone()));
        let exec = Executor { role: A, id: "a", success_override: Some(p) };
        for i in 0..attempts {
            let pos = task.resolved_hops(&state).min(task.hops() - 1);
            let action = TaskAction::new(ActionKind::Hop, task.keys[pos].clone()).unwrap();
            let obs = task.apply(&state, &action, &exec, &mut rng).unwrap();
            state.push(Step { action, ..hop_step(i + 1, task, obs) });
        }
        state
    }

    #[test]
    fn certain_and_impossible_hops() {
        let (q, t) = two_hop(0.5, 1.0, 4);
        let s = drive(&t, &q, 1.0, 2, 1);
        assert_eq!(t.resolved_hops(&s), 2);
        assert!(s.history[1].observation.text.contains(&t.answer));
        let s = drive(&t, &q, 0.0, 4, 1);
        assert_eq!(t.resolved_hops(&s), 0);
    }

    #[test]
    fn hop_success_rate_matches_probability() {
        let (_, t) = synth_generate(1, &[Difficulty::Easy], SuccessTable::uniform(0.5, 1.0), 1, 2).unwrap();
        let (q, _) = synth_generate(1, &[Difficulty::Easy], SuccessTable::uniform(0.5, 1.0), 1, 2).unwrap();
        let state = CollabState::initial(Arc::new(q));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let action = TaskAction::new(ActionKind::Hop, t.keys[0].clone()).unwrap();
        let exec = Executor { role: A, id: "a", success_override: None };
        let hits = (0..10_000)
            .filter(|_| t.apply(&state, &action, &exec, &mut rng).unwrap().success_hint == SuccessHint::Hit)
            .count();
        assert!((hits as f64 / 1e4 - 0.5).abs() < 0.02);
    }

    #[test]
    fn task_reward_rules() {
        let (q, t) = two_hop(0.5, 1.0, 2);
        let q = Arc::new(q);
        let mut s = CollabState::initial(Arc::clone(&q));
        let hit = Observation::new("x", SuccessHint::Hit);
        s.push(hop_step(1, &t, hit));
        assert_eq!(t.task_reward(&s), 0.5);
        let finish = |answer: &str| {
            let mut s = CollabState::initial(Arc::clone(&q));
            s.push(Step {
                action: TaskAction::new(ActionKind::Finish, answer).unwrap(),
                ..hop_step(1, &t, Observation::new("done", SuccessHint::Unknown))
            });
            s
        };
        assert_eq!(t.task_reward(&finish(&t.answer)), 1.0);
        assert_eq!(t.task_reward(&finish("battle of manila")), 0.0);
        assert_eq!(t.task_reward(&finish(DECOY_ANSWER)), 0.0);
    }

    #[test]
    fn oracle_table_for_two_hops() {
        let (_, t) = two_hop(0.5, 1.0, 2);
        let opt = brute_force_optimal(&t, 0.1, 2).unwrap();
        assert_eq!(opt.choices, vec![H, H]);
        assert!((opt.expected_reward - 0.8).abs() < 1e-12);
        let expected = [(vec![A, A], 0.5), (vec![A, H], 0.65), (vec![H, A], 0.65), (vec![H, H], 0.8)];
        for ((seq, v), (eseq, ev)) in opt.table.iter().zip(expected.iter()) {
            assert_eq!(seq, eseq);
            assert!((v - ev).abs() < 1e-12, "{seq:?}: {v} vs {ev}");
        }
    }

    #[test]
    fn oracle_extremes() {
        let (_, t) = two_hop(0.5, 0.9, 3);
        assert_eq!(brute_force_optimal(&t, 0.0, 3).unwrap().choices[..2], [H, H]);
        let opt = brute_force_optimal(&t, 1.0, 3).unwrap();
        assert_eq!(opt.choices, vec![A, A, A]);
        assert!(matches!(brute_force_optimal(&t, 0.1, 13), Err(EnvError::BudgetTooLarge(13))));
    }

    #[test]
    fn finish_step_cost_is_counted_only_when_reached() {
        let (_, t) = synth_generate(1, &[Difficulty::Easy], SuccessTable::uniform(1.0, 1.0), 3, 1).unwrap();
        // hop, finish, then the episode is over
        assert!((expected_sequence_reward(&t, &[A, A, H], 0.5) - 1.0).abs() < 1e-12);
        assert!((expected_sequence_reward(&t, &[A, H, A], 0.5) - 0.5).abs() < 1e-12);
    }
}
