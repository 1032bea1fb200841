//! Task rewards, the collaboration reward `T - λC`, intervention rate,
//! Monte-Carlo returns per (state, choice) and per-state advantages.
//!
//! Rewards live on the 0–1 scale; reports multiply by 100.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{CollabChoice, CollabState, StateKey, Trajectory};

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("intervention rate is undefined with zero steps")]
    NoSteps,
    #[error("lambda must be finite and non-negative, got {0}")]
    InvalidLambda(f64),
    #[error("state {0} has only one sampled branch")]
    SingleBranch(StateKey),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaConfig {
    pub lambda: f64,
}

impl LambdaConfig {
    pub fn new(lambda: f64) -> Result<Self, RewardError> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(RewardError::InvalidLambda(lambda));
        }
        Ok(LambdaConfig { lambda })
    }
}

/// Extractive-QA normalization: lowercase, drop punctuation, drop the
/// articles a/an/the, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Token-bag F1 between normalized prediction and gold.
pub fn f1_score(prediction: &str, gold: &str) -> f64 {
    let pred = normalize_answer(prediction);
    let gold = normalize_answer(gold);
    let pred_tokens: Vec<&str> = pred.split_whitespace().collect();
    let gold_tokens: Vec<&str> = gold.split_whitespace().collect();
    if pred_tokens.is_empty() || gold_tokens.is_empty() {
        return if pred_tokens.is_empty() && gold_tokens.is_empty() {
            1.0
        } else {
            0.0
        };
    }
    let mut gold_counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold_tokens {
        *gold_counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pred_tokens {
        if let Some(n) = gold_counts.get_mut(t) {
            if *n > 0 {
                *n -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred_tokens.len() as f64;
    let recall = common as f64 / gold_tokens.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Multiset intersection-over-union of canonicalized rows.
pub fn iou_score(predicted: &[String], gold: &[String]) -> f64 {
    if predicted.is_empty() && gold.is_empty() {
        return 1.0;
    }
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in predicted {
        counts.entry(r).or_default().0 += 1;
    }
    for r in gold {
        counts.entry(r).or_default().1 += 1;
    }
    let (inter, union) = counts
        .values()
        .fold((0usize, 0usize), |(i, u), &(p, g)| (i + p.min(g), u + p.max(g)));
    inter as f64 / union as f64
}

/// `R = T - λC`.
pub fn collaboration_reward(task_reward: f64, interventions: usize, cfg: LambdaConfig) -> f64 {
    task_reward - cfg.lambda * interventions as f64
}

/// Human steps over all steps.
pub fn hir(num_human_steps: usize, num_agent_steps: usize) -> Result<f64, RewardError> {
    let total = num_human_steps + num_agent_steps;
    if total == 0 {
        return Err(RewardError::NoSteps);
    }
    Ok(num_human_steps as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnEntry {
    pub mean_return: f64,
    pub sample_count: usize,
}

/// Returns of both branches at one state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StateReturns {
    pub agent: Option<ReturnEntry>,
    pub human: Option<ReturnEntry>,
}

impl StateReturns {
    pub fn get(&self, choice: CollabChoice) -> Option<&ReturnEntry> {
        match choice {
            CollabChoice::Agent => self.agent.as_ref(),
            CollabChoice::Human => self.human.as_ref(),
        }
    }

    pub fn has_both(&self) -> bool {
        self.agent.is_some() && self.human.is_some()
    }

    pub fn sampled(&self) -> impl Iterator<Item = (CollabChoice, &ReturnEntry)> {
        CollabChoice::BOTH
            .into_iter()
            .filter_map(move |c| self.get(c).map(|e| (c, e)))
    }
}

/// Mean terminal reward of every (state, choice) pair seen in a dataset.
#[derive(Clone, Debug, Default)]
pub struct ReturnTable {
    entries: BTreeMap<StateKey, StateReturns>,
    states: BTreeMap<StateKey, CollabState>,
}

impl ReturnTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &StateKey) -> Option<&StateReturns> {
        self.entries.get(key)
    }

    pub fn entry(&self, key: &StateKey, choice: CollabChoice) -> Option<&ReturnEntry> {
        self.entries.get(key).and_then(|r| r.get(choice))
    }

    /// A representative state for `key`.
    pub fn state(&self, key: &StateKey) -> Option<&CollabState> {
        self.states.get(key)
    }

    /// States in key order.
    pub fn iter(&self) -> impl Iterator<Item = (&StateKey, &StateReturns)> {
        self.entries.iter()
    }
}

/// Monte-Carlo estimate of `R(s, a)`: the mean of `T - λC` over every
/// trajectory that took choice `a` at state `s`. A forked trajectory only
/// counts from its branch step on, since its prefix is a copy.
///
/// Per-entry samples are summed in sorted order so the table does not depend
/// on trajectory order.
pub fn monte_carlo_returns<'a>(
    trajectories: impl IntoIterator<Item = &'a Trajectory>,
    cfg: LambdaConfig,
) -> ReturnTable {
    let mut samples: BTreeMap<(StateKey, CollabChoice), Vec<f64>> = BTreeMap::new();
    let mut states = BTreeMap::new();
    for traj in trajectories {
        let r = collaboration_reward(traj.task_reward, traj.intervention_count, cfg);
        for (i, step) in traj.steps.iter().enumerate().skip(traj.branch_step - 1) {
            let state = traj
                .state_at(i + 1)
                .expect("prefix index within trajectory");
            let key = state.key();
            samples.entry((key.clone(), step.collab)).or_default().push(r);
            states.entry(key).or_insert(state);
        }
    }
    let mut entries: BTreeMap<StateKey, StateReturns> = BTreeMap::new();
    for ((key, choice), mut values) in samples {
        values.sort_by(f64::total_cmp);
        let n = values.len();
        let entry = ReturnEntry {
            mean_return: values.iter().sum::<f64>() / n as f64,
            sample_count: n,
        };
        let slot = entries.entry(key).or_default();
        match choice {
            CollabChoice::Agent => slot.agent = Some(entry),
            CollabChoice::Human => slot.human = Some(entry),
        }
    }
    ReturnTable { entries, states }
}

/// Per-choice advantage at one state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchAdvantage {
    pub agent: f64,
    pub human: f64,
}

impl BranchAdvantage {
    pub fn get(&self, choice: CollabChoice) -> f64 {
        match choice {
            CollabChoice::Agent => self.agent,
            CollabChoice::Human => self.human,
        }
    }
}

/// `A(s,a) = R(s,a) - mean over both choices`. The two values are exact negatives.
pub fn advantage(agent_return: f64, human_return: f64) -> BranchAdvantage {
    let agent = (agent_return - human_return) / 2.0;
    BranchAdvantage {
        agent,
        human: -agent,
    }
}

/// Advantage at a table state, or `SingleBranch` when one choice was never sampled.
pub fn state_advantage(key: &StateKey, returns: &StateReturns) -> Result<BranchAdvantage, RewardError> {
    match (returns.agent, returns.human) {
        (Some(a), Some(h)) => Ok(advantage(a.mean_return, h.mean_return)),
        _ => Err(RewardError::SingleBranch(key.clone())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn f1_examples() {
        assert!(close(f1_score("Seven Days Battles", "Seven Days Battles"), 1.0));
        assert_eq!(f1_score("battle of manila", "seven days battles"), 0.0);
        // P = 1, R = 2/3
        assert!(close(f1_score("seven days", "seven days battles"), 0.8));
        assert_eq!(f1_score("", "x"), 0.0);
        assert_eq!(f1_score("", ""), 1.0);
        assert!(close(f1_score("The Eiffel Tower!", "eiffel tower"), 1.0));
    }

    #[test]
    fn iou_examples() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert!(close(iou_score(&s(&["r1", "r2"]), &s(&["r2", "r3"])), 1.0 / 3.0));
        assert_eq!(iou_score(&s(&["a", "b"]), &s(&["a", "b"])), 1.0);
        assert_eq!(iou_score(&s(&["a"]), &s(&["b"])), 0.0);
        assert_eq!(iou_score(&[], &[]), 1.0);
        // multiset: one of two duplicates matched
        assert!(close(iou_score(&s(&["a", "a"]), &s(&["a"])), 0.5));
    }

    #[test]
    fn collaboration_reward_examples() {
        let cfg = LambdaConfig::new(0.1).unwrap();
        assert!(close(collaboration_reward(0.8, 3, cfg), 0.5));
        for l in [0.0, 0.06, 0.08, 0.1, 3.0] {
            let cfg = LambdaConfig::new(l).unwrap();
            assert_eq!(collaboration_reward(0.2239, 0, cfg), 0.2239);
        }
        assert_eq!(collaboration_reward(1.0, 0, LambdaConfig::new(0.08).unwrap()), 1.0);
        assert!(LambdaConfig::new(-0.1).is_err());
        assert!(LambdaConfig::new(f64::NAN).is_err());
    }

    #[test]
    fn hir_examples() {
        assert!(close(hir(3, 7).unwrap(), 0.3));
        assert_eq!(hir(5, 0).unwrap(), 1.0);
        assert_eq!(hir(0, 5).unwrap(), 0.0);
        assert_eq!(hir(0, 0), Err(RewardError::NoSteps));
    }

    #[test]
    fn advantage_examples() {
        let a = advantage(0.9, 0.7);
        assert!((a.agent - 0.1).abs() < 1e-12 && (a.human + 0.1).abs() < 1e-12);
        assert_eq!(advantage(0.4, 0.4), BranchAdvantage { agent: 0.0, human: 0.0 });
        assert_eq!(advantage(0.0, 1.0), BranchAdvantage { agent: -0.5, human: 0.5 });
    }

    #[test]
    fn single_branch_is_signaled() {
        let key = StateKey::from_text("s");
        let only_human = StateReturns {
            agent: None,
            human: Some(ReturnEntry { mean_return: 1.0, sample_count: 1 }),
        };
        assert_eq!(
            state_advantage(&key, &only_human),
            Err(RewardError::SingleBranch(key.clone()))
        );
    }
}
