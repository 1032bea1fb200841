//! The binary collaboration policy: a logistic model over a fixed
//! 15-dimensional encoding of the collaboration state, plus an
//! inference-only hook for policies served over HTTP.

use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{CollabChoice, CollabState, DatasetTag, SuccessHint};

/// Bump when the feature layout changes; stored in datasets and checkpoints.
pub const FEATURE_LAYOUT_VERSION: u32 = 1;
pub const FEATURE_DIM: usize = 15;
/// Probabilities are kept inside `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-6;

/// Queries with at most this many words fall in the short bucket.
pub const QUERY_SHORT_MAX_WORDS: usize = 15;
/// Queries with at most this many words (and more than the short limit) are medium.
pub const QUERY_MEDIUM_MAX_WORDS: usize = 20;

const TRAILING_MISS_CAP: usize = 3;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("parameter dimension {got} does not match feature dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite policy parameter at index {0}")]
    NonFinite(usize),
    #[error("transport error talking to policy endpoint: {0}")]
    Transport(String),
    #[error("unparseable policy response: {0:?}")]
    Unparseable(String),
}

/// Encoded state. Layout, in order:
///
/// | idx | feature |
/// |-----|---------|
/// | 0 | bias (1) |
/// | 1 | steps taken / step threshold |
/// | 2 | fraction of prior steps executed by the human |
/// | 3 | consecutive trailing misses, capped at 3, divided by 3 |
/// | 4–6 | last observation hint one-hot (hit, miss, unknown); zero when no steps |
/// | 7 | remaining budget / step threshold |
/// | 8–10 | query length bucket one-hot (short, medium, long) |
/// | 11–14 | dataset tag one-hot (hotpotqa, strategyqa, intercode, synthetic) |
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; FEATURE_DIM]);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn featurize(state: &CollabState) -> FeatureVector {
    let mut x = [0.0; FEATURE_DIM];
    let threshold = state.query.step_threshold as f64;
    let taken = state.history.len();
    x[0] = 1.0;
    x[1] = (taken as f64 / threshold).min(1.0);
    if taken > 0 {
        let humans = state
            .history
            .iter()
            .filter(|s| s.collab == CollabChoice::Human)
            .count();
        x[2] = humans as f64 / taken as f64;
    }
    let trailing_misses = state
        .history
        .iter()
        .rev()
        .take_while(|s| s.observation.success_hint == SuccessHint::Miss)
        .take(TRAILING_MISS_CAP)
        .count();
    x[3] = trailing_misses as f64 / TRAILING_MISS_CAP as f64;
    if let Some(last) = state.history.last() {
        let slot = match last.observation.success_hint {
            SuccessHint::Hit => 4,
            SuccessHint::Miss => 5,
            SuccessHint::Unknown => 6,
        };
        x[slot] = 1.0;
    }
    x[7] = state.remaining_budget() as f64 / threshold;
    let words = state.query.text.split_whitespace().count();
    let bucket = if words <= QUERY_SHORT_MAX_WORDS {
        8
    } else if words <= QUERY_MEDIUM_MAX_WORDS {
        9
    } else {
        10
    };
    x[bucket] = 1.0;
    let tag_slot = match state.query.dataset_tag {
        DatasetTag::Hotpotqa => 11,
        DatasetTag::Strategyqa => 12,
        DatasetTag::Intercode => 13,
        DatasetTag::Synthetic => 14,
    };
    x[tag_slot] = 1.0;
    FeatureVector(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub weights: Vec<f64>,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self::zeros()
    }
}

impl PolicyParams {
    pub fn zeros() -> Self {
        PolicyParams {
            weights: vec![0.0; FEATURE_DIM],
        }
    }

    pub fn new(weights: Vec<f64>) -> Result<Self, PolicyError> {
        let p = PolicyParams { weights };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.weights.len() != FEATURE_DIM {
            return Err(PolicyError::DimensionMismatch {
                expected: FEATURE_DIM,
                got: self.weights.len(),
            });
        }
        if let Some(i) = self.weights.iter().position(|w| !w.is_finite()) {
            return Err(PolicyError::NonFinite(i));
        }
        Ok(())
    }

    fn logit(&self, x: &FeatureVector) -> Result<f64, PolicyError> {
        if self.weights.len() != FEATURE_DIM {
            return Err(PolicyError::DimensionMismatch {
                expected: FEATURE_DIM,
                got: self.weights.len(),
            });
        }
        Ok(self.weights.iter().zip(x.0.iter()).map(|(w, v)| w * v).sum())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `σ(wᵀx)`, clamped away from 0 and 1.
pub fn prob_human(params: &PolicyParams, features: &FeatureVector) -> Result<f64, PolicyError> {
    Ok(clamp_prob(sigmoid(params.logit(features)?)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub choice: CollabChoice,
    pub prob_human: f64,
    pub prob_of_choice: f64,
}

impl PolicyDecision {
    pub fn from_prob(choice: CollabChoice, prob_human: f64) -> Self {
        let prob_of_choice = match choice {
            CollabChoice::Human => prob_human,
            CollabChoice::Agent => 1.0 - prob_human,
        };
        PolicyDecision {
            choice,
            prob_human,
            prob_of_choice,
        }
    }
}

/// Bernoulli draw with `p = prob_human`.
pub fn sample_choice<R: Rng + ?Sized>(
    params: &PolicyParams,
    state: &CollabState,
    rng: &mut R,
) -> Result<PolicyDecision, PolicyError> {
    let p = prob_human(params, &featurize(state))?;
    Ok(sample_with_prob(p, rng))
}

pub(crate) fn sample_with_prob<R: Rng + ?Sized>(p: f64, rng: &mut R) -> PolicyDecision {
    let u: f64 = rng.random();
    let choice = if u < p {
        CollabChoice::Human
    } else {
        CollabChoice::Agent
    };
    PolicyDecision::from_prob(choice, p)
}

/// Most likely choice; an exact tie goes to the agent.
pub fn greedy_choice(params: &PolicyParams, state: &CollabState) -> Result<PolicyDecision, PolicyError> {
    let p = prob_human(params, &featurize(state))?;
    let choice = if p > 0.5 {
        CollabChoice::Human
    } else {
        CollabChoice::Agent
    };
    Ok(PolicyDecision::from_prob(choice, p))
}

/// `log π(choice|s)` and its gradient `(𝟙[choice = human] - p)·x`.
pub fn log_prob_and_grad(
    params: &PolicyParams,
    features: &FeatureVector,
    choice: CollabChoice,
) -> Result<(f64, [f64; FEATURE_DIM]), PolicyError> {
    let p = prob_human(params, features)?;
    let (prob, indicator) = match choice {
        CollabChoice::Human => (p, 1.0),
        CollabChoice::Agent => (1.0 - p, 0.0),
    };
    let scale = indicator - p;
    let mut grad = [0.0; FEATURE_DIM];
    for (g, x) in grad.iter_mut().zip(features.0.iter()) {
        *g = scale * x;
    }
    Ok((prob.ln(), grad))
}

/// Bernoulli entropy and its gradient `-p(1-p)·ln(p/(1-p))·x`.
pub fn entropy_and_grad(
    params: &PolicyParams,
    features: &FeatureVector,
) -> Result<(f64, [f64; FEATURE_DIM]), PolicyError> {
    let p = prob_human(params, features)?;
    let q = 1.0 - p;
    let h = -p * p.ln() - q * q.ln();
    let scale = -p * q * (p / q).ln();
    let mut grad = [0.0; FEATURE_DIM];
    for (g, x) in grad.iter_mut().zip(features.0.iter()) {
        *g = scale * x;
    }
    Ok((h, grad))
}

/// HTTP endpoint serving an external collaboration policy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExternalPolicy {
    pub url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    10_000
}

impl ExternalPolicy {
    pub fn new(url: impl Into<String>) -> Self {
        ExternalPolicy {
            url: url.into(),
            timeout_ms: default_timeout_ms(),
        }
    }
}

/// Probability assigned to a hard choice returned by an external policy.
pub const HARD_CHOICE_HUMAN_PROB: f64 = 0.98;

/// Parses an external policy reply: a decimal probability, or a choice
/// token (`HUMAN`, `[Human]`, `AGENT`, `[Agent]`, `[ChatGPT]`).
pub fn parse_policy_reply(body: &str) -> Result<f64, PolicyError> {
    let text = body.trim();
    if let Ok(p) = text.parse::<f64>() {
        if (0.0..=1.0).contains(&p) {
            return Ok(clamp_prob(p));
        }
        return Err(PolicyError::Unparseable(text.to_string()));
    }
    let token = text.trim_matches(|c| c == '[' || c == ']').to_ascii_lowercase();
    match token.as_str() {
        "human" => Ok(HARD_CHOICE_HUMAN_PROB),
        "agent" | "chatgpt" => Ok(1.0 - HARD_CHOICE_HUMAN_PROB),
        _ => Err(PolicyError::Unparseable(text.to_string())),
    }
}

/// POSTs the canonical state text and parses the reply.
pub fn external_policy_prob(endpoint: &ExternalPolicy, state: &CollabState) -> Result<f64, PolicyError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(endpoint.timeout_ms)))
        .build()
        .into();
    let mut response = agent
        .post(&endpoint.url)
        .header("content-type", "text/plain; charset=utf-8")
        .send(state.canonical_text())
        .map_err(|e| PolicyError::Transport(e.to_string()))?;
    let body = response
        .body_mut()
        .read_to_string()
        .map_err(|e| PolicyError::Transport(e.to_string()))?;
    parse_policy_reply(&body)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::trajectory::{
        ActionKind, Gold, Observation, Step, TaskAction, TaskQuery,
    };

    fn query() -> Arc<TaskQuery> {
        Arc::new(
            TaskQuery::new("s", "find the value", Gold::Text("x".into()), DatasetTag::Synthetic, Some(6))
                .unwrap(),
        )
    }

    fn step(i: usize, c: CollabChoice, hint: SuccessHint) -> Step {
        Step {
            index: i,
            collab: c,
            action: TaskAction::new(ActionKind::Hop, "k1").unwrap(),
            observation: Observation::new("o", hint),
            executor_id: "e".into(),
            behavior_prob: 0.5,
        }
    }

    #[test]
    fn empty_history_features() {
        let x = featurize(&CollabState::initial(query()));
        assert_eq!(x.0[0], 1.0);
        assert_eq!(x.0[1], 0.0);
        assert_eq!(x.0[2], 0.0);
        assert_eq!(x.0[3], 0.0);
        assert_eq!(&x.0[4..7], &[0.0, 0.0, 0.0]);
        assert_eq!(x.0[7], 1.0);
        assert_eq!(x.0[14], 1.0);
        assert!(x.0.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn human_fraction_and_trailing_misses() {
        use CollabChoice::*;
        let mut state = CollabState::initial(query());
        let seq = [
            (Human, SuccessHint::Hit),
            (Agent, SuccessHint::Hit),
            (Human, SuccessHint::Miss),
            (Agent, SuccessHint::Miss),
            (Human, SuccessHint::Miss),
            (Agent, SuccessHint::Miss),
        ];
        for (i, (c, h)) in seq.into_iter().enumerate() {
            state.push(step(i + 1, c, h));
        }
        let x = featurize(&state);
        assert_eq!(x.0[2], 0.5);
        assert_eq!(x.0[3], 1.0);
        assert_eq!(x.0[5], 1.0);
        assert_eq!(x.0[7], 0.0);
        assert_eq!(featurize(&state), x);
    }

    #[test]
    fn prob_human_examples() {
        let x = featurize(&CollabState::initial(query()));
        assert_eq!(prob_human(&PolicyParams::zeros(), &x).unwrap(), 0.5);
        let mut w = PolicyParams::zeros();
        w.weights[0] = 1e6;
        assert_eq!(prob_human(&w, &x).unwrap(), 1.0 - PROB_CLAMP);
        let mut w = PolicyParams::zeros();
        // bias and tag one-hot are both 1 on the initial synthetic state
        w.weights[0] = 3f64.ln() / 2.0;
        w.weights[14] = 3f64.ln() / 2.0;
        let p = prob_human(&w, &x).unwrap();
        assert!((p - 0.75).abs() < 1e-12, "{p}");
        let bad = PolicyParams { weights: vec![0.0; 3] };
        assert!(matches!(
            prob_human(&bad, &x),
            Err(PolicyError::DimensionMismatch { expected: 15, got: 3 })
        ));
    }

    #[test]
    fn sampling_is_seeded_and_unbiased() {
        let state = CollabState::initial(query());
        let params = PolicyParams::zeros();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10_000)
                .map(|_| sample_choice(&params, &state, &mut rng).unwrap().choice)
                .collect::<Vec<_>>()
        };
        let a = draw(7);
        assert_eq!(a, draw(7));
        let humans = a.iter().filter(|c| **c == CollabChoice::Human).count();
        assert!((humans as f64 / 1e4 - 0.5).abs() < 0.02);

        let mut saturated = PolicyParams::zeros();
        saturated.weights[0] = 1e9;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let d = sample_choice(&saturated, &state, &mut rng).unwrap();
            assert!(d.prob_of_choice < 1.0);
        }
    }

    #[test]
    fn log_prob_at_zero_weights() {
        let x = featurize(&CollabState::initial(query()));
        let (lp, g) = log_prob_and_grad(&PolicyParams::zeros(), &x, CollabChoice::Human).unwrap();
        assert!((lp - 0.5f64.ln()).abs() < 1e-15);
        for (gi, xi) in g.iter().zip(x.0.iter()) {
            assert_eq!(*gi, 0.5 * xi);
        }
    }

    #[test]
    fn entropy_extremes() {
        let x = featurize(&CollabState::initial(query()));
        let (h, g) = entropy_and_grad(&PolicyParams::zeros(), &x).unwrap();
        assert!((h - 2f64.ln()).abs() < 1e-15);
        assert!(g.iter().all(|v| *v == 0.0));
        let mut w = PolicyParams::zeros();
        w.weights[0] = 1e6;
        let (h, _) = entropy_and_grad(&w, &x).unwrap();
        assert!(h < 1e-4);
    }

    #[test]
    fn reply_parsing() {
        assert_eq!(parse_policy_reply("HUMAN").unwrap(), 0.98);
        assert_eq!(parse_policy_reply("[Human]\n").unwrap(), 0.98);
        assert!((parse_policy_reply("[ChatGPT]").unwrap() - 0.02).abs() < 1e-12);
        assert_eq!(parse_policy_reply("0.37").unwrap(), 0.37);
        assert!(parse_policy_reply("1.7").is_err());
        assert!(parse_policy_reply("maybe").is_err());
    }
}
