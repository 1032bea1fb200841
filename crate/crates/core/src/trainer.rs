//! Offline training of the allocation policy: clipped importance-weighted
//! policy gradient on per-state advantages with an entropy bonus, and the
//! imitation baseline that fits the better branch at every state.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collector::BranchDataset;
use crate::policy::{
    entropy_and_grad, featurize, log_prob_and_grad, prob_human, FeatureVector, PolicyError, PolicyParams,
    FEATURE_DIM, FEATURE_LAYOUT_VERSION,
};
use crate::rewards::{monte_carlo_returns, state_advantage, LambdaConfig, RewardError, ReturnTable};
use crate::trajectory::{CollabChoice, StateKey};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no state in the dataset has both branches sampled")]
    NoUsableStates,
    #[error("behavior probability must be positive, got {0}")]
    ZeroBehaviorProb(f64),
    #[error("non-finite gradient from batch sample {index} (state {state})")]
    NonFiniteGradient { index: usize, state: StateKey },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("evaluation failed: {0}")]
    Eval(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    /// Importance weights are clipped to `[1 - epsilon, 1 + epsilon]`.
    pub epsilon: f64,
    /// Entropy bonus coefficient.
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub eval_every: usize,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.08,
            epsilon: 0.3,
            alpha: 0.0,
            learning_rate: 0.05,
            batch_size: 64,
            eval_every: 5,
            max_steps: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon {} outside (0,1)", self.epsilon));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be >= 0", self.lambda));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha {} must be >= 0", self.alpha));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be >= 1".into());
        }
        Ok(())
    }
}

/// One (state, choice) pair with its behavior probability and advantage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSample {
    pub state_key: StateKey,
    pub features: FeatureVector,
    pub choice: CollabChoice,
    pub behavior_prob: f64,
    pub advantage: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSamples {
    pub samples: Vec<TrainSample>,
    /// States skipped because only one branch was sampled.
    pub dropped_states: usize,
}

/// Mean recorded behavior probability per (state, choice), over the steps
/// each trajectory actually sampled.
fn behavior_probs(ds: &BranchDataset) -> BTreeMap<(StateKey, CollabChoice), f64> {
    let mut acc: BTreeMap<(StateKey, CollabChoice), Vec<f64>> = BTreeMap::new();
    for t in &ds.trajectories {
        for (i, step) in t.steps.iter().enumerate().skip(t.branch_step - 1) {
            let key = t.state_at(i + 1).expect("prefix within trajectory").key();
            acc.entry((key, step.collab)).or_default().push(step.behavior_prob);
        }
    }
    acc.into_iter()
        .map(|(k, mut v)| {
            v.sort_by(f64::total_cmp);
            let n = v.len() as f64;
            (k, v.iter().sum::<f64>() / n)
        })
        .collect()
}

/// Returns under `cfg.lambda`, then one sample per sampled branch at every
/// state with both branches.
pub fn build_train_samples(ds: &BranchDataset, cfg: &TrainConfig) -> Result<TrainSamples, TrainError> {
    let table = monte_carlo_returns(&ds.trajectories, LambdaConfig::new(cfg.lambda)?);
    let probs = behavior_probs(ds);
    let mut samples = Vec::new();
    let mut dropped = 0;
    for (key, returns) in table.iter() {
        let adv = match state_advantage(key, returns) {
            Ok(a) => a,
            Err(RewardError::SingleBranch(_)) => {
                dropped += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let features = featurize(table.state(key).expect("state recorded with its key"));
        for choice in CollabChoice::BOTH {
            samples.push(TrainSample {
                state_key: key.clone(),
                features,
                choice,
                behavior_prob: probs[&(key.clone(), choice)],
                advantage: adv.get(choice),
            });
        }
    }
    if samples.is_empty() {
        return Err(TrainError::NoUsableStates);
    }
    Ok(TrainSamples {
        samples,
        dropped_states: dropped,
    })
}

/// `clamp(p_new / p_beh, 1 - ε, 1 + ε)`.
pub fn importance_weight(p_new: f64, p_beh: f64, epsilon: f64) -> Result<f64, TrainError> {
    if p_beh.is_nan() || p_beh <= 0.0 {
        return Err(TrainError::ZeroBehaviorProb(p_beh));
    }
    Ok((p_new / p_beh).clamp(1.0 - epsilon, 1.0 + epsilon))
}

fn choice_prob(params: &PolicyParams, x: &FeatureVector, choice: CollabChoice) -> Result<f64, TrainError> {
    let p = prob_human(params, x)?;
    Ok(match choice {
        CollabChoice::Human => p,
        CollabChoice::Agent => 1.0 - p,
    })
}

/// Batch-mean of `w·A·∇log π + α∇H`.
pub fn policy_gradient(
    params: &PolicyParams,
    batch: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<[f64; FEATURE_DIM], TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut g = [0.0; FEATURE_DIM];
    for (index, s) in batch.iter().enumerate() {
        let w = importance_weight(choice_prob(params, &s.features, s.choice)?, s.behavior_prob, cfg.epsilon)?;
        let (_, glp) = log_prob_and_grad(params, &s.features, s.choice)?;
        let (_, gh) = entropy_and_grad(params, &s.features)?;
        let mut term = [0.0; FEATURE_DIM];
        for j in 0..FEATURE_DIM {
            term[j] = w * s.advantage * glp[j] + cfg.alpha * gh[j];
        }
        if term.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                index,
                state: s.state_key.clone(),
            });
        }
        for j in 0..FEATURE_DIM {
            g[j] += term[j];
        }
    }
    let n = batch.len() as f64;
    Ok(g.map(|v| v / n))
}

/// One ascent step: `params + lr·g`.
pub fn gradient_step(params: &PolicyParams, batch: &[TrainSample], cfg: &TrainConfig) -> Result<PolicyParams, TrainError> {
    let g = policy_gradient(params, batch, cfg)?;
    let weights = params
        .weights
        .iter()
        .zip(g.iter())
        .map(|(w, d)| w + cfg.learning_rate * d)
        .collect();
    Ok(PolicyParams::new(weights)?)
}

/// Importance-sampled estimate of the batch objective,
/// `mean[π(a|s)/π_beh·A + αH]`; the quantity gradient steps climb.
pub fn surrogate_objective(params: &PolicyParams, batch: &[TrainSample], cfg: &TrainConfig) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for s in batch {
        let ratio = choice_prob(params, &s.features, s.choice)? / s.behavior_prob;
        let (h, _) = entropy_and_grad(params, &s.features)?;
        total += ratio * s.advantage + cfg.alpha * h;
    }
    Ok(total / batch.len() as f64)
}

/// Rewards and intervention rates measured at one evaluation point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub train_reward: f64,
    pub test_reward: f64,
    pub train_hir: f64,
    pub test_hir: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub train_reward: f64,
    pub test_reward: f64,
    pub train_hir: f64,
    pub test_hir: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    pub fn push(&mut self, step: usize, p: EvalPoint) {
        debug_assert!(self.points.last().is_none_or(|last| last.step < step));
        self.points.push(CurvePoint {
            step,
            train_reward: p.train_reward,
            test_reward: p.test_reward,
            train_hir: p.train_hir,
            test_hir: p.test_hir,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,train_reward,test_reward,train_hir,test_hir\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                p.step, p.train_reward, p.test_reward, p.train_hir, p.test_hir
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Snapshot with the best test reward (earliest on ties).
    pub params: PolicyParams,
    pub best_step: usize,
    pub final_params: PolicyParams,
    pub curve: LearningCurve,
    pub dropped_states: usize,
    pub sample_count: usize,
}

/// Runs `max_steps` gradient steps over shuffled minibatches. `eval` is
/// called on the initial parameters, every `eval_every` steps, and after
/// the last step.
pub fn train(
    ds: &BranchDataset,
    cfg: &TrainConfig,
    eval: &mut dyn FnMut(&PolicyParams) -> Result<EvalPoint, TrainError>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let TrainSamples {
        samples,
        dropped_states,
    } = build_train_samples(ds, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut params = PolicyParams::zeros();
    let mut curve = LearningCurve::default();
    let first = eval(&params)?;
    curve.push(0, first);
    let (mut best, mut best_step, mut best_reward) = (params.clone(), 0, first.test_reward);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 1..=cfg.max_steps {
        batch.clear();
        while batch.len() < cfg.batch_size.min(samples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(samples[order[cursor]].clone());
            cursor += 1;
        }
        params = gradient_step(&params, &batch, cfg)?;
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let point = eval(&params)?;
            curve.push(step, point);
            if point.test_reward > best_reward {
                best = params.clone();
                best_step = step;
                best_reward = point.test_reward;
            }
        }
    }
    Ok(TrainOutcome {
        params: best,
        best_step,
        final_params: params,
        curve,
        dropped_states,
        sample_count: samples.len(),
    })
}

/// Trained weights with the layout and configuration they came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub feature_layout_version: u32,
    pub weights: Vec<f64>,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn new(params: &PolicyParams, config: &TrainConfig) -> Self {
        Checkpoint {
            feature_layout_version: FEATURE_LAYOUT_VERSION,
            weights: params.weights.clone(),
            config: config.clone(),
        }
    }

    pub fn params(&self) -> Result<PolicyParams, TrainError> {
        Ok(PolicyParams::new(self.weights.clone())?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        std::fs::write(path, text + "\n").map_err(|e| TrainError::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let err = |message: String| TrainError::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if ck.feature_layout_version != FEATURE_LAYOUT_VERSION {
            return Err(err(format!(
                "feature layout {} does not match {FEATURE_LAYOUT_VERSION}",
                ck.feature_layout_version
            )));
        }
        ck.params()?;
        Ok(ck)
    }
}

/// A state and the choice imitation learning should reproduce there.
#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub state_key: StateKey,
    pub features: FeatureVector,
    pub choice: CollabChoice,
}

/// Top half of the sampled choices per state by mean return; with two
/// choices this is the better branch, ties going to the agent.
pub fn il_select_from_table(table: &ReturnTable) -> Vec<Demonstration> {
    let mut out = Vec::new();
    for (key, returns) in table.iter() {
        let mut ranked: Vec<(CollabChoice, f64)> = returns.sampled().map(|(c, e)| (c, e.mean_return)).collect();
        // stable sort keeps AGENT ahead of HUMAN on ties
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        let keep = ranked.len().div_ceil(2);
        let features = featurize(table.state(key).expect("state recorded with its key"));
        for (choice, _) in ranked.into_iter().take(keep) {
            out.push(Demonstration {
                state_key: key.clone(),
                features,
                choice,
            });
        }
    }
    out
}

pub fn il_select_demonstrations(ds: &BranchDataset, cfg: &TrainConfig) -> Result<Vec<Demonstration>, TrainError> {
    let table = monte_carlo_returns(&ds.trajectories, LambdaConfig::new(cfg.lambda)?);
    Ok(il_select_from_table(&table))
}

/// Mean log-likelihood of the demonstrated choices.
pub fn il_log_likelihood(params: &PolicyParams, demos: &[Demonstration]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for d in demos {
        total += log_prob_and_grad(params, &d.features, d.choice)?.0;
    }
    Ok(total / demos.len() as f64)
}

/// Maximum-likelihood fit of the demonstrations by minibatch gradient ascent.
pub fn il_train(demos: &[Demonstration], cfg: &TrainConfig) -> Result<PolicyParams, TrainError> {
    cfg.validate()?;
    if demos.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..demos.len()).collect();
    let mut cursor = order.len();
    let mut params = PolicyParams::zeros();
    let size = cfg.batch_size.min(demos.len());
    for _ in 0..cfg.max_steps {
        let mut g = [0.0; FEATURE_DIM];
        for _ in 0..size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let d = &demos[order[cursor]];
            cursor += 1;
            let (_, grad) = log_prob_and_grad(&params, &d.features, d.choice)?;
            for j in 0..FEATURE_DIM {
                g[j] += grad[j];
            }
        }
        for j in 0..FEATURE_DIM {
            params.weights[j] += cfg.learning_rate * g[j] / size as f64;
        }
    }
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::advantage;

    fn sample(x0: f64, choice: CollabChoice, advantage: f64) -> TrainSample {
        let mut x = [0.0; FEATURE_DIM];
        x[0] = 1.0;
        x[1] = x0;
        TrainSample {
            state_key: StateKey::from_text(&format!("{x0}")),
            features: FeatureVector(x),
            choice,
            behavior_prob: 0.5,
            advantage,
        }
    }

    #[test]
    fn clip_examples() {
        assert!((importance_weight(1.0, 0.5, 0.3).unwrap() - 1.3).abs() < 1e-15);
        assert!((importance_weight(0.1, 0.5, 0.3).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(importance_weight(0.5, 0.5, 0.3).unwrap(), 1.0);
        assert!(importance_weight(0.5, 0.0, 0.3).is_err());
    }

    #[test]
    fn zero_advantage_without_entropy_is_identity() {
        let cfg = TrainConfig::default();
        let batch = vec![sample(0.2, CollabChoice::Agent, 0.0), sample(0.4, CollabChoice::Human, 0.0)];
        let p = PolicyParams::new((0..FEATURE_DIM).map(|i| i as f64 * 0.01).collect()).unwrap();
        assert_eq!(gradient_step(&p, &batch, &cfg).unwrap(), p);
    }

    #[test]
    fn single_sample_direction_is_score_times_advantage() {
        let cfg = TrainConfig::default();
        let s = sample(0.5, CollabChoice::Human, 0.4);
        let p = PolicyParams::zeros();
        let g = policy_gradient(&p, std::slice::from_ref(&s), &cfg).unwrap();
        let (_, glp) = log_prob_and_grad(&p, &s.features, s.choice).unwrap();
        for j in 0..FEATURE_DIM {
            assert!((g[j] - 0.4 * glp[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn entropy_alone_pulls_toward_half() {
        let cfg = TrainConfig {
            alpha: 0.1,
            learning_rate: 0.5,
            ..TrainConfig::default()
        };
        let batch = vec![sample(0.3, CollabChoice::Agent, 0.0)];
        let mut p = PolicyParams::zeros();
        p.weights[0] = 2.0;
        let before = (prob_human(&p, &batch[0].features).unwrap() - 0.5).abs();
        for _ in 0..20 {
            p = gradient_step(&p, &batch, &cfg).unwrap();
        }
        let after = (prob_human(&p, &batch[0].features).unwrap() - 0.5).abs();
        assert!(after < before);
    }

    #[test]
    fn surrogate_increases() {
        let cfg = TrainConfig::default();
        let mut batch = Vec::new();
        for i in 0..8 {
            let x = i as f64 / 8.0;
            let a = advantage(x, 1.0 - x);
            batch.push(sample(x, CollabChoice::Agent, a.agent));
            batch.push(sample(x, CollabChoice::Human, a.human));
        }
        let mut p = PolicyParams::zeros();
        let before = surrogate_objective(&p, &batch, &cfg).unwrap();
        for _ in 0..50 {
            p = gradient_step(&p, &batch, &cfg).unwrap();
        }
        assert!(surrogate_objective(&p, &batch, &cfg).unwrap() > before);
    }

    #[test]
    fn non_finite_gradient_names_sample() {
        let cfg = TrainConfig::default();
        let batch = vec![sample(0.1, CollabChoice::Agent, 0.1), sample(0.2, CollabChoice::Agent, f64::NAN)];
        match gradient_step(&PolicyParams::zeros(), &batch, &cfg) {
            Err(TrainError::NonFiniteGradient { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn il_fits_degenerate_and_separable_sets() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            max_steps: 400,
            ..TrainConfig::default()
        };
        let demos: Vec<Demonstration> = (0..10)
            .map(|i| {
                let s = sample(i as f64 / 10.0, CollabChoice::Agent, 0.0);
                Demonstration {
                    state_key: s.state_key,
                    features: s.features,
                    choice: CollabChoice::Agent,
                }
            })
            .collect();
        let p = il_train(&demos, &cfg).unwrap();
        assert!(demos.iter().all(|d| prob_human(&p, &d.features).unwrap() < 0.1));
        assert_eq!(il_train(&demos, &cfg).unwrap(), p);

        let separable: Vec<Demonstration> = (0..20)
            .map(|i| {
                let x = i as f64 / 20.0;
                let choice = if x < 0.5 { CollabChoice::Agent } else { CollabChoice::Human };
                let s = sample(x, choice, 0.0);
                Demonstration {
                    state_key: s.state_key,
                    features: s.features,
                    choice,
                }
            })
            .collect();
        let cfg = TrainConfig {
            max_steps: 3000,
            ..cfg
        };
        let p = il_train(&separable, &cfg).unwrap();
        let correct = separable
            .iter()
            .filter(|d| (prob_human(&p, &d.features).unwrap() > 0.5) == (d.choice == CollabChoice::Human))
            .count();
        assert!(correct as f64 / separable.len() as f64 >= 0.95, "{correct}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let params = PolicyParams::new((0..FEATURE_DIM).map(|i| (i as f64).sin()).collect()).unwrap();
        let ck = Checkpoint::new(&params, &TrainConfig::default());
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params().unwrap(), params);
    }
}
