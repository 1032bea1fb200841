//! Baselines, evaluation reports, λ sweeps and learning-curve smoothing.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actors::{ActorPair, ChatClient, ChatMessage, ChatRequest};
use crate::choice::{Bernoulli, ChoiceError, ChoiceSource, Constant, Decision, PolicySource};
use crate::collector::{run_episode, BranchDataset, CollectError};
use crate::envs::Environment;
use crate::policy::PolicyParams;
use crate::rewards::hir;
use crate::seed::mix_seed;
use crate::trainer::{
    il_select_demonstrations, il_train, train, EvalPoint, LearningCurve, TrainConfig, TrainError,
};
use crate::trajectory::{ActionFamily, CollabChoice, CollabState, TaskQuery, Trajectory};

/// Identity tolerance for `R = T - λ·mean(C)` in reports.
pub const REPORT_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_STOCHASTIC_REPEATS: usize = 3;
pub const DEFAULT_SMOOTHING_WINDOW: usize = 15;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Collect(#[from] CollectError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    Invalid(String),
    #[error("report identity violated for {method}: R = {reward}, T - λC = {expected}")]
    Identity { method: String, reward: f64, expected: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    AgentOnly,
    HumanOnly,
    Random50,
    Prompt,
    Imitation,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::AgentOnly,
        BaselineKind::HumanOnly,
        BaselineKind::Random50,
        BaselineKind::Prompt,
        BaselineKind::Imitation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::AgentOnly => "agent_only",
            BaselineKind::HumanOnly => "human_only",
            BaselineKind::Random50 => "random50",
            BaselineKind::Prompt => "prompt",
            BaselineKind::Imitation => "imitation",
        }
    }

    /// Whether results vary between repeats on the same seed schedule.
    pub fn is_stochastic(self) -> bool {
        matches!(self, BaselineKind::Random50 | BaselineKind::Prompt)
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown baseline {s:?}"))
    }
}

/// Decision prompt with `${example1}`, `${example2}` and `${current trajectory}` slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub text: String,
}

const QA_TEMPLATE: &str = "You plan who takes each step of a task: ChatGPT or a human.

Below is a partial trajectory. Decide who should take the next step, judging how hard that step looks \
and how well the trajectory has gone so far. Two completed trajectories are shown for reference.
Example 1:
${example1}
Example 2:
${example2}
Guidelines:
1. Give ChatGPT steps that look routine. Ask for a human when the step looks hard or needs judgment.
2. If ChatGPT has been making progress, let it continue. If recent steps failed or went nowhere, consider a human.
3. Every human step is expensive, so only ask for one when it is likely to pay off.
Answer [ChatGPT] if ChatGPT should take the next step and [Human] otherwise. Answer with nothing else.

#Your unfinished trajectory#: ${current trajectory}
#Your return#: ";

const CODE_TEMPLATE: &str = "You plan who writes each SQL command of a task: ChatGPT or a human.

Below is a partial trajectory of SQL commands. Decide who should write the next command, judging how hard \
that command looks and how well the trajectory has gone so far. Two completed trajectories are shown for reference.
Example 1:
${example1}
Example 2:
${example2}
Guidelines:
1. Give ChatGPT commands that look routine. Ask for a human when the command looks hard or needs judgment.
2. If ChatGPT has been making progress, let it continue. If recent commands failed or returned the wrong rows, consider a human.
3. Every human command is expensive, so only ask for one when it is likely to pay off.
Answer [ChatGPT] if ChatGPT should write the next command and [Human] otherwise. Answer with nothing else.

#Your unfinished trajectory#: ${current trajectory}
#Your return#: ";

impl PromptTemplate {
    pub fn qa() -> Self {
        PromptTemplate { text: QA_TEMPLATE.into() }
    }

    pub fn code() -> Self {
        PromptTemplate {
            text: CODE_TEMPLATE.into(),
        }
    }

    pub fn for_family(family: ActionFamily) -> Self {
        match family {
            ActionFamily::Code => Self::code(),
            _ => Self::qa(),
        }
    }

    pub fn render(&self, examples: &[String; 2], current: &str) -> String {
        self.text
            .replace("${example1}", &examples[0])
            .replace("${example2}", &examples[1])
            .replace("${current trajectory}", current)
    }
}

/// First `[ChatGPT]` / `[Human]` token in a planner reply.
pub fn parse_planner_reply(text: &str) -> Option<CollabChoice> {
    let agent = text.find("[ChatGPT]");
    let human = text.find("[Human]");
    match (agent, human) {
        (Some(a), Some(h)) => Some(if a < h { CollabChoice::Agent } else { CollabChoice::Human }),
        (Some(_), None) => Some(CollabChoice::Agent),
        (None, Some(_)) => Some(CollabChoice::Human),
        (None, None) => None,
    }
}

/// Prompt-based allocation: a chat model answers `[ChatGPT]` or `[Human]`.
pub struct PromptSource {
    client: Box<dyn ChatClient>,
    model: String,
    examples: [String; 2],
    template: Option<PromptTemplate>,
}

impl PromptSource {
    pub fn new(client: Box<dyn ChatClient>, model: impl Into<String>, examples: [String; 2]) -> Self {
        PromptSource {
            client,
            model: model.into(),
            examples,
            template: None,
        }
    }

    /// Overrides the per-family default template.
    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.template = Some(template);
        self
    }

    pub fn prompt(&self, state: &CollabState) -> String {
        let template = self
            .template
            .clone()
            .unwrap_or_else(|| PromptTemplate::for_family(state.query.dataset_tag.family()));
        template.render(&self.examples, &state.canonical_text())
    }
}

impl ChoiceSource for PromptSource {
    fn decide(&mut self, state: &CollabState, _rng: &mut dyn RngCore) -> Result<Decision, ChoiceError> {
        let mut messages = vec![ChatMessage::user(self.prompt(state))];
        let mut last = String::new();
        for attempt in 0..2 {
            if attempt == 1 {
                messages.push(ChatMessage::assistant(last.clone()));
                messages.push(ChatMessage::user("Answer with exactly [ChatGPT] or [Human]."));
            }
            let request = ChatRequest {
                model: self.model.clone(),
                temperature: 0.0,
                messages: messages.clone(),
            };
            last = self.client.complete(&request).map_err(ChoiceError::Prompt)?;
            if let Some(choice) = parse_planner_reply(&last) {
                return Ok(Decision::certain(choice));
            }
        }
        Err(ChoiceError::Prompt(format!("no [ChatGPT] or [Human] token in {last:?}")))
    }
}

const FAILURE_MARKERS: &[&str] = &["No link found", "Could not find", "Error:", "No more results", "no page loaded"];

/// Offline stand-in for a planner model: asks for a human after a failed
/// step, otherwise for ChatGPT, flipping its answer with probability `noise`.
pub struct ScriptedPlanner {
    rng: ChaCha8Rng,
    noise: f64,
}

impl ScriptedPlanner {
    pub fn new(seed: u64, noise: f64) -> Self {
        ScriptedPlanner {
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise,
        }
    }
}

impl ChatClient for ScriptedPlanner {
    fn complete(&mut self, request: &ChatRequest) -> Result<String, String> {
        let prompt = &request.messages.first().ok_or("empty request")?.content;
        let current = prompt
            .rsplit_once("#Your unfinished trajectory#:")
            .map(|(_, t)| t)
            .unwrap_or(prompt);
        let last_obs = current.lines().rev().find_map(|l| l.strip_prefix("Observation: ")).unwrap_or("");
        let failed = FAILURE_MARKERS.iter().any(|m| last_obs.contains(m));
        let flip = self.rng.random::<f64>() < self.noise;
        Ok(if failed != flip { "[Human]" } else { "[ChatGPT]" }.to_string())
    }
}

/// Choice source for a baseline. `imitation` needs IL-trained params and
/// `prompt` needs a prompt source.
pub fn baseline_choice_source(
    kind: BaselineKind,
    imitation: Option<PolicyParams>,
    prompt: Option<PromptSource>,
) -> Result<Box<dyn ChoiceSource>, HarnessError> {
    Ok(match kind {
        BaselineKind::AgentOnly => Box::new(Constant(CollabChoice::Agent)),
        BaselineKind::HumanOnly => Box::new(Constant(CollabChoice::Human)),
        BaselineKind::Random50 => Box::new(Bernoulli { p_human: 0.5 }),
        BaselineKind::Prompt => Box::new(
            prompt.ok_or_else(|| HarnessError::Invalid("prompt baseline needs a planner client".into()))?,
        ),
        BaselineKind::Imitation => Box::new(PolicySource::greedy(
            imitation.ok_or_else(|| HarnessError::Invalid("imitation baseline needs trained params".into()))?,
        )),
    })
}

/// Imitation-learning params from the better branch at every state.
pub fn imitation_params(ds: &BranchDataset, cfg: &TrainConfig) -> Result<PolicyParams, HarnessError> {
    let demos = il_select_demonstrations(ds, cfg)?;
    Ok(il_train(&demos, cfg)?)
}

/// Per-episode quantities kept for identity checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub query_id: String,
    pub repeat: usize,
    pub steps: usize,
    pub interventions: usize,
    pub task_reward: f64,
    pub reward: f64,
}

/// One method's aggregate, on the 0–1 scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub episodes: usize,
    pub hir: f64,
    pub task_reward: f64,
    pub mean_interventions: f64,
    pub reward: f64,
    pub episode_log: Vec<EpisodeSummary>,
}

impl EvalRow {
    pub fn hir_pct(&self) -> f64 {
        self.hir * 100.0
    }

    pub fn task_reward_x100(&self) -> f64 {
        self.task_reward * 100.0
    }

    pub fn reward_x100(&self) -> f64 {
        self.reward * 100.0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub lambda: f64,
    pub rows: Vec<EvalRow>,
}

/// Queries, seeds and repeat count shared by every method in a comparison.
#[derive(Clone, Debug)]
pub struct EvalPlan {
    pub queries: Vec<Arc<TaskQuery>>,
    pub lambda: f64,
    pub repeats: usize,
    pub seed: u64,
}

/// Runs one episode per query per repeat. Episode `(i, r)` uses seed
/// `mix(seed, i, r)` for every method, so methods face the same hop draws.
pub fn evaluate(
    method: &str,
    source: &mut dyn ChoiceSource,
    env: &mut dyn Environment,
    actors: &mut ActorPair,
    plan: &EvalPlan,
) -> Result<EvalRow, HarnessError> {
    if plan.queries.is_empty() || plan.repeats == 0 {
        return Err(HarnessError::Invalid("evaluation needs queries and at least one repeat".into()));
    }
    let mut log = Vec::with_capacity(plan.queries.len() * plan.repeats);
    for r in 0..plan.repeats {
        for (i, q) in plan.queries.iter().enumerate() {
            let seed = mix_seed(plan.seed, i as u64, r as u64);
            let t: Trajectory = run_episode(env, actors, source, q, seed, plan.lambda)?;
            log.push(EpisodeSummary {
                query_id: q.id.clone(),
                repeat: r,
                steps: t.steps.len(),
                interventions: t.intervention_count,
                task_reward: t.task_reward,
                reward: t.reward,
            });
        }
    }
    Ok(aggregate(method, plan.lambda, log))
}

fn aggregate(method: &str, lambda: f64, log: Vec<EpisodeSummary>) -> EvalRow {
    let n = log.len() as f64;
    let humans: usize = log.iter().map(|e| e.interventions).sum();
    let steps: usize = log.iter().map(|e| e.steps).sum();
    let task_reward = log.iter().map(|e| e.task_reward).sum::<f64>() / n;
    let mean_interventions = humans as f64 / n;
    EvalRow {
        method: method.to_string(),
        episodes: log.len(),
        hir: hir(humans, steps - humans).unwrap_or(0.0),
        task_reward,
        mean_interventions,
        reward: task_reward - lambda * mean_interventions,
        episode_log: log,
    }
}

impl EvalReport {
    pub fn new(lambda: f64) -> Self {
        EvalReport {
            lambda,
            rows: Vec::new(),
        }
    }

    pub fn row(&self, method: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Checks `R = T - λ·mean(C)` for every row on the ×100 scale, and
    /// that each row matches a fresh recomputation from its episode log.
    pub fn verify(&self) -> Result<(), HarnessError> {
        for row in &self.rows {
            let expected = row.task_reward_x100() - self.lambda * row.mean_interventions * 100.0;
            let from_log = aggregate(&row.method, self.lambda, row.episode_log.clone());
            let mean_r = row.episode_log.iter().map(|e| e.reward).sum::<f64>() / row.episodes as f64;
            for other in [expected, from_log.reward_x100(), mean_r * 100.0] {
                if (row.reward_x100() - other).abs() > REPORT_TOLERANCE {
                    return Err(HarnessError::Identity {
                        method: row.method.clone(),
                        reward: row.reward_x100(),
                        expected: other,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
        let mut out = format!(
            "lambda = {}\n{:<width$}  {:>8}  {:>8}  {:>8}  {:>7}  {:>7}  {:>8}\n",
            self.lambda, "Method", "HIR(%)", "T", "R", "T(0-1)", "R(0-1)", "episodes"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8.2}  {:>8.2}  {:>8.2}  {:>7.4}  {:>7.4}  {:>8}",
                r.method,
                r.hir_pct(),
                r.task_reward_x100(),
                r.reward_x100(),
                r.task_reward,
                r.reward,
                r.episodes
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "method",
            "lambda",
            "episodes",
            "hir",
            "task_reward",
            "reward",
            "mean_interventions",
            "hir_pct",
            "task_reward_x100",
            "reward_x100",
        ])
        .expect("in-memory csv");
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                self.lambda.to_string(),
                r.episodes.to_string(),
                r.hir.to_string(),
                r.task_reward.to_string(),
                r.reward.to_string(),
                r.mean_interventions.to_string(),
                r.hir_pct().to_string(),
                r.task_reward_x100().to_string(),
                r.reward_x100().to_string(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8 csv")
    }
}

/// Environment, executors and query sets used while training and evaluating.
pub struct Bench<'a> {
    pub env: &'a mut dyn Environment,
    pub actors: &'a mut ActorPair,
    pub train: EvalPlan,
    pub test: EvalPlan,
}

impl Bench<'_> {
    /// Greedy evaluation of `params` on both query sets under `lambda`.
    pub fn eval_point(&mut self, params: &PolicyParams, lambda: f64) -> Result<EvalPoint, TrainError> {
        let mut src = PolicySource::greedy(params.clone());
        let train = EvalPlan {
            lambda,
            ..self.train.clone()
        };
        let test = EvalPlan {
            lambda,
            ..self.test.clone()
        };
        let a = evaluate("train", &mut src, self.env, self.actors, &train).map_err(|e| TrainError::Eval(e.to_string()))?;
        let b = evaluate("test", &mut src, self.env, self.actors, &test).map_err(|e| TrainError::Eval(e.to_string()))?;
        Ok(EvalPoint {
            train_reward: a.reward,
            test_reward: b.reward,
            train_hir: a.hir,
            test_hir: b.hir,
        })
    }

    /// Trains on `ds` rescored under `cfg.lambda`, evaluating on the way.
    pub fn train_policy(
        &mut self,
        ds: &BranchDataset,
        cfg: &TrainConfig,
    ) -> Result<crate::trainer::TrainOutcome, HarnessError> {
        let ds = ds.rescored(cfg.lambda);
        let lambda = cfg.lambda;
        Ok(train(&ds, cfg, &mut |p| self.eval_point(p, lambda))?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub hir: f64,
    pub task_reward: f64,
    pub reward: f64,
    pub best_step: usize,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn hir_series(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.hir).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:>8}  {:>8}  {:>8}  {:>8}\n", "lambda", "HIR(%)", "T", "R");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>8}  {:>8.2}  {:>8.2}  {:>8.2}",
                r.lambda,
                r.hir * 100.0,
                r.task_reward * 100.0,
                r.reward * 100.0
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,hir,task_reward,reward,best_step\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.lambda, r.hir, r.task_reward, r.reward, r.best_step);
        }
        out
    }
}

/// One policy per λ on the same dataset, each evaluated on the test plan.
pub fn lambda_sweep(
    ds: &BranchDataset,
    lambdas: &[f64],
    cfg: &TrainConfig,
    bench: &mut Bench<'_>,
) -> Result<SweepReport, HarnessError> {
    if lambdas.len() < 2 {
        return Err(HarnessError::Invalid("a sweep needs at least two lambda values".into()));
    }
    let mut report = SweepReport::default();
    for &lambda in lambdas {
        let cfg = TrainConfig {
            lambda,
            ..cfg.clone()
        };
        let outcome = bench.train_policy(ds, &cfg)?;
        let plan = EvalPlan {
            lambda,
            ..bench.test.clone()
        };
        let row = evaluate(
            &format!("lambda={lambda}"),
            &mut PolicySource::greedy(outcome.params.clone()),
            bench.env,
            bench.actors,
            &plan,
        )?;
        report.rows.push(SweepRow {
            lambda,
            hir: row.hir,
            task_reward: row.task_reward,
            reward: row.reward,
            best_step: outcome.best_step,
            weights: outcome.params.weights,
        });
    }
    Ok(report)
}

/// Trailing mean and variance over the last `min(window, available)` values.
pub fn smooth(values: &[f64], window: usize) -> Vec<(f64, f64)> {
    let mut buf: VecDeque<f64> = VecDeque::with_capacity(window);
    values
        .iter()
        .map(|&v| {
            if buf.len() == window {
                buf.pop_front();
            }
            buf.push_back(v);
            let n = buf.len() as f64;
            let mean = buf.iter().sum::<f64>() / n;
            let var = buf.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            (mean, var)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothedPoint {
    pub step: usize,
    pub train_reward: (f64, f64),
    pub test_reward: (f64, f64),
    pub train_hir: (f64, f64),
    pub test_hir: (f64, f64),
}

/// Smoothed curve: `(mean, variance)` per series at every step.
pub fn curve_report(curve: &LearningCurve, window: usize) -> Result<Vec<SmoothedPoint>, HarnessError> {
    if window == 0 {
        return Err(HarnessError::Invalid("window must be >= 1".into()));
    }
    if curve.points.is_empty() {
        return Err(HarnessError::Invalid("empty learning curve".into()));
    }
    let series = |f: fn(&crate::trainer::CurvePoint) -> f64| smooth(&curve.points.iter().map(f).collect::<Vec<_>>(), window);
    let (a, b, c, d) = (
        series(|p| p.train_reward),
        series(|p| p.test_reward),
        series(|p| p.train_hir),
        series(|p| p.test_hir),
    );
    Ok(curve
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| SmoothedPoint {
            step: p.step,
            train_reward: a[i],
            test_reward: b[i],
            train_hir: c[i],
            test_hir: d[i],
        })
        .collect())
}

pub fn smoothed_csv(points: &[SmoothedPoint]) -> String {
    let mut out = String::from(
        "step,train_reward,train_reward_var,test_reward,test_reward_var,train_hir,train_hir_var,test_hir,test_hir_var\n",
    );
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            p.step,
            p.train_reward.0,
            p.train_reward.1,
            p.test_reward.0,
            p.test_reward.1,
            p.train_hir.0,
            p.train_hir.1,
            p.test_hir.0,
            p.test_hir.1
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{synth_generate, Difficulty, SuccessTable, SyntheticSuite};
    use crate::trainer::CurvePoint;

    fn suite(p_agent: f64, p_human: f64) -> SyntheticSuite {
        let (q, t) = synth_generate(2, &[Difficulty::Easy; 2], SuccessTable::uniform(p_agent, p_human), 3, 2).unwrap();
        SyntheticSuite::single(q, t)
    }

    fn plan(s: &SyntheticSuite, lambda: f64, repeats: usize) -> EvalPlan {
        EvalPlan {
            queries: s.queries.clone(),
            lambda,
            repeats,
            seed: 9,
        }
    }

    #[test]
    fn agent_only_with_perfect_agent() {
        let s = suite(1.0, 1.0);
        let mut env = s.env(0);
        let mut actors = ActorPair::scripted();
        let mut src = baseline_choice_source(BaselineKind::AgentOnly, None, None).unwrap();
        let mut report = EvalReport::new(0.08);
        report
            .rows
            .push(evaluate("agent_only", src.as_mut(), &mut env, &mut actors, &plan(&s, 0.08, 2)).unwrap());
        let row = report.row("agent_only").unwrap();
        assert_eq!((row.task_reward_x100(), row.reward_x100(), row.hir), (100.0, 100.0, 0.0));
        report.verify().unwrap();
        assert!(report.to_text().contains("agent_only"));
        assert!(report.to_csv().starts_with("method,lambda"));
    }

    #[test]
    fn human_only_costs_more_when_lambda_is_large() {
        let s = suite(0.5, 1.0);
        let mut env = s.env(0);
        let mut actors = ActorPair::scripted();
        let p = plan(&s, 1.0, 20);
        let agent = evaluate("a", &mut Constant(CollabChoice::Agent), &mut env, &mut actors, &p).unwrap();
        let human = evaluate("h", &mut Constant(CollabChoice::Human), &mut env, &mut actors, &p).unwrap();
        assert_eq!(human.hir, 1.0);
        assert!(human.reward < agent.reward);
    }

    #[test]
    fn planner_reply_grammar() {
        assert_eq!(parse_planner_reply("[Human]"), Some(CollabChoice::Human));
        assert_eq!(parse_planner_reply("I pick [ChatGPT]."), Some(CollabChoice::Agent));
        assert_eq!(parse_planner_reply("human"), None);
        let t = PromptTemplate::qa().render(&["E1".into(), "E2".into()], "CUR");
        assert!(t.contains("Example 1:\nE1") && t.contains("#Your unfinished trajectory#: CUR"));
        assert!(!t.contains("${"));
    }

    #[test]
    fn prompt_source_reasks_then_fails() {
        struct Mute;
        impl ChatClient for Mute {
            fn complete(&mut self, _r: &ChatRequest) -> Result<String, String> {
                Ok("not sure".into())
            }
        }
        let s = suite(0.5, 1.0);
        let mut src = PromptSource::new(Box::new(Mute), "m", ["a".into(), "b".into()]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(src.decide(&CollabState::initial(Arc::clone(&s.queries[0])), &mut rng).is_err());
    }

    #[test]
    fn random50_rate() {
        let s = suite(0.5, 0.5);
        let mut env = s.env(0);
        let mut actors = ActorPair::scripted();
        let mut src = baseline_choice_source(BaselineKind::Random50, None, None).unwrap();
        let row = evaluate("r", src.as_mut(), &mut env, &mut actors, &plan(&s, 0.1, 3500)).unwrap();
        let steps: usize = row.episode_log.iter().map(|e| e.steps).sum();
        assert!(steps >= 10_000);
        assert!((row.hir - 0.5).abs() < 0.02, "{}", row.hir);
    }

    #[test]
    fn smoothing() {
        let constant = smooth(&[2.0; 6], 15);
        assert!(constant.iter().all(|&(m, v)| m == 2.0 && v == 0.0));
        let ramp = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(smooth(&ramp, 1).iter().map(|p| p.0).collect::<Vec<_>>(), ramp);
        let means: Vec<f64> = smooth(&ramp, 3).iter().map(|p| p.0).collect();
        assert_eq!(means, [1.0, 1.5, 2.0, 3.0, 4.0]);
        let curve = LearningCurve {
            points: vec![CurvePoint {
                step: 0,
                train_reward: 0.5,
                test_reward: 0.4,
                train_hir: 0.1,
                test_hir: 0.2,
            }],
        };
        assert_eq!(curve_report(&curve, 15).unwrap()[0].test_reward, (0.4, 0.0));
        assert!(curve_report(&LearningCurve::default(), 15).is_err());
    }
}
