//! Trained allocation policy against the fixed baselines on a mixed relay
//! suite (1 to 3 hops, some hard links).

use handoff::actors::ActorPair;
use handoff::choice::PolicySource;
use handoff::collector::{branch_complete, uniform_collect, CollectConfig};
use handoff::envs::{SuccessTable, SyntheticSuite};
use handoff::harness::{
    baseline_choice_source, evaluate, imitation_params, BaselineKind, Bench, EvalPlan, EvalReport, PromptSource,
    ScriptedPlanner, DEFAULT_STOCHASTIC_REPEATS,
};
use handoff::trainer::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let lambda = 0.08;
    let probs = SuccessTable {
        agent_easy: 0.9,
        agent_hard: 0.3,
        human_easy: 0.95,
        human_hard: 0.9,
    };
    let suite = SyntheticSuite::generate(20, &[1, 2, 3], 0.4, probs, 2, 5)?;
    let mut env = suite.env(0);
    let mut actors = ActorPair::scripted();
    let cfg = CollectConfig {
        per_query_budget: 14,
        lambda,
        seed: 1,
        ..CollectConfig::default()
    };
    let ds = uniform_collect(&suite.queries, &mut env, &mut actors, &cfg)?;
    let ds = branch_complete(&ds, &mut env, &mut actors, &cfg)?;
    println!("{}", ds.shape_report());

    let plan = |repeats, seed| EvalPlan {
        queries: suite.queries.clone(),
        lambda,
        repeats,
        seed,
    };
    let train_cfg = TrainConfig {
        lambda,
        alpha: 0.1,
        learning_rate: 1.0,
        max_steps: 1000,
        ..TrainConfig::default()
    };
    let mut bench = Bench {
        env: &mut env,
        actors: &mut actors,
        train: plan(5, 100),
        test: plan(10, 200),
    };
    let outcome = bench.train_policy(&ds, &train_cfg)?;
    let il = imitation_params(&ds, &train_cfg)?;

    let final_plan = plan(DEFAULT_STOCHASTIC_REPEATS * 100, 300);
    let mut report = EvalReport::new(lambda);
    for kind in BaselineKind::ALL {
        let prompt = PromptSource::new(
            Box::new(ScriptedPlanner::new(7, 0.1)),
            "scripted-planner",
            [ds.trajectories[0].canonical_text(), ds.trajectories[1].canonical_text()],
        );
        let mut src = baseline_choice_source(kind, Some(il.clone()), Some(prompt))?;
        report
            .rows
            .push(evaluate(kind.as_str(), src.as_mut(), bench.env, bench.actors, &final_plan)?);
    }
    let mut trained = PolicySource::greedy(outcome.params.clone());
    report
        .rows
        .push(evaluate("trained", &mut trained, bench.env, bench.actors, &final_plan)?);
    report.verify()?;
    print!("{}", report.to_text());
    Ok(())
}
