//! Human-intervention rate and reward as the per-step human cost λ grows.

use handoff::actors::ActorPair;
use handoff::collector::{branch_complete, uniform_collect, CollectConfig};
use handoff::envs::{SuccessTable, SyntheticSuite};
use handoff::harness::{lambda_sweep, Bench, EvalPlan};
use handoff::trainer::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let suite = SyntheticSuite::generate(20, &[1, 2, 3], 0.0, SuccessTable::uniform(0.5, 1.0), 1, 8)?;
    let mut env = suite.env(0);
    let mut actors = ActorPair::scripted();
    let cfg = CollectConfig {
        seed: 2,
        ..CollectConfig::default()
    };
    let ds = uniform_collect(&suite.queries, &mut env, &mut actors, &cfg)?;
    let ds = branch_complete(&ds, &mut env, &mut actors, &cfg)?;

    let plan = |repeats, seed| EvalPlan {
        queries: suite.queries.clone(),
        lambda: 0.0,
        repeats,
        seed,
    };
    let mut bench = Bench {
        env: &mut env,
        actors: &mut actors,
        train: plan(3, 10),
        test: plan(10, 20),
    };
    let report = lambda_sweep(&ds, &[0.0, 0.05, 0.2, 1.0], &TrainConfig::default(), &mut bench)?;
    print!("{}", report.to_text());
    Ok(())
}
