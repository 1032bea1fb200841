//! Two-hop relay task where the optimal allocation is known in closed form.
//! Collects branch-completed rollouts, trains a policy, and compares its
//! evaluation reward with the brute-force optimum.

use std::sync::Arc;
use std::time::Instant;

use handoff::actors::ActorPair;
use handoff::collector::{branch_complete, uniform_collect, CollectConfig};
use handoff::envs::{brute_force_optimal, synth_generate, Difficulty, SuccessTable, SyntheticSuite};
use handoff::harness::{evaluate, Bench, EvalPlan};
use handoff::choice::PolicySource;
use handoff::trainer::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let lambda = 0.1;
    let (query, task) = synth_generate(2, &[Difficulty::Easy; 2], SuccessTable::uniform(0.5, 1.0), 2, 1)?;
    let optimum = brute_force_optimal(&task, lambda, 2)?;
    println!("optimal sequence {:?}, expected R = {:.4}", optimum.choices, optimum.expected_reward);
    for (seq, value) in &optimum.table {
        println!("  {seq:?}: {value:.4}");
    }

    let suite = SyntheticSuite::single(query, task);
    let mut env = suite.env(0);
    let mut actors = ActorPair::scripted();
    let started = Instant::now();
    let cfg = CollectConfig {
        per_query_budget: 2000,
        lambda,
        seed: 3,
        ..CollectConfig::default()
    };
    let ds = uniform_collect(&suite.queries, &mut env, &mut actors, &cfg)?;
    let ds = branch_complete(&ds, &mut env, &mut actors, &cfg)?;
    println!("{} trajectories after branch completion", ds.trajectories.len());

    let plan = |repeats, seed| EvalPlan {
        queries: suite.queries.iter().map(Arc::clone).collect(),
        lambda,
        repeats,
        seed,
    };
    let mut bench = Bench {
        env: &mut env,
        actors: &mut actors,
        train: plan(50, 10),
        test: plan(200, 11),
    };
    let outcome = bench.train_policy(&ds, &TrainConfig { lambda, ..TrainConfig::default() })?;
    let row = evaluate(
        "trained",
        &mut PolicySource::greedy(outcome.params.clone()),
        bench.env,
        bench.actors,
        &plan(5000, 12),
    )?;
    println!(
        "trained policy: R = {:.4}, HIR = {:.3}, best step {}, {:.1}s",
        row.reward,
        row.hir,
        outcome.best_step,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
