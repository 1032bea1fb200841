//! Collect branch-completed rollouts on a synthetic suite, write them to
//! disk, train a policy, and save the checkpoint plus its learning curve.
//!
//! Usage: cargo run --example collect_and_train [out_dir]

use std::path::PathBuf;

use handoff::actors::ActorPair;
use handoff::collector::{branch_complete, uniform_collect, BranchDataset, CollectConfig};
use handoff::envs::{SuccessTable, SyntheticSuite};
use handoff::harness::{curve_report, smoothed_csv, Bench, EvalPlan, DEFAULT_SMOOTHING_WINDOW};
use handoff::trainer::{Checkpoint, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    std::fs::create_dir_all(&out)?;

    let probs = SuccessTable {
        agent_easy: 0.9,
        agent_hard: 0.3,
        human_easy: 0.95,
        human_hard: 0.9,
    };
    let suite = SyntheticSuite::generate(20, &[1, 2, 3], 0.4, probs, 2, 0)?;
    let mut env = suite.env(0);
    let mut actors = ActorPair::scripted();
    let cfg = CollectConfig::default();
    let ds = uniform_collect(&suite.queries, &mut env, &mut actors, &cfg)?;
    let ds = branch_complete(&ds, &mut env, &mut actors, &cfg)?;
    let ds_path = out.join("dataset.jsonl");
    ds.save(&ds_path)?;
    let ds = BranchDataset::load(&ds_path)?;
    println!("{}", ds.shape_report());

    let train_cfg = TrainConfig {
        alpha: 0.1,
        learning_rate: 1.0,
        max_steps: 400,
        ..TrainConfig::default()
    };
    let plan = |repeats, seed| EvalPlan {
        queries: suite.queries.clone(),
        lambda: train_cfg.lambda,
        repeats,
        seed,
    };
    let mut bench = Bench {
        env: &mut env,
        actors: &mut actors,
        train: plan(1, 1),
        test: plan(3, 2),
    };
    let outcome = bench.train_policy(&ds, &train_cfg)?;
    let ck_path = out.join("policy.json");
    Checkpoint::new(&outcome.params, &train_cfg).save(&ck_path)?;
    let smoothed = curve_report(&outcome.curve, DEFAULT_SMOOTHING_WINDOW)?;
    std::fs::write(out.join("curve.csv"), outcome.curve.to_csv())?;
    std::fs::write(out.join("curve_smoothed.csv"), smoothed_csv(&smoothed))?;

    println!(
        "{} samples, {} single-branch states skipped, best step {}",
        outcome.sample_count, outcome.dropped_states, outcome.best_step
    );
    for p in smoothed.iter().step_by(16) {
        println!(
            "step {:4}  test R {:.3} ± {:.3}  test HIR {:.3}",
            p.step,
            p.test_reward.0,
            p.test_reward.1.sqrt(),
            p.test_hir.0
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}
