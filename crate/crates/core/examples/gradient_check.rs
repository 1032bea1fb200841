//! Compares the analytic log-prob and entropy gradients of the logistic
//! policy with central differences at a featurized relay state.

use std::sync::Arc;

use handoff::envs::{synth_generate, Difficulty, SuccessTable};
use handoff::policy::{entropy_and_grad, featurize, log_prob_and_grad, PolicyParams, FEATURE_DIM};
use handoff::trajectory::{CollabChoice, CollabState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (query, _) = synth_generate(3, &[Difficulty::Easy, Difficulty::Hard, Difficulty::Easy], SuccessTable::uniform(0.5, 1.0), 5, 4)?;
    let x = featurize(&CollabState::initial(Arc::new(query)));
    let params = PolicyParams::new((0..FEATURE_DIM).map(|j| 0.3 * (j as f64 - 7.0)).collect())?;
    let h = 1e-5;

    let (_, g_lp) = log_prob_and_grad(&params, &x, CollabChoice::Human)?;
    let (_, g_h) = entropy_and_grad(&params, &x)?;
    println!(" j   x_j      dlogp      numeric    dH         numeric");
    for j in 0..FEATURE_DIM {
        let mut plus = params.clone();
        let mut minus = params.clone();
        plus.weights[j] += h;
        minus.weights[j] -= h;
        let lp = |p: &PolicyParams| log_prob_and_grad(p, &x, CollabChoice::Human).map(|r| r.0);
        let ent = |p: &PolicyParams| entropy_and_grad(p, &x).map(|r| r.0);
        let fd_lp = (lp(&plus)? - lp(&minus)?) / (2.0 * h);
        let fd_h = (ent(&plus)? - ent(&minus)?) / (2.0 * h);
        println!(
            "{j:2}  {:.3}  {:+.6}  {:+.6}  {:+.6}  {:+.6}",
            x.0[j], g_lp[j], fd_lp, g_h[j], fd_h
        );
    }
    Ok(())
}
