//! Sources of the per-step allocation decision.

use rand::{Rng, RngCore};
use thiserror::Error;

use crate::policy::{external_policy_prob, greedy_choice, prob_human, featurize, ExternalPolicy, PolicyError, PolicyParams};
use crate::trajectory::{CollabChoice, CollabState};

#[derive(Debug, Error)]
pub enum ChoiceError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("decision prompt failed: {0}")]
    Prompt(String),
}

/// An allocation and the probability with which it was drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision {
    pub choice: CollabChoice,
    pub behavior_prob: f64,
}

impl Decision {
    pub fn certain(choice: CollabChoice) -> Self {
        Decision {
            choice,
            behavior_prob: 1.0,
        }
    }
}

pub trait ChoiceSource: Send {
    fn decide(&mut self, state: &CollabState, rng: &mut dyn RngCore) -> Result<Decision, ChoiceError>;
}

impl<T: ChoiceSource + ?Sized> ChoiceSource for Box<T> {
    fn decide(&mut self, state: &CollabState, rng: &mut dyn RngCore) -> Result<Decision, ChoiceError> {
        (**self).decide(state, rng)
    }
}

/// Draws HUMAN when a uniform draw falls below `p_human`.
pub fn bernoulli(p_human: f64, rng: &mut dyn RngCore) -> Decision {
    let u: f64 = rng.random();
    if u < p_human {
        Decision {
            choice: CollabChoice::Human,
            behavior_prob: p_human,
        }
    } else {
        Decision {
            choice: CollabChoice::Agent,
            behavior_prob: 1.0 - p_human,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Constant(pub CollabChoice);

impl ChoiceSource for Constant {
    fn decide(&mut self, _state: &CollabState, _rng: &mut dyn RngCore) -> Result<Decision, ChoiceError> {
        Ok(Decision::certain(self.0))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Bernoulli {
    pub p_human: f64,
}

impl ChoiceSource for Bernoulli {
    fn decide(&mut self, _state: &CollabState, rng: &mut dyn RngCore) -> Result<Decision, ChoiceError> {
        Ok(bernoulli(self.p_human, rng))
    }
}

/// Per-step allocation by step index; steps past the end reuse the last entry.
#[derive(Clone, Debug)]
pub struct FixedSequence(pub Vec<CollabChoice>);

impl ChoiceSource for FixedSequence {
    fn decide(&mut self, state: &CollabState, _rng: &mut dyn RngCore) -> Result<Decision, ChoiceError> {
        let i = state.history.len().min(self.0.len().saturating_sub(1));
        Ok(Decision::certain(self.0.get(i).copied().unwrap_or(CollabChoice::Agent)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyMode {
    Sample,
    /// Argmax; recorded with behavior probability 1.
    Greedy,
}

#[derive(Clone, Debug)]
pub struct PolicySource {
    pub params: PolicyParams,
    pub mode: PolicyMode,
}

impl PolicySource {
    pub fn greedy(params: PolicyParams) -> Self {
        PolicySource {
            params,
            mode: PolicyMode::Greedy,
        }
    }

    pub fn sampling(params: PolicyParams) -> Self {
        PolicySource {
            params,
            mode: PolicyMode::Sample,
        }
    }
}

impl ChoiceSource for PolicySource {
    fn decide(&mut self, state: &CollabState, rng: &mut dyn RngCore) -> Result<Decision, ChoiceError> {
        match self.mode {
            PolicyMode::Greedy => Ok(Decision::certain(greedy_choice(&self.params, state)?.choice)),
            PolicyMode::Sample => Ok(bernoulli(prob_human(&self.params, &featurize(state))?, rng)),
        }
    }
}

/// Samples from a remote policy's probability.
#[derive(Clone, Debug)]
pub struct ExternalSource(pub ExternalPolicy);

impl ChoiceSource for ExternalSource {
    fn decide(&mut self, state: &CollabState, rng: &mut dyn RngCore) -> Result<Decision, ChoiceError> {
        Ok(bernoulli(external_policy_prob(&self.0, state)?, rng))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::trajectory::fixtures::{qa_query, three_step};

    #[test]
    fn bernoulli_matches_rate_and_records_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let state = CollabState::initial(qa_query());
        let mut src = Bernoulli { p_human: 0.5 };
        let mut humans = 0;
        for _ in 0..10_000 {
            let d = src.decide(&state, &mut rng).unwrap();
            assert_eq!(d.behavior_prob, 0.5);
            humans += (d.choice == CollabChoice::Human) as usize;
        }
        assert!((humans as f64 / 10_000.0 - 0.5).abs() < 0.02);
    }

    #[test]
    fn fixed_sequence_follows_step_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut src = FixedSequence(vec![CollabChoice::Human, CollabChoice::Agent]);
        let t = three_step();
        let picks: Vec<_> = (1..=4)
            .map(|i| src.decide(&t.state_at(i).unwrap(), &mut rng).unwrap().choice)
            .collect();
        assert_eq!(picks, [CollabChoice::Human, CollabChoice::Agent, CollabChoice::Agent, CollabChoice::Agent]);
    }

    #[test]
    fn greedy_zero_params_picks_agent() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut src = PolicySource::greedy(PolicyParams::zeros());
        let d = src.decide(&CollabState::initial(qa_query()), &mut rng).unwrap();
        assert_eq!(d, Decision::certain(CollabChoice::Agent));
    }
}
