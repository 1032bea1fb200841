//! Search/Lookup/Finish loop over a tiny in-memory wiki. The agent searches
//! the wrong page; the human searches the right one and answers. Task reward
//! is token F1 against the gold answer.

use std::collections::HashMap;
use std::sync::Arc;

use handoff::actors::{Actor, ActorError, ActorPair};
use handoff::choice::Bernoulli;
use handoff::collector::run_episode;
use handoff::envs::{ReactEnv, WikiClient, WikiResponse};
use handoff::trajectory::{ActionKind, CollabChoice, CollabState, DatasetTag, Gold, TaskAction, TaskQuery};
use rand::RngCore;

struct Pages(HashMap<&'static str, Vec<String>>);

impl WikiClient for Pages {
    fn fetch(&mut self, entity: &str) -> Result<WikiResponse, String> {
        Ok(match self.0.get(entity) {
            Some(s) => WikiResponse::Page {
                title: entity.to_string(),
                sentences: s.clone(),
            },
            None => WikiResponse::NotFound {
                similar: self.0.keys().map(|k| k.to_string()).collect(),
            },
        })
    }
}

/// Searches `page` once, then answers with whatever follows "fought at".
struct Reader {
    id: &'static str,
    role: CollabChoice,
    page: &'static str,
}

impl Actor for Reader {
    fn id(&self) -> &str {
        self.id
    }

    fn role(&self) -> CollabChoice {
        self.role
    }

    fn act(&mut self, state: &CollabState, _rng: &mut dyn RngCore) -> Result<TaskAction, ActorError> {
        let seen = state.history.last().map(|s| s.observation.text.as_str()).unwrap_or("");
        let action = match seen.split_once("fought at ") {
            Some((_, rest)) => TaskAction::with_thought(ActionKind::Finish, "The page names the place.", rest.trim_end_matches('.')),
            None => TaskAction::with_thought(ActionKind::Search, "Look the battle up.", self.page),
        };
        action.map_err(|e| ActorError::Unsupported(e.to_string()))
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pages = Pages(HashMap::from([
        ("Battle of Manila", vec!["The Battle of Manila was fought at Manila Bay.".to_string()]),
        (
            "Seven Days Battles",
            vec![
                "The Seven Days Battles were a series of six battles.".to_string(),
                "They were fought at the outskirts of Richmond, Virginia.".to_string(),
            ],
        ),
    ]));
    let query = Arc::new(TaskQuery::new(
        "hq-1",
        "Where were the Seven Days Battles fought?",
        Gold::Text("outskirts of Richmond, Virginia".into()),
        DatasetTag::Hotpotqa,
        None,
    )?);
    let mut env = ReactEnv::new(pages);
    let mut actors = ActorPair::new(
        Box::new(Reader { id: "agent", role: CollabChoice::Agent, page: "Battle of Manila" }),
        Box::new(Reader { id: "human", role: CollabChoice::Human, page: "Seven Days Battles" }),
    );
    for seed in 0..4 {
        let t = run_episode(&mut env, &mut actors, &mut Bernoulli { p_human: 0.5 }, &query, seed, 0.08)?;
        println!("seed {seed}: T={:.3} C={} R={:.3}", t.task_reward, t.intervention_count, t.reward);
        for s in &t.steps {
            println!("  {} {} -> {}", s.collab.label(), s.action.render(), s.observation.text);
        }
    }
    Ok(())
}
