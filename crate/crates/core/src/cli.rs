//! Command-line front end. Every subcommand writes a TOML run manifest with
//! its flags, seeds and the SHA-256 of the files it read and wrote.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::actors::{
    Actor, ActorError, ActorPair, ChatActor, ChatClient, OpenAiChatClient, RecordedChatClient, ScriptedActor,
};
use crate::cassette::{Cassette, CassetteError, FixtureMode};
use crate::choice::PolicySource;
use crate::collector::{branch_complete, run_episode, uniform_collect, BranchDataset, CollectConfig, CollectError, Provenance};
use crate::envs::{
    EnvError, Environment, HttpWikiClient, ReactEnv, RecordedSqlExecutor, RecordedWikiClient, SqlExecutor,
    SqliteExecutor, SuccessTable, SyntheticSuite, TryAgainEnv, WikiClient,
};
use crate::harness::{
    baseline_choice_source, curve_report, evaluate, imitation_params, lambda_sweep, smoothed_csv, BaselineKind, Bench,
    EvalPlan, EvalReport, HarnessError, PromptSource, PromptTemplate, ScriptedPlanner, DEFAULT_SMOOTHING_WINDOW,
    DEFAULT_STOCHASTIC_REPEATS,
};
use crate::seed::mix_seed;
use crate::service::{ActorFactory, EnvFactory, Service, ServiceConfig};
use crate::trainer::{Checkpoint, TrainConfig, TrainError};
use crate::trajectory::{CollabChoice, TaskQuery};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Collect(#[from] CollectError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Actor(#[from] ActorError),
    #[error(transparent)]
    Cassette(#[from] CassetteError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser, Serialize)]
#[command(name = "handoff", version, about = "Learn when to hand a task step to a human")]
pub struct Cli {
    /// Where to write the run manifest (default: next to the main output).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Collect branching trajectories under the uniform behavior policy.
    Collect(CollectArgs),
    /// Train an allocation policy on a collected dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint or a baseline.
    Eval(EvalArgs),
    /// Train and evaluate one policy per λ.
    Sweep(SweepArgs),
    /// Host live sessions over HTTP.
    Serve(ServeArgs),
    /// Record or replay external-call fixtures.
    Fixtures(FixturesArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Synthetic,
    React,
    Tryagain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorChoice {
    Scripted,
    Chat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureArg {
    Off,
    Record,
    Replay,
}

impl From<FixtureArg> for FixtureMode {
    fn from(a: FixtureArg) -> Self {
        match a {
            FixtureArg::Off => FixtureMode::Off,
            FixtureArg::Record => FixtureMode::Record,
            FixtureArg::Replay => FixtureMode::Replay,
        }
    }
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct EnvArgs {
    #[arg(long, value_enum, default_value = "synthetic")]
    pub env: EnvKind,
    /// Synthetic: number of relay tasks.
    #[arg(long, default_value_t = 20)]
    pub tasks: usize,
    /// Synthetic: hop counts, cycled over tasks.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub hops: Vec<usize>,
    #[arg(long, default_value_t = 0.4)]
    pub hard_fraction: f64,
    #[arg(long, default_value_t = 0.9)]
    pub p_agent_easy: f64,
    #[arg(long, default_value_t = 0.3)]
    pub p_agent_hard: f64,
    #[arg(long, default_value_t = 0.95)]
    pub p_human_easy: f64,
    #[arg(long, default_value_t = 0.9)]
    pub p_human_hard: f64,
    /// Synthetic: step budget beyond the hop count.
    #[arg(long, default_value_t = 2)]
    pub budget_slack: usize,
    #[arg(long, default_value_t = 0)]
    pub suite_seed: u64,
    /// QA and code tasks: JSONL file of queries.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long, default_value = "http://127.0.0.1:8090")]
    pub wiki_url: String,
    /// Code tasks: SQLite database opened read-only.
    #[arg(long)]
    pub db: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "replay")]
    pub fixture_mode: FixtureArg,
    #[arg(long, default_value = "fixtures")]
    pub cassette_dir: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct ActorArgs {
    #[arg(long, value_enum, default_value = "scripted")]
    pub agent: ActorChoice,
    #[arg(long, value_enum, default_value = "scripted")]
    pub human: ActorChoice,
    /// Hop success probability overriding the task table (scripted agent).
    #[arg(long)]
    pub agent_success: Option<f64>,
    #[arg(long)]
    pub human_success: Option<f64>,
    #[arg(long, default_value = "gpt-4")]
    pub model: String,
    /// Chat completions base URL (default from the environment).
    #[arg(long)]
    pub chat_url: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct CollectArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[command(flatten)]
    pub actors: ActorArgs,
    /// Rollouts per query.
    #[arg(long, default_value_t = 14)]
    pub budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.08)]
    pub lambda: f64,
    /// Probability the behavior policy routes a step to the human.
    #[arg(long, default_value_t = 0.5)]
    pub behavior: f64,
    /// Keep only the uniform rollouts, without forking missing branches.
    #[arg(long)]
    pub no_branch_complete: bool,
    #[arg(long, default_value_t = 256)]
    pub max_forks: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 0.08)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.3)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 5)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluation episodes per query on the training queries.
    #[arg(long, default_value_t = 1)]
    pub train_repeats: usize,
    /// Evaluation episodes per query on the test queries.
    #[arg(long, default_value_t = 3)]
    pub test_repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub eval_seed: u64,
}

impl TrainFlags {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            epsilon: self.epsilon,
            alpha: self.alpha,
            learning_rate: self.lr,
            batch_size: self.batch,
            eval_every: self.eval_every,
            max_steps: self.steps,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub env: EnvArgs,
    #[command(flatten)]
    pub actors: ActorArgs,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Learning-curve CSV (raw and smoothed written side by side).
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SMOOTHING_WINDOW)]
    pub window: usize,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[command(flatten)]
    pub actors: ActorArgs,
    /// Trained checkpoint to evaluate greedily.
    #[arg(long, conflicts_with = "baseline")]
    pub params: Option<PathBuf>,
    #[arg(long, value_parser = parse_baseline)]
    pub baseline: Option<BaselineKind>,
    #[arg(long, default_value_t = 0.08)]
    pub lambda: f64,
    /// Episodes per query (default 1, or 3 for stochastic baselines).
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset to fit the imitation baseline on and take prompt examples from.
    #[arg(long)]
    pub il_dataset: Option<PathBuf>,
    /// Probability the offline planner flips its answer.
    #[arg(long, default_value_t = 0.1)]
    pub planner_noise: f64,
    /// Ask a chat model instead of the offline planner.
    #[arg(long)]
    pub planner_chat: bool,
    #[arg(long)]
    pub prompt_template: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn parse_baseline(s: &str) -> Result<BaselineKind, String> {
    s.parse()
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.2,1.0")]
    pub lambdas: Vec<f64>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub env: EnvArgs,
    #[command(flatten)]
    pub actors: ActorArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct ServeArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[command(flatten)]
    pub actors: ActorArgs,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Append finished sessions to this dataset.
    #[arg(long)]
    pub dataset_out: Option<PathBuf>,
    /// Show the agent's proposed action as a reference on human turns.
    #[arg(long)]
    pub hint: bool,
    #[arg(long, default_value_t = 600)]
    pub turn_timeout_secs: u64,
    #[arg(long, default_value_t = 0.08)]
    pub lambda: f64,
    /// Checkpoint for sessions allocated by the trained policy.
    #[arg(long)]
    pub params: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct FixturesArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[command(flatten)]
    pub actors: ActorArgs,
    /// `record` runs against live services and writes cassettes; `replay` checks they cover a run.
    #[arg(long, value_enum)]
    pub mode: FixtureArg,
    #[arg(long, default_value_t = 1)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    crate_version: &'a str,
    args: &'a Cli,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn digests(paths: &[&Path]) -> Result<BTreeMap<String, String>, CliError> {
    paths
        .iter()
        .filter(|p| p.is_file())
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect()
}

fn manifest_path(cli: &Cli, primary: Option<&Path>, name: &str) -> PathBuf {
    if let Some(p) = &cli.manifest {
        return p.clone();
    }
    match primary {
        Some(p) => {
            let mut s = p.as_os_str().to_owned();
            s.push(".manifest.toml");
            PathBuf::from(s)
        }
        None => PathBuf::from(format!("handoff-{name}.manifest.toml")),
    }
}

fn write_manifest(cli: &Cli, name: &str, primary: Option<&Path>, inputs: &[&Path], outputs: &[&Path]) -> Result<PathBuf, CliError> {
    let manifest = Manifest {
        command: name,
        crate_version: env!("CARGO_PKG_VERSION"),
        args: cli,
        inputs: digests(inputs)?,
        outputs: digests(outputs)?,
    };
    let text = toml::to_string(&manifest).map_err(|e| CliError::Usage(format!("manifest: {e}")))?;
    let path = manifest_path(cli, primary, name);
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

/// Loads a JSONL file of queries.
pub fn load_queries(path: &Path) -> Result<Vec<Arc<TaskQuery>>, CliError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let q: TaskQuery = serde_json::from_str(&line).map_err(|e| CollectError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        q.validate().map_err(|e| CollectError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(Arc::new(q));
    }
    if out.is_empty() {
        return Err(CliError::Usage(format!("{}: no queries", path.display())));
    }
    Ok(out)
}

fn open_cassette(mode: FixtureMode, path: PathBuf) -> Result<Option<Cassette>, CassetteError> {
    match mode {
        FixtureMode::Off => Ok(None),
        FixtureMode::Record => Cassette::open_for_recording(path).map(Some),
        FixtureMode::Replay => Cassette::open(path).map(Some),
    }
}

/// Query set and an environment factory for the selected task family.
pub fn env_setup(args: &EnvArgs) -> Result<(Vec<Arc<TaskQuery>>, EnvFactory), CliError> {
    let mode = FixtureMode::from(args.fixture_mode);
    match args.env {
        EnvKind::Synthetic => {
            let probs = SuccessTable {
                agent_easy: args.p_agent_easy,
                agent_hard: args.p_agent_hard,
                human_easy: args.p_human_easy,
                human_hard: args.p_human_hard,
            };
            let suite = SyntheticSuite::generate(args.tasks, &args.hops, args.hard_fraction, probs, args.budget_slack, args.suite_seed)?;
            let queries = suite.queries.clone();
            Ok((queries, Arc::new(move || Ok(Box::new(suite.env(0)) as Box<dyn Environment>))))
        }
        EnvKind::React => {
            let queries = load_queries(args.queries.as_deref().ok_or_else(|| CliError::Usage("--queries is required for react".into()))?)?;
            let url = args.wiki_url.clone();
            let cassette = args.cassette_dir.join("wiki.jsonl");
            let factory: EnvFactory = Arc::new(move || {
                let live = || Box::new(HttpWikiClient::new(url.clone(), Duration::from_secs(10))) as Box<dyn WikiClient>;
                let client: Box<dyn WikiClient> = match open_cassette(mode, cassette.clone()).map_err(|e| EnvError::ExecutorUnavailable(e.to_string()))? {
                    None => live(),
                    Some(c) if mode == FixtureMode::Record => Box::new(RecordedWikiClient::record(live(), c)),
                    Some(c) => Box::new(RecordedWikiClient::replay(c)),
                };
                Ok(Box::new(ReactEnv::new(client)) as Box<dyn Environment>)
            });
            Ok((queries, factory))
        }
        EnvKind::Tryagain => {
            let queries = load_queries(args.queries.as_deref().ok_or_else(|| CliError::Usage("--queries is required for tryagain".into()))?)?;
            let db = args.db.clone();
            if mode != FixtureMode::Replay && db.is_none() {
                return Err(CliError::Usage("--db is required unless replaying fixtures".into()));
            }
            let cassette = args.cassette_dir.join("sql.jsonl");
            let factory: EnvFactory = Arc::new(move || {
                let live = || -> Result<Box<dyn SqlExecutor>, EnvError> {
                    let db = db.as_ref().ok_or_else(|| EnvError::ExecutorUnavailable("no database".into()))?;
                    Ok(Box::new(SqliteExecutor::open(db)?))
                };
                let exec: Box<dyn SqlExecutor> = match open_cassette(mode, cassette.clone()).map_err(|e| EnvError::ExecutorUnavailable(e.to_string()))? {
                    None => live()?,
                    Some(c) if mode == FixtureMode::Record => Box::new(RecordedSqlExecutor::record(live()?, c)),
                    Some(c) => Box::new(RecordedSqlExecutor::replay(c)),
                };
                Ok(Box::new(TryAgainEnv::new(exec)) as Box<dyn Environment>)
            });
            Ok((queries, factory))
        }
    }
}

fn chat_client(actors: &ActorArgs, env: &EnvArgs, name: &str) -> Result<Box<dyn ChatClient>, CassetteError> {
    let live = || -> Box<dyn ChatClient> {
        match &actors.chat_url {
            Some(url) => Box::new(OpenAiChatClient::new(url.clone(), std::env::var(crate::actors::chat::API_KEY_VAR).ok(), Duration::from_secs(60))),
            None => Box::new(OpenAiChatClient::from_env()),
        }
    };
    let mode = FixtureMode::from(env.fixture_mode);
    Ok(match open_cassette(mode, env.cassette_dir.join(format!("{name}.jsonl")))? {
        None => live(),
        Some(c) if mode == FixtureMode::Record => Box::new(RecordedChatClient::record(live(), c)),
        Some(c) => Box::new(RecordedChatClient::replay(c)),
    })
}

fn build_actor(role: CollabChoice, actors: &ActorArgs, env: &EnvArgs) -> Result<Box<dyn Actor>, ActorError> {
    let (choice, success, name) = match role {
        CollabChoice::Agent => (actors.agent, actors.agent_success, "chat_agent"),
        CollabChoice::Human => (actors.human, actors.human_success, "chat_human"),
    };
    Ok(match choice {
        ActorChoice::Scripted => {
            if let Some(p) = success {
                if !(p > 0.0 && p <= 1.0) {
                    return Err(ActorError::Unsupported(format!("success probability {p} outside (0,1]")));
                }
            }
            let id = format!("scripted-{}", role.label().to_lowercase());
            Box::new(ScriptedActor::new(id, role).with_success_prob(success))
        }
        ActorChoice::Chat => {
            let client = chat_client(actors, env, name).map_err(|e| ActorError::Transport(e.to_string()))?;
            let actor = match role {
                CollabChoice::Agent => ChatActor::agent(name, actors.model.clone(), client),
                CollabChoice::Human => ChatActor::simulated_human(name, actors.model.clone(), client),
            };
            Box::new(actor.with_temperature(actors.temperature))
        }
    })
}

fn actor_pair(actors: &ActorArgs, env: &EnvArgs) -> Result<ActorPair, CliError> {
    Ok(ActorPair::new(
        build_actor(CollabChoice::Agent, actors, env)?,
        build_actor(CollabChoice::Human, actors, env)?,
    ))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn bench_plans(train_queries: Vec<Arc<TaskQuery>>, test_queries: Vec<Arc<TaskQuery>>, flags: &TrainFlags) -> (EvalPlan, EvalPlan) {
    (
        EvalPlan {
            queries: train_queries,
            lambda: flags.lambda,
            repeats: flags.train_repeats,
            seed: mix_seed(flags.eval_seed, 0, 0),
        },
        EvalPlan {
            queries: test_queries,
            lambda: flags.lambda,
            repeats: flags.test_repeats,
            seed: mix_seed(flags.eval_seed, 1, 0),
        },
    )
}

fn collect(cli: &Cli, a: &CollectArgs) -> Result<(), CliError> {
    let (queries, factory) = env_setup(&a.env)?;
    let mut env = factory()?;
    let mut actors = actor_pair(&a.actors, &a.env)?;
    let provenance = match (a.actors.agent, a.actors.human) {
        (ActorChoice::Scripted, ActorChoice::Scripted) => Provenance::Synthetic,
        _ => Provenance::SimulatedHuman,
    };
    let cfg = CollectConfig {
        behavior: a.behavior,
        per_query_budget: a.budget,
        allow_duplicates: provenance.keeps_duplicates(),
        seed: a.seed,
        lambda: a.lambda,
        provenance,
        max_forks_per_query: a.max_forks,
    };
    let mut ds = uniform_collect(&queries, env.as_mut(), &mut actors, &cfg)?;
    if !a.no_branch_complete {
        ds = branch_complete(&ds, env.as_mut(), &mut actors, &cfg)?;
    }
    ds.save(&a.out)?;
    println!("{}", ds.shape_report());
    println!(
        "{} trajectories, {} steps, {} human, {} single-branch states",
        ds.trajectories.len(),
        ds.total_steps(),
        ds.human_steps(),
        ds.single_branch_states().len()
    );
    let inputs: Vec<&Path> = a.env.queries.iter().map(|p| p.as_path()).collect();
    write_manifest(cli, "collect", Some(&a.out), &inputs, &[&a.out])?;
    Ok(())
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<(), CliError> {
    let ds = BranchDataset::load(&a.dataset)?;
    let (queries, factory) = env_setup(&a.env)?;
    let mut env = factory()?;
    let mut actors = actor_pair(&a.actors, &a.env)?;
    let cfg = a.train.config();
    let (train, test) = bench_plans(ds.queries.clone(), queries, &a.train);
    let mut bench = Bench {
        env: env.as_mut(),
        actors: &mut actors,
        train,
        test,
    };
    let outcome = bench.train_policy(&ds, &cfg)?;
    Checkpoint::new(&outcome.params, &cfg).save(&a.out)?;
    println!(
        "best step {} of {}; {} samples, {} single-branch states dropped",
        outcome.best_step, cfg.max_steps, outcome.sample_count, outcome.dropped_states
    );
    if let Some(last) = outcome.curve.points.last() {
        println!(
            "final: train R {:.4}, test R {:.4}, test HIR {:.4}",
            last.train_reward, last.test_reward, last.test_hir
        );
    }
    let mut outputs = vec![a.out.clone()];
    if let Some(curve) = &a.curve {
        write_text(curve, &outcome.curve.to_csv())?;
        let mut smooth = curve.as_os_str().to_owned();
        smooth.push(".smoothed.csv");
        let smooth = PathBuf::from(smooth);
        write_text(&smooth, &smoothed_csv(&curve_report(&outcome.curve, a.window)?))?;
        outputs.extend([curve.clone(), smooth]);
    }
    let outs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    write_manifest(cli, "train", Some(&a.out), &[&a.dataset], &outs)?;
    Ok(())
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> Result<(), CliError> {
    let (queries, factory) = env_setup(&a.env)?;
    let mut env = factory()?;
    let mut actors = actor_pair(&a.actors, &a.env)?;
    let il_ds = a.il_dataset.as_deref().map(BranchDataset::load).transpose()?;
    let (method, mut source, stochastic) = match (&a.params, a.baseline) {
        (Some(path), None) => {
            let params = Checkpoint::load(path)?.params()?;
            ("trained".to_string(), Box::new(PolicySource::greedy(params)) as Box<dyn crate::choice::ChoiceSource>, false)
        }
        (None, Some(kind)) => {
            let imitation = match (kind, &il_ds) {
                (BaselineKind::Imitation, Some(ds)) => Some(imitation_params(ds, &TrainConfig { lambda: a.lambda, ..TrainConfig::default() })?),
                (BaselineKind::Imitation, None) => return Err(CliError::Usage("--baseline imitation needs --il-dataset".into())),
                _ => None,
            };
            let prompt = if kind == BaselineKind::Prompt {
                let examples = match &il_ds {
                    Some(ds) if ds.trajectories.len() >= 2 => [ds.trajectories[0].canonical_text(), ds.trajectories[1].canonical_text()],
                    _ => return Err(CliError::Usage("--baseline prompt needs --il-dataset with two example trajectories".into())),
                };
                let client: Box<dyn ChatClient> = if a.planner_chat {
                    chat_client(&a.actors, &a.env, "chat_planner")?
                } else {
                    Box::new(ScriptedPlanner::new(a.seed, a.planner_noise))
                };
                let mut src = PromptSource::new(client, a.actors.model.clone(), examples);
                if let Some(path) = &a.prompt_template {
                    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
                    src = src.with_template(PromptTemplate { text });
                }
                Some(src)
            } else {
                None
            };
            (kind.as_str().to_string(), baseline_choice_source(kind, imitation, prompt)?, kind.is_stochastic())
        }
        _ => return Err(CliError::Usage("give exactly one of --params or --baseline".into())),
    };
    let repeats = a.repeats.unwrap_or(if stochastic { DEFAULT_STOCHASTIC_REPEATS } else { 1 });
    let plan = EvalPlan {
        queries,
        lambda: a.lambda,
        repeats,
        seed: a.seed,
    };
    let mut report = EvalReport::new(a.lambda);
    report.rows.push(evaluate(&method, source.as_mut(), env.as_mut(), &mut actors, &plan)?);
    report.verify()?;
    print!("{}", report.to_text());
    if let Some(path) = &a.csv {
        write_text(path, &report.to_csv())?;
    }
    let mut inputs: Vec<&Path> = Vec::new();
    inputs.extend(a.params.as_deref());
    inputs.extend(a.il_dataset.as_deref());
    inputs.extend(a.env.queries.as_deref());
    let outputs: Vec<&Path> = a.csv.as_deref().into_iter().collect();
    write_manifest(cli, "eval", a.csv.as_deref(), &inputs, &outputs)?;
    Ok(())
}

fn sweep_cmd(cli: &Cli, a: &SweepArgs) -> Result<(), CliError> {
    let ds = BranchDataset::load(&a.dataset)?;
    let (queries, factory) = env_setup(&a.env)?;
    let mut env = factory()?;
    let mut actors = actor_pair(&a.actors, &a.env)?;
    let (train, test) = bench_plans(ds.queries.clone(), queries, &a.train);
    let mut bench = Bench {
        env: env.as_mut(),
        actors: &mut actors,
        train,
        test,
    };
    let report = lambda_sweep(&ds, &a.lambdas, &a.train.config(), &mut bench)?;
    print!("{}", report.to_text());
    write_text(&a.out, &report.to_csv())?;
    write_manifest(cli, "sweep", Some(&a.out), &[&a.dataset], &[&a.out])?;
    Ok(())
}

fn serve_cmd(cli: &Cli, a: &ServeArgs) -> Result<(), CliError> {
    let (queries, env) = env_setup(&a.env)?;
    env()?;
    let (actors, env_args) = (a.actors.clone(), a.env.clone());
    let agent: ActorFactory = Arc::new(move || build_actor(CollabChoice::Agent, &actors, &env_args));
    agent()?;
    let policy = a.params.as_deref().map(|p| Checkpoint::load(p).and_then(|c| c.params())).transpose()?;
    let svc = Service::new(ServiceConfig {
        queries,
        env,
        agent,
        hint: a.hint,
        turn_timeout: Duration::from_secs(a.turn_timeout_secs),
        default_lambda: a.lambda,
        policy,
        dataset_out: a.dataset_out.clone(),
    });
    let addr: std::net::SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::Usage(format!("bad address: {e}")))?;
    let inputs: Vec<&Path> = a.params.as_deref().into_iter().chain(a.env.queries.as_deref()).collect();
    write_manifest(cli, "serve", a.dataset_out.as_deref(), &inputs, &[])?;
    println!("listening on http://{addr}");
    let rt = tokio::runtime::Runtime::new().map_err(io_err(Path::new("tokio runtime")))?;
    rt.block_on(crate::service::serve(svc, addr)).map_err(io_err(Path::new(&addr.to_string())))
}

fn fixtures_cmd(cli: &Cli, a: &FixturesArgs) -> Result<(), CliError> {
    if a.mode == FixtureArg::Off {
        return Err(CliError::Usage("--mode must be record or replay".into()));
    }
    let env_args = EnvArgs {
        fixture_mode: a.mode,
        ..a.env.clone()
    };
    if a.mode == FixtureArg::Record {
        std::fs::create_dir_all(&a.env.cassette_dir).map_err(io_err(&a.env.cassette_dir))?;
    }
    let (queries, factory) = env_setup(&env_args)?;
    let mut env = factory()?;
    let mut actors = actor_pair(&a.actors, &env_args)?;
    let mut episodes = 0;
    for (qi, q) in queries.iter().enumerate() {
        for r in 0..a.episodes {
            for choice in [CollabChoice::Agent, CollabChoice::Human] {
                let seed = mix_seed(a.seed, qi as u64, r as u64);
                run_episode(env.as_mut(), &mut actors, &mut crate::choice::Constant(choice), q, seed, 0.0)?;
                episodes += 1;
            }
        }
    }
    let verb = if a.mode == FixtureArg::Record { "recorded" } else { "replayed" };
    println!("{verb} {episodes} episodes into {}", a.env.cassette_dir.display());
    let cassettes: Vec<PathBuf> = ["wiki", "sql", "chat_agent", "chat_human"]
        .iter()
        .map(|n| a.env.cassette_dir.join(format!("{n}.jsonl")))
        .collect();
    let paths: Vec<&Path> = cassettes.iter().map(|p| p.as_path()).collect();
    let (inputs, outputs) = if a.mode == FixtureArg::Record { (vec![], paths) } else { (paths, vec![]) };
    write_manifest(cli, "fixtures", Some(&a.env.cassette_dir.join("fixtures")), &inputs, &outputs)?;
    Ok(())
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Collect(a) => collect(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Eval(a) => eval_cmd(cli, a),
        Command::Sweep(a) => sweep_cmd(cli, a),
        Command::Serve(a) => serve_cmd(cli, a),
        Command::Fixtures(a) => fixtures_cmd(cli, a),
    }
}
