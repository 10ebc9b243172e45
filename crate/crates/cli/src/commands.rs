use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use sake_core::config::{ConfigError, EncoderConfig, KgIndexFile, PolicyConfig, Resources, SakeConfig};
use sake_core::embedding::{EncodeError, EntityIndex};
use sake_core::eval::{evaluate, EvalReport, QaDataset};
use sake_core::grpo::{evaluate_batch, LogprobRecord};
use sake_core::kg::{KgStats, KnowledgeGraph, TripletFormat};
use sake_core::policy::{Policy, PolicyError, RemotePolicyConfig};
use sake_core::reward::{curriculum_reward, normalize_gold, RewardBreakdown, RewardSchedule};
use sake_core::rollout::{run_rollout, RolloutConfig, RolloutError, SegmentKind, Trajectory};
use sake_core::server::{self, AppState};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{
    Cli, CliError, Command, DemoArgs, EvalArgs, GrpoArgs, IngestArgs, KgArgs, PolicyArgs, RewardReplayArgs,
    RolloutArgs, RolloutOverrides, ScheduleArgs, ServeArgs,
};

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Encode(e) => e.into(),
            ConfigError::Policy(e) => e.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<EncodeError> for CliError {
    fn from(e: EncodeError) -> Self {
        match e {
            EncodeError::Transport(_) | EncodeError::Label { .. } => CliError::Runtime(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Script(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<RolloutError> for CliError {
    fn from(e: RolloutError) -> Self {
        match e {
            RolloutError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(path) => SakeConfig::from_toml_path(existing(path)?)?,
        None => SakeConfig::default(),
    };
    match cli.command {
        Command::Ingest(args) => ingest(&config, args),
        Command::Serve(args) => serve(config, args),
        Command::Rollout(args) => rollout(&config, args),
        Command::RewardReplay(args) => reward_replay(&config, args),
        Command::Eval(args) => eval(args),
        Command::Grpo(args) => grpo(&config, args),
        Command::Demo(args) => demo(&config, args),
    }
}

fn existing(path: &Path) -> Result<&Path, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Usage(format!("{}: no such file or directory", path.display())))
    }
}

fn emit<T: Serialize>(out: &mut impl Write, value: &T) -> Result<(), CliError> {
    let line = serde_json::to_string(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    writeln!(out, "{line}").map_err(|e| CliError::Runtime(format!("stdout: {e}")))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = std::fs::read_to_string(existing(path)?)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| CliError::Usage(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn load_dataset(path: &Path) -> Result<QaDataset, CliError> {
    QaDataset::from_path(existing(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn format_for(path: &Path) -> TripletFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => TripletFormat::Csv,
        _ => TripletFormat::Tsv,
    }
}

fn ingest_triplets(path: &Path, format: TripletFormat) -> Result<KnowledgeGraph, CliError> {
    KnowledgeGraph::ingest_path(existing(path)?, format)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Accepts an index file (`.json`) or a raw triplet file.
fn load_resources(config: &SakeConfig, args: &KgArgs) -> Result<Resources, CliError> {
    let path = args
        .kg
        .clone()
        .or_else(|| config.kg_index.clone())
        .ok_or_else(|| CliError::Usage("no knowledge graph given; pass --kg or set kg_index".into()))?;
    existing(&path)?;
    let encoder = match &args.embeddings {
        Some(table) => EncoderConfig::Table {
            path: existing(table)?.to_path_buf(),
        },
        None => config.encoder.clone(),
    };
    if path.extension().is_some_and(|e| e == "json") {
        return Ok(Resources::load(&path, &encoder)?);
    }
    let kg = ingest_triplets(&path, format_for(&path))?;
    Ok(Resources::build(kg, encoder.build()?)?)
}

fn load_policy(config: &SakeConfig, args: &PolicyArgs) -> Result<Option<Arc<dyn Policy>>, CliError> {
    let chosen = match (&args.script, &args.policy_endpoint) {
        (Some(path), _) => Some(PolicyConfig::Scripted { path: path.clone() }),
        (None, Some(endpoint)) => Some(PolicyConfig::Remote(RemotePolicyConfig::new(
            endpoint.clone(),
            args.model.clone().unwrap_or_default(),
        ))),
        (None, None) => config.policy.clone(),
    };
    if let Some(PolicyConfig::Scripted { path }) = &chosen {
        existing(path)?;
    }
    Ok(chosen.map(|p| p.build()).transpose()?)
}

fn require_policy(config: &SakeConfig, args: &PolicyArgs) -> Result<Arc<dyn Policy>, CliError> {
    load_policy(config, args)?.ok_or_else(|| {
        CliError::Usage("no policy configured; pass --script, --policy-endpoint or set [policy]".into())
    })
}

fn rollout_config(config: &SakeConfig, overrides: &RolloutOverrides) -> Result<RolloutConfig, CliError> {
    let mut cfg = config.rollout.clone();
    if let Some(p) = overrides.p {
        cfg.p = p;
    }
    if let Some(v) = overrides.variant {
        cfg.variant = v;
    }
    if let Some(m) = overrides.max_tokens_per_turn {
        cfg.max_tokens_per_turn = m;
    }
    cfg.validate().map_err(CliError::Usage)?;
    Ok(cfg)
}

fn schedule(config: &SakeConfig, args: &ScheduleArgs) -> Result<RewardSchedule, CliError> {
    match (args.s1, args.s2) {
        (Some(s1), Some(s2)) => RewardSchedule::new(s1, s2).map_err(|e| CliError::Usage(e.to_string())),
        _ => Ok(config.reward),
    }
}

#[derive(Serialize)]
struct IngestSummary<'a> {
    output: &'a Path,
    #[serde(flatten)]
    stats: KgStats,
    embedded: bool,
}

fn ingest(config: &SakeConfig, args: IngestArgs) -> Result<(), CliError> {
    let kg = ingest_triplets(&args.input, args.format)?;
    let embeddings = if args.embed {
        let encoder = config.encoder.build()?;
        Some(EntityIndex::build(&kg, encoder.as_ref())?)
    } else {
        None
    };
    KgIndexFile::new(&kg, embeddings)
        .save(&args.output)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    tracing::info!(path = %args.output.display(), "index written");
    emit(
        &mut std::io::stdout().lock(),
        &IngestSummary {
            output: &args.output,
            stats: kg.stats(),
            embedded: args.embed,
        },
    )
}

fn serve(config: SakeConfig, args: ServeArgs) -> Result<(), CliError> {
    let resources = load_resources(&config, &args.kg)?;
    let policy = load_policy(&config, &args.policy)?;
    let state = AppState::new(
        resources,
        policy,
        config.rollout.clone(),
        config.reward,
        config.server.concurrency_limit,
    )
    .with_auth_token(args.auth_token.or(config.server.auth_token.clone()));
    let bind = args.bind.unwrap_or(config.server.bind.clone());
    server::serve_until_interrupted(state, &bind, config.server.max_body_bytes)
        .map_err(|e| CliError::Runtime(format!("{bind}: {e}")))
}

/// Runs `job` over `items` on `workers` threads; results keep input order.
fn run_pool<T: Sync, R: Send>(items: &[T], workers: usize, job: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let result = job(item);
                *slots[i].lock().expect("slot lock") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}

fn rollout(config: &SakeConfig, args: RolloutArgs) -> Result<(), CliError> {
    let resources = load_resources(config, &args.kg)?;
    let policy = require_policy(config, &args.policy)?;
    let cfg = rollout_config(config, &args.rollout)?;
    let mut out = std::io::stdout().lock();

    let Some(batch) = &args.batch else {
        let question = args.question.as_deref().unwrap_or_default();
        let mut t = run_rollout(policy.as_ref(), question, resources.view(), &cfg)?;
        t.id = args.id;
        return emit(&mut out, &t);
    };

    let dataset = load_dataset(batch)?;
    let workers = args
        .workers
        .or(config.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(CliError::Usage("workers must be positive".into()));
    }
    let results = run_pool(&dataset.items, workers, |item| {
        run_rollout(policy.as_ref(), &item.question, resources.view(), &cfg).map(|mut t| {
            t.id = Some(item.id.clone());
            t
        })
    });
    let mut failed = 0;
    for (item, result) in dataset.items.iter().zip(results) {
        match result {
            Ok(t) => emit(&mut out, &t)?,
            Err(e) => {
                failed += 1;
                tracing::error!(id = %item.id, "rollout failed: {e}");
            }
        }
    }
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} of {} rollouts failed", dataset.len())));
    }
    Ok(())
}

#[derive(Serialize)]
struct ReplayLine {
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    step: u64,
    #[serde(flatten)]
    reward: RewardBreakdown,
}

fn reward_replay(config: &SakeConfig, args: RewardReplayArgs) -> Result<(), CliError> {
    let sched = schedule(config, &args.schedule)?;
    let trajectories: Vec<Trajectory> = read_jsonl(&args.trajectories)?;
    let golds: Option<HashMap<String, String>> = match &args.dataset {
        Some(path) => Some(
            load_dataset(path)?
                .items
                .into_iter()
                .map(|item| (item.id, item.gold))
                .collect(),
        ),
        None => None,
    };
    let fixed_gold = args.gold.as_deref().map(normalize_gold);
    let mut out = std::io::stdout().lock();
    for t in trajectories {
        let gold = match (&golds, &fixed_gold) {
            (_, Some(g)) => g.as_str(),
            (Some(map), None) => {
                let id = t
                    .id
                    .as_deref()
                    .ok_or_else(|| CliError::Usage(format!("trajectory for `{}` has no id", t.query)))?;
                map.get(id)
                    .ok_or_else(|| CliError::Usage(format!("trajectory id `{id}` is not in the dataset")))?
            }
            (None, None) => unreachable!("clap requires --dataset or --gold"),
        };
        let reward = curriculum_reward(&t.text(), gold, args.step, &sched);
        emit(
            &mut out,
            &ReplayLine {
                id: t.id.clone(),
                step: args.step,
                reward,
            },
        )?;
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let trajectories: Vec<Trajectory> = read_jsonl(&args.trajectories)?;
    let datasets = args
        .dataset
        .iter()
        .map(|p| load_dataset(p))
        .collect::<Result<Vec<_>, _>>()?;

    // Route each trajectory to the dataset that owns its id.
    let mut buckets: Vec<Vec<Trajectory>> = vec![Vec::new(); datasets.len()];
    for t in trajectories {
        let id = t
            .id
            .clone()
            .ok_or_else(|| CliError::Usage(format!("trajectory for `{}` has no id", t.query)))?;
        let owner = datasets
            .iter()
            .position(|ds| ds.items.iter().any(|item| item.id == id))
            .ok_or_else(|| CliError::Usage(format!("trajectory id `{id}` is in none of the datasets")))?;
        buckets[owner].push(t);
    }
    let reports = datasets
        .iter()
        .zip(&buckets)
        .map(|(ds, ts)| evaluate(ts, ds).map_err(|e| CliError::Usage(format!("{}: {e}", ds.name))))
        .collect::<Result<Vec<_>, _>>()?;
    let report = EvalReport::merge(reports);

    if let Some(path) = &args.report {
        let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    }
    emit(&mut std::io::stdout().lock(), &report)
}

fn grpo(config: &SakeConfig, args: GrpoArgs) -> Result<(), CliError> {
    let mut cfg = config.grpo;
    if let Some(eps) = args.clip_epsilon {
        cfg.clip_epsilon = eps;
    }
    if let Some(beta) = args.kl_beta {
        cfg.kl_beta = beta;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let trajectories: Vec<Trajectory> = read_jsonl(&args.trajectories)?;
    let records: Vec<LogprobRecord> = read_jsonl(&args.logprobs)?;
    let reports = evaluate_batch(trajectories, records, &cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut out = std::io::stdout().lock();
    for r in &reports {
        emit(&mut out, r)?;
    }
    Ok(())
}

fn segment_label(kind: SegmentKind, id: u8) -> String {
    match kind {
        SegmentKind::ModelTurn => format!("Turn {id}"),
        SegmentKind::ToolOutput => format!("Tool {id}"),
    }
}

fn print_segments(out: &mut impl Write, t: &Trajectory) -> std::io::Result<()> {
    for seg in &t.segments {
        let role = match seg.kind {
            SegmentKind::ModelTurn => "model, mask 1",
            SegmentKind::ToolOutput => "tool, mask 0",
        };
        writeln!(out, "== {} ({role}, {} tokens) ==", segment_label(seg.kind, seg.id), seg.token_count)?;
        writeln!(out, "{}", seg.text.trim_matches('\n'))?;
    }
    Ok(())
}

/// Human-readable trajectory followed by one JSON line holding the reward.
fn demo(config: &SakeConfig, args: DemoArgs) -> Result<(), CliError> {
    let resources = load_resources(config, &args.kg)?;
    let policy = require_policy(config, &args.policy)?;
    let cfg = rollout_config(config, &args.rollout)?;
    let sched = schedule(config, &args.schedule)?;
    let mut out = std::io::stdout().lock();
    let io = |e: std::io::Error| CliError::Runtime(format!("stdout: {e}"));

    writeln!(out, "== Question ==\n{}", args.question).map_err(io)?;
    let t = match run_rollout(policy.as_ref(), &args.question, resources.view(), &cfg) {
        Ok(t) => t,
        Err(e) => {
            if let Some(partial) = e.partial() {
                print_segments(&mut out, partial).map_err(io)?;
            }
            return Err(e.into());
        }
    };
    print_segments(&mut out, &t).map_err(io)?;
    writeln!(out, "== Answer ==\n{}", t.answer.as_deref().unwrap_or("(none)")).map_err(io)?;
    writeln!(out, "== Reward at step {} ==", args.step).map_err(io)?;
    let reward = curriculum_reward(&t.text(), &normalize_gold(&args.gold), args.step, &sched);
    emit(&mut out, &reward)
}
