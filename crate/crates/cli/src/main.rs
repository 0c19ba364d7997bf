//! `execforge` command-line tool.
//!
//! Exit codes: 0 on success, 1 for configuration or usage errors, 2 when an
//! external service (model endpoint, artifact store, judge) fails hard.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use execforge::analysis::{self, Judge, ReportOptions, RuleJudge, RunMeta};
use execforge::domain::{read_jsonl, write_jsonl, TrajectoryRecord};
use execforge::environments::{Environment, LatticeTuneSpec, Resources, SyntheticEnv, TwoModeSpec};
use execforge::gateway::{
    sha256_hex, ArtifactKey, ArtifactStore, FsSink, FsStore, GatewayError, HttpEndpoint, ModelEndpoint, ScriptedEndpoint,
};
use execforge::implementer::{implement_idea, ImplementError, ImplementerConfig};
use execforge::pipeline::{LatticeCoder, PipelineExecution};
use execforge::rlsim::{train_rl, RLConfig};
use execforge::scheduler::{job_for, Scheduler, SystemClock, WorkerPool, STATE_FILE};
use execforge::search::{best_of_n, run_search, write_run, ExecutionApi, MutationIdeator, SearchConfig, SearchError, SyntheticExecution};
use execforge::worker::{fetch_result, EnvRunner, ProcessRunner, SyntheticRunner, UploadingExecutor, Worker};

use manifest::{RunManifest, MANIFEST_FILE};

#[derive(Parser, Debug)]
#[command(name = "execforge", version, about = "Execute research ideas and search over them by execution reward")]
struct Cli {
    /// Root directory of the artifact store
    #[arg(long, global = true, default_value = "store")]
    store_root: PathBuf,

    /// Replace the seed given in the config
    #[arg(long, global = true)]
    seed_override: Option<u64>,

    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Execution-guided evolutionary search
    Search(SearchArgs),
    /// Independent fresh samples with no feedback
    BestOfN(BestOfNArgs),
    /// Policy-gradient training of a tabular ideator on TwoMode
    Rlsim(RlsimArgs),
    /// Rebuild the report of a run directory
    Analyze(AnalyzeArgs),
    /// Poll the store and run new codebases on a local worker pool
    Scheduler(SchedulerArgs),
    /// Execute one stored codebase and upload its result
    Worker(WorkerArgs),
    /// Turn an idea into a patched codebase in the store
    Implement(ImplementArgs),
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    env: PathBuf,
    /// Run directory; defaults to runs/<run id>
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    /// mutation | script:PATH | http:URL#MODEL
    #[arg(long, default_value = "mutation")]
    ideator: String,
    /// synthetic runs ideas directly; pipeline goes through implementer,
    /// store, scheduler and worker
    #[arg(long, default_value = "synthetic")]
    backend: String,
    /// lattice-coder | script:PATH | http:URL#MODEL (pipeline backend only)
    #[arg(long, default_value = "lattice-coder")]
    coder: String,
    #[arg(long, default_value_t = 4)]
    workers: usize,
}

#[derive(Args, Debug)]
struct BestOfNArgs {
    #[arg(long)]
    env: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "mutation")]
    ideator: String,
}

#[derive(Args, Debug)]
struct RlsimArgs {
    #[arg(long)]
    config: PathBuf,
    /// Environment manifest with a two_mode synthetic spec; the default
    /// TwoMode space when omitted
    #[arg(long)]
    env: Option<PathBuf>,
    /// dynamics.jsonl path or run directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// trajectories.jsonl or the run directory holding it
    path: PathBuf,
    /// rule | scripted:PATH | http:URL#MODEL
    #[arg(long, default_value = "rule")]
    judge: String,
    /// File with one keyword pattern per line
    #[arg(long)]
    patterns: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SchedulerArgs {
    #[arg(long)]
    env: PathBuf,
    #[arg(long, default_value_t = 5000)]
    tick_ms: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Stop after this many ticks
    #[arg(long)]
    max_ticks: Option<u64>,
    /// Stop once nothing is new, pending or running
    #[arg(long)]
    until_idle: bool,
    /// Per-slot capacity; defaults to the environment's requirement
    #[arg(long)]
    slot_gpus: Option<u32>,
}

#[derive(Args, Debug)]
struct WorkerArgs {
    #[arg(long)]
    env: PathBuf,
    /// Store key of the codebase zip
    #[arg(long)]
    key: String,
    #[arg(long)]
    keep_workdir: bool,
}

#[derive(Args, Debug)]
struct ImplementArgs {
    #[arg(long)]
    env: PathBuf,
    #[arg(long)]
    idea: String,
    #[arg(long, default_value = "manual")]
    run_id: String,
    #[arg(long, default_value_t = 0)]
    epoch: u32,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value = "lattice-coder")]
    coder: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 2)]
    max_revisions: usize,
}

/// An error together with the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

type Outcome<T> = Result<T, Failure>;

trait Classify<T> {
    fn config_err(self) -> Outcome<T>;
    fn service_err(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config_err(self) -> Outcome<T> {
        self.map_err(|e| Failure { code: 1, err: e.into() })
    }
    fn service_err(self) -> Outcome<T> {
        self.map_err(|e| Failure { code: 2, err: e.into() })
    }
}

fn search_failure(e: SearchError) -> Failure {
    let code = match e {
        SearchError::Config(_) | SearchError::NoBaseline(_) => 1,
        SearchError::Gateway(_) | SearchError::Execution(_) => 2,
    };
    Failure { code, err: e.into() }
}

fn read_file(path: &Path) -> Outcome<Vec<u8>> {
    std::fs::read(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .config_err()
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Outcome<(T, Vec<u8>)> {
    let bytes = read_file(path)?;
    let value = serde_json::from_slice(&bytes)
        .with_context(|| format!("invalid config {}", path.display()))
        .config_err()?;
    Ok((value, bytes))
}

fn load_env(path: &Path) -> Outcome<(Environment, String)> {
    let bytes = read_file(path)?;
    let env = Environment::load(path)
        .with_context(|| format!("invalid environment {}", path.display()))
        .config_err()?;
    Ok((env, sha256_hex(&bytes)))
}

fn lattice_spec(env: &Environment) -> Outcome<LatticeTuneSpec> {
    match &env.synthetic {
        Some(SyntheticEnv::LatticeTune(spec)) => Ok(spec.clone()),
        _ => Err(anyhow!("this endpoint only works with a lattice_tune environment")).config_err(),
    }
}

/// Builds a model endpoint from `mutation`, `lattice-coder`, `script:PATH`
/// or `http:URL#MODEL`.
fn endpoint(spec: &str, env: &Environment, seed: u64) -> Outcome<Arc<dyn ModelEndpoint>> {
    if spec == "mutation" {
        return Ok(Arc::new(MutationIdeator::new(lattice_spec(env)?, seed)));
    }
    if spec == "lattice-coder" {
        return Ok(Arc::new(LatticeCoder { spec: lattice_spec(env)? }));
    }
    if let Some(path) = spec.strip_prefix("script:") {
        let text = String::from_utf8(read_file(Path::new(path))?).config_err()?;
        let script = ScriptedEndpoint::from_json(&text)
            .with_context(|| format!("invalid script {path}"))
            .config_err()?;
        return Ok(Arc::new(script));
    }
    if let Some(rest) = spec.strip_prefix("http:") {
        let (url, model) = rest
            .rsplit_once('#')
            .ok_or_else(|| anyhow!("expected http:URL#MODEL, got {spec}"))
            .config_err()?;
        return Ok(Arc::new(HttpEndpoint::new(url, model)));
    }
    Err(anyhow!("unknown endpoint {spec:?}")).config_err()
}

fn runner_for(env: &Environment) -> Arc<dyn EnvRunner> {
    match &env.synthetic {
        Some(s) => Arc::new(SyntheticRunner { env: s.clone() }),
        None => Arc::new(ProcessRunner),
    }
}

fn open_store(root: &Path) -> Outcome<Arc<FsStore>> {
    Ok(Arc::new(FsStore::open(root).service_err()?))
}

fn finish<T>(manifest: manifest::OpenManifest, result: Outcome<T>) -> Outcome<T> {
    let ok = result.is_ok();
    if let Err(e) = manifest.finish(ok) {
        log::error!("failed to finalize manifest: {e}");
    }
    result
}

fn default_report_options() -> ReportOptions<'static> {
    static RULE: std::sync::OnceLock<RuleJudge> = std::sync::OnceLock::new();
    ReportOptions {
        judge: RULE.get_or_init(RuleJudge::default),
        patterns: Vec::new(),
    }
}

fn cmd_search(cli: &Cli, a: &SearchArgs) -> Outcome<()> {
    let (mut cfg, cfg_bytes): (SearchConfig, _) = load_json(&a.config)?;
    if let Some(s) = cli.seed_override {
        cfg.seed = s;
    }
    cfg.validate().map_err(search_failure)?;
    let (env, env_digest) = load_env(&a.env)?;
    let config_digest = sha256_hex(&cfg_bytes);
    let run_id = a.run_id.clone().unwrap_or_else(|| {
        let id = sha256_hex(format!("{config_digest}{env_digest}{}", cfg.seed).as_bytes());
        format!("search-{}", &id[..12])
    });
    let out = a.out.clone().unwrap_or_else(|| Path::new("runs").join(&run_id));
    let mut m = RunManifest::new(&run_id, "search");
    m.config_digest = Some(config_digest);
    m.environment_digest = Some(env_digest);
    m.seed = Some(cfg.seed);
    let open = m.start(&out.join(MANIFEST_FILE)).config_err()?;

    let result = (|| {
        let ideator = endpoint(&a.ideator, &env, cfg.seed)?;
        let execution: Box<dyn ExecutionApi> = match a.backend.as_str() {
            "synthetic" => Box::new(SyntheticExecution::new(env.clone(), cfg.seed)),
            "pipeline" => {
                let store = open_store(&cli.store_root)?;
                let sink = Arc::new(FsSink::open(&cli.store_root).service_err()?);
                let worker = Arc::new(
                    Worker::new(store.clone(), cli.store_root.join("work")).register(env.env_id.clone(), runner_for(&env)),
                );
                let exec = PipelineExecution::new(
                    Arc::new(env.clone()),
                    endpoint(&a.coder, &env, cfg.seed)?,
                    ImplementerConfig::default(),
                    store,
                    sink,
                    worker,
                    WorkerPool::uniform(a.workers.max(1), env.resource_requirement),
                    Some(cli.store_root.join(STATE_FILE)),
                )
                .config_err()?
                .with_tick(Duration::from_millis(20));
                Box::new(exec)
            }
            other => return Err(anyhow!("unknown backend {other:?}")).config_err(),
        };
        let run = run_search(&cfg, &run_id, ideator.as_ref(), execution.as_ref(), &env).map_err(search_failure)?;
        let report = write_run(&out, &run_id, "search", &run.trajectories, &env, &default_report_options()).config_err()?;
        println!(
            "{run_id}: {} trajectories, best reward {:.6}, completion rate {:.3} -> {}",
            run.trajectories.len(),
            run.final_best(),
            report.completion_rate,
            out.display()
        );
        Ok(())
    })();
    finish(open, result)
}

fn cmd_best_of_n(cli: &Cli, a: &BestOfNArgs) -> Outcome<()> {
    let seed = cli.seed_override.unwrap_or(a.seed);
    let (env, env_digest) = load_env(&a.env)?;
    let run_id = format!("best-of-{}-{}-{seed}", a.n, &env_digest[..12]);
    let out = a.out.clone().unwrap_or_else(|| Path::new("runs").join(&run_id));
    let mut m = RunManifest::new(&run_id, "best-of-n");
    m.environment_digest = Some(env_digest);
    m.seed = Some(seed);
    let open = m.start(&out.join(MANIFEST_FILE)).config_err()?;
    let result = (|| {
        let ideator = endpoint(&a.ideator, &env, seed)?;
        let exec = SyntheticExecution::new(env.clone(), seed);
        let trajs = best_of_n(ideator.as_ref(), &exec, &env, &run_id, a.n).map_err(search_failure)?;
        write_run(&out, &run_id, "best_of_n", &trajs, &env, &default_report_options()).config_err()?;
        let best = trajs.iter().map(|t| t.reward).fold(0.0, f64::max);
        println!("{run_id}: {} samples, best reward {best:.6} -> {}", trajs.len(), out.display());
        Ok(())
    })();
    finish(open, result)
}

fn cmd_rlsim(cli: &Cli, a: &RlsimArgs) -> Outcome<()> {
    let (mut cfg, cfg_bytes): (RLConfig, _) = load_json(&a.config)?;
    if let Some(s) = cli.seed_override {
        cfg.seed = s;
    }
    let (env, env_digest) = match &a.env {
        Some(p) => {
            let (env, d) = load_env(p)?;
            (env, Some(d))
        }
        None => (Environment::two_mode(), None),
    };
    let spec: TwoModeSpec = match &env.synthetic {
        Some(SyntheticEnv::TwoMode(s)) => s.clone(),
        _ => return Err(anyhow!("rlsim needs a two_mode environment")).config_err(),
    };
    let (dir, dynamics_path) = if a.out.extension().is_some_and(|e| e == "jsonl") {
        let dir = a.out.parent().map(Path::to_path_buf).unwrap_or_default();
        (dir, a.out.clone())
    } else {
        (a.out.clone(), a.out.join(analysis::DYNAMICS_FILE))
    };
    let config_digest = sha256_hex(&cfg_bytes);
    let run_id = format!("rlsim-{}-{}", &config_digest[..12], cfg.seed);
    let mut m = RunManifest::new(&run_id, "rlsim");
    m.config_digest = Some(config_digest);
    m.environment_digest = env_digest;
    m.seed = Some(cfg.seed);
    let open = m.start(&dir.join(MANIFEST_FILE)).config_err()?;
    let result = (|| {
        let run = train_rl(&cfg, &spec).config_err()?;
        let file = std::fs::File::create(&dynamics_path)
            .with_context(|| format!("cannot write {}", dynamics_path.display()))
            .config_err()?;
        write_jsonl(std::io::BufWriter::new(file), &run.dynamics).config_err()?;
        let opts = ReportOptions {
            judge: &RuleJudge::default(),
            patterns: TwoModeSpec::EASY_PATTERNS.iter().map(|s| s.to_string()).collect(),
        };
        write_run(&dir, &run_id, "rlsim", &run.trajectories, &env, &opts).config_err()?;
        let last = run.dynamics.last();
        println!(
            "{run_id}: {} epochs, final avg reward {:.4}, converged {}/{} -> {}",
            run.dynamics.len(),
            last.map_or(0.0, |d| d.avg_reward),
            last.map_or(0, |d| d.converged_idea_count),
            cfg.group_size,
            dynamics_path.display()
        );
        Ok(())
    })();
    finish(open, result)
}

fn cmd_analyze(a: &AnalyzeArgs) -> Outcome<()> {
    let (dir, traj_path) = if a.path.is_dir() {
        (a.path.clone(), a.path.join(analysis::TRAJECTORIES_FILE))
    } else {
        (a.path.parent().map(Path::to_path_buf).unwrap_or_default(), a.path.clone())
    };
    let text = String::from_utf8(read_file(&traj_path)?).config_err()?;
    let records: Vec<TrajectoryRecord> = read_jsonl(&text)
        .with_context(|| format!("invalid trajectories in {}", traj_path.display()))
        .config_err()?;
    let meta: RunMeta = match std::fs::read(dir.join(analysis::RUN_META_FILE)) {
        Ok(bytes) => serde_json::from_slice(&bytes).context("invalid run_meta.json").config_err()?,
        Err(_) => RunMeta::default(),
    };
    let patterns = match &a.patterns {
        Some(p) => String::from_utf8(read_file(p)?)
            .config_err()?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect(),
        None => Vec::new(),
    };
    let model = match a.judge.strip_prefix("http:") {
        Some(_) => Some(endpoint(&a.judge, &Environment::lattice_tune(), 0)?),
        None => None,
    };
    let judge: Box<dyn Judge + '_> = if a.judge == "rule" {
        Box::new(RuleJudge::default())
    } else if let Some(path) = a.judge.strip_prefix("scripted:") {
        let text = String::from_utf8(read_file(Path::new(path))?).config_err()?;
        Box::new(analysis::ScriptedJudge::from_json(&text).config_err()?)
    } else if let Some(m) = &model {
        Box::new(analysis::ModelJudge { endpoint: m.as_ref() })
    } else {
        return Err(anyhow!("unknown judge {:?}", a.judge)).config_err();
    };
    let judge = judge.as_ref();
    let trajs: Vec<_> = records.into_iter().map(TrajectoryRecord::into_trajectory).collect();
    let rl_epochs = std::fs::read_to_string(dir.join(analysis::DYNAMICS_FILE))
        .map(|t| t.lines().filter(|l| !l.trim().is_empty()).count())
        .unwrap_or(0);
    let report = analysis::build_report(meta, &trajs, rl_epochs, &ReportOptions { judge, patterns }).map_err(|e| match e {
        analysis::AnalysisError::JudgeUnavailable(_) => Failure { code: 2, err: e.into() },
        other => Failure { code: 1, err: other.into() },
    })?;
    analysis::write_report(&dir, &report).config_err()?;
    println!(
        "{} ideas, completion rate {:.3} -> {}",
        report.ideas,
        report.completion_rate,
        dir.join(analysis::REPORT_JSON).display()
    );
    Ok(())
}

fn store_manifest(cli: &Cli, sub: &str, env_digest: &str) -> Outcome<manifest::OpenManifest> {
    let run_id = format!("{sub}-{}", std::process::id());
    let mut m = RunManifest::new(&run_id, sub);
    m.environment_digest = Some(env_digest.to_string());
    let path = cli
        .store_root
        .join("manifests")
        .join(format!("{sub}-{}-{}.json", m.started_unix_ms, std::process::id()));
    m.start(&path).config_err()
}

fn cmd_scheduler(cli: &Cli, a: &SchedulerArgs) -> Outcome<()> {
    let (env, env_digest) = load_env(&a.env)?;
    let open = store_manifest(cli, "scheduler", &env_digest)?;
    let result = (|| {
        let store = open_store(&cli.store_root)?;
        let sink = Arc::new(FsSink::open(&cli.store_root).service_err()?);
        let worker = Arc::new(Worker::new(store.clone(), cli.store_root.join("work")).register(env.env_id.clone(), runner_for(&env)));
        let mut capacity: Resources = env.resource_requirement;
        if let Some(g) = a.slot_gpus {
            capacity.gpus = g;
        }
        let mut sched = Scheduler::new(
            store,
            Arc::new(env),
            WorkerPool::uniform(a.workers.max(1), capacity),
            Arc::new(UploadingExecutor { worker, sink }),
            Some(cli.store_root.join(STATE_FILE)),
        )
        .config_err()?;
        let ticks = sched.run(&SystemClock, Duration::from_millis(a.tick_ms), a.max_ticks, a.until_idle);
        println!(
            "{ticks} ticks, {} digests seen, {} jobs still pending",
            sched.state.executed_digests.len(),
            sched.state.pending.len()
        );
        Ok(())
    })();
    finish(open, result)
}

fn cmd_worker(cli: &Cli, a: &WorkerArgs) -> Outcome<()> {
    let (env, env_digest) = load_env(&a.env)?;
    let open = store_manifest(cli, "worker", &env_digest)?;
    let result = (|| {
        let store = open_store(&cli.store_root)?;
        let sink = FsSink::open(&cli.store_root).service_err()?;
        let key = ArtifactKey::new(a.key.clone()).config_err()?;
        let bytes = store.get_artifact(&key).map_err(|e| match e {
            GatewayError::UnknownKey(_) => Failure { code: 1, err: e.into() },
            other => Failure { code: 2, err: other.into() },
        })?;
        let job = job_for(key, sha256_hex(&bytes), &env);
        let worker = Worker::new(store.clone(), cli.store_root.join("work"))
            .register(env.env_id.clone(), runner_for(&env))
            .keep_workdirs(a.keep_workdir);
        // each codebase executes at most once; a stored result is reported as is
        let (r, fresh) = match fetch_result(store.as_ref(), &job).service_err()? {
            Some(r) => (r, false),
            None => (worker.run_and_upload(&job, &sink).service_err()?, true),
        };
        println!(
            "{}",
            serde_json::json!({"key": job.codebase_key, "status": r.status,
                "metrics": r.metrics.records.len(), "executed_now": fresh})
        );
        Ok(())
    })();
    finish(open, result)
}

fn cmd_implement(cli: &Cli, a: &ImplementArgs) -> Outcome<()> {
    let (env, env_digest) = load_env(&a.env)?;
    let open = store_manifest(cli, "implement", &env_digest)?;
    let result = (|| {
        let store = open_store(&cli.store_root)?;
        let coder = endpoint(&a.coder, &env, cli.seed_override.unwrap_or(0))?;
        let idea = execforge::domain::Idea::fresh(format!("e{}-i{:03}", a.epoch, a.index), a.idea.clone());
        let target = ArtifactKey::codebase(&a.run_id, a.epoch, a.index).config_err()?;
        let cfg = ImplementerConfig {
            k_parallel: a.k,
            max_revisions: a.max_revisions,
        };
        match implement_idea(&idea, &env.baseline, &env.env_id, env.guard(), &cfg, coder.as_ref(), store.as_ref(), &target) {
            Ok(r) => {
                println!(
                    "{}",
                    serde_json::json!({"status": "implemented", "key": r.key, "digest": r.digest,
                        "winner_index": r.winner_index, "apply_attempts": r.total_attempts()})
                );
                Ok(())
            }
            Err(ImplementError::AllCandidatesFailed { attempts, .. }) => {
                println!("{}", serde_json::json!({"status": "all_candidates_failed", "apply_attempts": attempts}));
                Ok(())
            }
            Err(e @ ImplementError::Gateway(_)) => Err(e).service_err(),
            Err(e) => Err(e).config_err(),
        }
    })();
    finish(open, result)
}

fn run(cli: &Cli) -> Outcome<()> {
    match &cli.command {
        Command::Search(a) => cmd_search(cli, a),
        Command::BestOfN(a) => cmd_best_of_n(cli, a),
        Command::Rlsim(a) => cmd_rlsim(cli, a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Scheduler(a) => cmd_scheduler(cli, a),
        Command::Worker(a) => cmd_worker(cli, a),
        Command::Implement(a) => cmd_implement(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Debug } else { log::LevelFilter::Warn })
        .parse_env("EXECFORGE_LOG")
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, err }) => {
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
