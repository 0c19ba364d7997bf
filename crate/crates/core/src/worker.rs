//! Executes one job: unpack the codebase into a private working directory,
//! run the environment entrypoint under its time budget, collect metrics,
//! and upload everything, failures included.

use std::collections::HashMap;
use std::fs::File;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::domain::{ExecutionStatus, MetricRecord, MetricsLog};
use crate::environments::{synth_execute, RunOutcome, SyntheticEnv};
use crate::gateway::{with_retries, ArtifactStore, GatewayError, MetricsSink, RetryPolicy};
use crate::implementer::tree::FileTree;
use crate::implementer::CodebaseMetadata;
use crate::scheduler::{JobConfig, JobExecutor};

pub const METRICS_FILE: &str = "metrics.jsonl";
const OUTPUT_FILE: &str = ".execforge_output.log";
const MAX_LOG_BYTES: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionMetadata {
    pub idea_text: Option<String>,
    pub diff: Option<String>,
    pub env_id: String,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub job: JobConfig,
    pub status: ExecutionStatus,
    pub metrics: MetricsLog,
    pub execution_log: String,
    pub metadata: ExecutionMetadata,
}

/// Runs an unpacked codebase in `workdir`.
pub trait EnvRunner: Send + Sync {
    fn run(&self, job: &JobConfig, workdir: &Path) -> RunOutcome;
}

/// Runs the job's entrypoint as a child process in its own process group;
/// the whole group is killed when the time budget runs out.
#[derive(Debug, Clone, Default)]
pub struct ProcessRunner;

fn kill_group(pid: u32) {
    // SAFETY: signalling a process group we created; ESRCH is harmless.
    unsafe {
        libc::kill(-(pid as i32), libc::SIGKILL);
    }
}

fn read_tail(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap_or_default();
    let start = bytes.len().saturating_sub(MAX_LOG_BYTES);
    String::from_utf8_lossy(&bytes[start..]).into_owned()
}

#[derive(Deserialize)]
struct MetricLine {
    step: u64,
    name: String,
    value: f64,
}

/// Parses the entrypoint's `metrics.jsonl`.
pub fn parse_metrics_file(text: &str, terminal: bool) -> Result<MetricsLog, String> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let m: MetricLine =
            serde_json::from_str(line).map_err(|e| format!("{METRICS_FILE} line {}: {e}", i + 1))?;
        records.push(MetricRecord {
            step: m.step,
            name: m.name,
            value: m.value,
        });
    }
    MetricsLog::new(records, terminal).map_err(|e| e.to_string())
}

impl EnvRunner for ProcessRunner {
    fn run(&self, job: &JobConfig, workdir: &Path) -> RunOutcome {
        let fail = |status, log: String| RunOutcome {
            status,
            metrics: MetricsLog::default(),
            execution_log: log,
        };
        let Some((program, args)) = job.entrypoint.0.split_first() else {
            return fail(ExecutionStatus::RunFailed, "job has no entrypoint\n".into());
        };
        let out_path = workdir.join(OUTPUT_FILE);
        let spawned = File::create(&out_path).and_then(|out| {
            let err = out.try_clone()?;
            Command::new(program)
                .args(args)
                .current_dir(workdir)
                .stdin(Stdio::null())
                .stdout(out)
                .stderr(err)
                .process_group(0)
                .spawn()
        });
        let mut child = match spawned {
            Ok(c) => c,
            Err(e) => return fail(ExecutionStatus::RunFailed, format!("failed to start {program}: {e}\n")),
        };
        let deadline = Instant::now() + job.time_budget();
        let mut poll = Duration::from_millis(2);
        let exit = loop {
            match child.try_wait() {
                Ok(Some(status)) => break Some(status),
                Ok(None) if Instant::now() >= deadline => break None,
                Ok(None) => {
                    std::thread::sleep(poll.min(deadline.saturating_duration_since(Instant::now())));
                    poll = (poll * 2).min(Duration::from_millis(50));
                }
                Err(e) => {
                    kill_group(child.id());
                    let _ = child.wait();
                    return fail(ExecutionStatus::RunFailed, format!("waiting on child failed: {e}\n"));
                }
            }
        };
        // stray grandchildren die with the group either way
        kill_group(child.id());
        if exit.is_none() {
            let _ = child.wait();
        }
        let mut log = read_tail(&out_path);
        let metrics_text = std::fs::read_to_string(workdir.join(METRICS_FILE)).ok();
        let terminal = exit.is_some_and(|s| s.success());
        let metrics = match metrics_text.as_deref().map(|t| parse_metrics_file(t, terminal)) {
            Some(Ok(m)) => Some(m),
            Some(Err(e)) => {
                log.push_str(&format!("\n[execforge] unparseable metrics: {e}\n"));
                None
            }
            None => None,
        };
        let status = match exit {
            None => {
                log.push_str(&format!("\n[execforge] killed after time budget of {:?}\n", job.time_budget()));
                ExecutionStatus::TimedOut
            }
            Some(s) if !s.success() => {
                log.push_str(&format!("\n[execforge] entrypoint exited with {s}\n"));
                ExecutionStatus::RunFailed
            }
            Some(_) if metrics.as_ref().is_none_or(MetricsLog::is_empty) => {
                log.push_str(&format!("\n[execforge] entrypoint exited cleanly but wrote no usable {METRICS_FILE}\n"));
                ExecutionStatus::RunFailed
            }
            Some(_) => ExecutionStatus::Succeeded,
        };
        RunOutcome {
            status,
            metrics: metrics.unwrap_or_default(),
            execution_log: log,
        }
    }
}

/// Evaluates a synthetic environment against the unpacked codebase: every
/// file's text, in path order, is read as the executed idea.
#[derive(Debug, Clone)]
pub struct SyntheticRunner {
    pub env: SyntheticEnv,
}

impl EnvRunner for SyntheticRunner {
    fn run(&self, job: &JobConfig, workdir: &Path) -> RunOutcome {
        let text = match FileTree::from_dir(workdir) {
            Ok(t) => t.iter().map(|(_, c)| c).collect::<Vec<_>>().join("\n"),
            Err(e) => {
                return RunOutcome {
                    status: ExecutionStatus::RunFailed,
                    metrics: MetricsLog::default(),
                    execution_log: format!("cannot read codebase: {e}\n"),
                }
            }
        };
        let seed = u64::from_str_radix(&job.codebase_digest[..16.min(job.codebase_digest.len())], 16).unwrap_or(0);
        synth_execute(&self.env, &text, seed)
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Executes jobs for the environments it has runners for.
pub struct Worker {
    store: Arc<dyn ArtifactStore>,
    runners: HashMap<String, Arc<dyn EnvRunner>>,
    work_root: PathBuf,
    keep_workdirs: bool,
    counter: AtomicU64,
}

impl Worker {
    pub fn new(store: Arc<dyn ArtifactStore>, work_root: impl Into<PathBuf>) -> Self {
        Self {
            store,
            runners: HashMap::new(),
            work_root: work_root.into(),
            keep_workdirs: false,
            counter: AtomicU64::new(0),
        }
    }

    pub fn register(mut self, env_id: impl Into<String>, runner: Arc<dyn EnvRunner>) -> Self {
        self.runners.insert(env_id.into(), runner);
        self
    }

    pub fn keep_workdirs(mut self, keep: bool) -> Self {
        self.keep_workdirs = keep;
        self
    }

    /// Creates a working directory no other execution uses.
    fn fresh_workdir(&self, job: &JobConfig) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(&self.work_root)?;
        loop {
            let n = self.counter.fetch_add(1, Ordering::SeqCst);
            let short = &job.codebase_digest[..12.min(job.codebase_digest.len())];
            let dir = self.work_root.join(format!("{short}-{}-{n}", std::process::id()));
            match std::fs::create_dir(&dir) {
                Ok(()) => return Ok(dir),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e),
            }
        }
    }

    fn metadata(&self, job: &JobConfig, started: u64) -> ExecutionMetadata {
        let meta: Option<CodebaseMetadata> = self
            .store
            .get_artifact(&job.codebase_key.sibling("meta.json"))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok());
        ExecutionMetadata {
            idea_text: meta.as_ref().map(|m| m.idea_text.clone()),
            diff: meta.map(|m| m.diff),
            env_id: job.env_id.clone(),
            started_unix_ms: started,
            finished_unix_ms: now_ms(),
        }
    }

    /// Never fails: every failure mode is encoded in the result's status.
    pub fn execute(&self, job: &JobConfig) -> ExecutionResult {
        let started = now_ms();
        let outcome = self.execute_inner(job);
        ExecutionResult {
            job: job.clone(),
            status: outcome.status,
            metrics: outcome.metrics,
            execution_log: outcome.execution_log,
            metadata: self.metadata(job, started),
        }
    }

    fn execute_inner(&self, job: &JobConfig) -> RunOutcome {
        let fail = |log: String| RunOutcome {
            status: ExecutionStatus::RunFailed,
            metrics: MetricsLog::default(),
            execution_log: log,
        };
        let Some(runner) = self.runners.get(&job.env_id) else {
            return fail(format!("no runner registered for environment {}\n", job.env_id));
        };
        let bytes = match self.store.get_artifact(&job.codebase_key) {
            Ok(b) => b,
            Err(e) => return fail(format!("cannot fetch {}: {e}\n", job.codebase_key)),
        };
        let tree = match FileTree::from_zip(&bytes) {
            Ok(t) => t,
            Err(e) => return fail(format!("cannot unpack {}: {e}\n", job.codebase_key)),
        };
        let workdir = match self.fresh_workdir(job) {
            Ok(d) => d,
            Err(e) => return fail(format!("cannot create working directory: {e}\n")),
        };
        let outcome = match tree.write_to_dir(&workdir) {
            Ok(()) => runner.run(job, &workdir),
            Err(e) => fail(format!("cannot unpack into {}: {e}\n", workdir.display())),
        };
        if !self.keep_workdirs {
            let _ = std::fs::remove_dir_all(&workdir);
        }
        outcome
    }

    /// Executes and uploads; used as the scheduler's job executor.
    pub fn run_and_upload(&self, job: &JobConfig, sink: &dyn MetricsSink) -> Result<ExecutionResult, GatewayError> {
        let result = self.execute(job);
        upload_result(&result, self.store.as_ref(), sink, RetryPolicy::default(), std::thread::sleep)?;
        Ok(result)
    }
}

/// Store key where an execution's result record lives.
pub fn result_key(job: &JobConfig) -> crate::gateway::ArtifactKey {
    job.codebase_key.sibling("result.json")
}

/// Uploads metrics to the sink and the log plus the full result record to
/// the store, next to the codebase. Safe to repeat.
pub fn upload_result(
    result: &ExecutionResult,
    store: &dyn ArtifactStore,
    sink: &dyn MetricsSink,
    retry: RetryPolicy,
    mut sleep: impl FnMut(Duration),
) -> Result<(), GatewayError> {
    let key = &result.job.codebase_key;
    let run_scope = key.run_scope();
    if !result.metrics.is_empty() {
        with_retries(retry, &mut sleep, || sink.log_metrics(&run_scope, &result.metrics.records))?;
    }
    with_retries(retry, &mut sleep, || {
        store.put_artifact(&key.sibling("log"), result.execution_log.as_bytes())
    })?;
    let body = serde_json::to_vec_pretty(result).expect("result serializes");
    with_retries(retry, &mut sleep, || store.put_artifact(&result_key(&result.job), &body))?;
    Ok(())
}

/// Fetches a previously uploaded result.
pub fn fetch_result(store: &dyn ArtifactStore, job: &JobConfig) -> Result<Option<ExecutionResult>, GatewayError> {
    match store.get_artifact(&result_key(job)) {
        Ok(b) => serde_json::from_slice(&b)
            .map(Some)
            .map_err(|e| GatewayError::StoreUnavailable(format!("corrupt result record: {e}"))),
        Err(GatewayError::UnknownKey(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Adapts a worker plus metrics sink to the scheduler's executor interface.
pub struct UploadingExecutor {
    pub worker: Arc<Worker>,
    pub sink: Arc<dyn MetricsSink>,
}

impl JobExecutor for UploadingExecutor {
    fn run_job(&self, job: &JobConfig) {
        match self.worker.run_and_upload(job, self.sink.as_ref()) {
            Ok(r) => log::info!("{} finished: {:?}", job.codebase_key, r.status),
            Err(e) => log::error!("{} finished but upload failed: {e}", job.codebase_key),
        }
    }
}
