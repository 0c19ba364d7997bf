//! In-process execution backend for search: each idea is implemented as a
//! patched codebase, uploaded, picked up by the scheduler and run by a
//! worker; the results are read back from the store.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::domain::{ExecutionStatus, Idea, MetricsLog, Trajectory};
use crate::environments::{evaluate, Environment, LatticeTuneSpec};
use crate::gateway::{ArtifactKey, ArtifactStore, Completion, GatewayError, MetricsSink, ModelEndpoint, ModelRequest};
use crate::implementer::{implement_idea, ImplementError, ImplementReport, ImplementerConfig};
use crate::scheduler::{Clock, Scheduler, StateError, SystemClock, WorkerPool};
use crate::search::{ExecutionApi, SearchError};
use crate::worker::{ExecutionResult, UploadingExecutor, Worker};

/// Ideas implemented at the same time; each runs its own candidate threads.
const IMPLEMENT_CONCURRENCY: usize = 8;

pub struct PipelineExecution {
    env: Arc<Environment>,
    coder: Arc<dyn ModelEndpoint>,
    implementer: ImplementerConfig,
    store: Arc<dyn ArtifactStore>,
    scheduler: Mutex<Scheduler>,
    clock: Box<dyn Clock + Send + Sync>,
    tick: Duration,
    /// Results by codebase digest, so ideas that produce an already executed
    /// tree reuse its outcome.
    by_digest: Mutex<HashMap<String, ExecutionResult>>,
}

impl PipelineExecution {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        env: Arc<Environment>,
        coder: Arc<dyn ModelEndpoint>,
        implementer: ImplementerConfig,
        store: Arc<dyn ArtifactStore>,
        sink: Arc<dyn MetricsSink>,
        worker: Arc<Worker>,
        pool: WorkerPool,
        state_path: Option<PathBuf>,
    ) -> Result<Self, StateError> {
        let executor = Arc::new(UploadingExecutor { worker, sink });
        let scheduler = Scheduler::new(Arc::clone(&store), Arc::clone(&env), pool, executor, state_path)?;
        Ok(Self {
            env,
            coder,
            implementer,
            store,
            scheduler: Mutex::new(scheduler),
            clock: Box::new(SystemClock),
            tick: Duration::from_millis(20),
            by_digest: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_tick(mut self, tick: Duration) -> Self {
        self.tick = tick;
        self
    }

    fn implement_all(&self, run_id: &str, epoch: u32, ideas: &[Idea]) -> Result<Vec<Result<ImplementReport, ImplementError>>, SearchError> {
        let keys = (0..ideas.len())
            .map(|j| ArtifactKey::codebase(run_id, epoch, j))
            .collect::<Result<Vec<_>, _>>()?;
        let mut out = Vec::with_capacity(ideas.len());
        for (chunk, keys) in ideas.chunks(IMPLEMENT_CONCURRENCY).zip(keys.chunks(IMPLEMENT_CONCURRENCY)) {
            let reports: Vec<_> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .zip(keys)
                    .map(|(idea, key)| {
                        s.spawn(move || {
                            implement_idea(
                                idea,
                                &self.env.baseline,
                                &self.env.env_id,
                                self.env.guard(),
                                &self.implementer,
                                self.coder.as_ref(),
                                self.store.as_ref(),
                                key,
                            )
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("implementer thread panicked")).collect()
            });
            out.extend(reports);
        }
        Ok(out)
    }

    /// Result for a codebase digest. The scheduler executes one key per
    /// digest, and which one depends on upload order, so every key of the
    /// batch that carries the digest is tried.
    fn lookup(&self, digest: &str, keys: &[&ArtifactKey]) -> Result<Option<ExecutionResult>, GatewayError> {
        if let Some(r) = self.by_digest.lock().unwrap().get(digest) {
            return Ok(Some(r.clone()));
        }
        for key in keys {
            let key = key.sibling("result.json");
            match self.store.get_artifact(&key) {
                Ok(bytes) => {
                    let r: ExecutionResult = serde_json::from_slice(&bytes)
                        .map_err(|e| GatewayError::StoreUnavailable(format!("corrupt result record {key}: {e}")))?;
                    self.by_digest.lock().unwrap().insert(digest.to_string(), r.clone());
                    return Ok(Some(r));
                }
                Err(GatewayError::UnknownKey(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        Ok(None)
    }
}

impl ExecutionApi for PipelineExecution {
    fn execute_batch(&self, run_id: &str, epoch: u32, ideas: Vec<Idea>) -> Result<Vec<Trajectory>, SearchError> {
        let reports = self.implement_all(run_id, epoch, &ideas)?;
        {
            let mut sched = self.scheduler.lock().unwrap();
            sched.run(self.clock.as_ref(), self.tick, None, true);
        }
        let mut keys_by_digest: HashMap<&str, Vec<&ArtifactKey>> = HashMap::new();
        for r in reports.iter().flatten() {
            keys_by_digest.entry(r.digest.as_str()).or_default().push(&r.key);
        }
        let mut results: HashMap<String, Option<ExecutionResult>> = HashMap::new();
        for (digest, keys) in &keys_by_digest {
            results.insert(digest.to_string(), self.lookup(digest, keys)?);
        }
        let mut out = Vec::with_capacity(ideas.len());
        for (idea, report) in ideas.into_iter().zip(reports) {
            let traj = match report {
                Ok(report) => {
                    let mut t = match results[&report.digest].clone() {
                        Some(r) => {
                            let reward = evaluate(&self.env, &r.metrics, r.status).value;
                            Trajectory::new(idea, epoch, r.status, r.metrics, reward, r.execution_log)
                        }
                        None => Trajectory::new(
                            idea,
                            epoch,
                            ExecutionStatus::RunFailed,
                            MetricsLog::default(),
                            0.0,
                            format!("no execution result for digest {}\n", report.digest),
                        ),
                    };
                    t.diff = Some(report.diff);
                    t.codebase_key = Some(report.key.to_string());
                    t
                }
                Err(ImplementError::AllCandidatesFailed { attempts, logs }) => Trajectory::new(
                    idea,
                    epoch,
                    ExecutionStatus::PatchFailed,
                    MetricsLog::default(),
                    0.0,
                    format!("all candidates failed after {attempts} apply attempts\n{}", logs.join("\n")),
                ),
                Err(ImplementError::Gateway(e)) => return Err(SearchError::Gateway(e)),
                Err(e) => return Err(SearchError::Execution(e.to_string())),
            };
            out.push(traj);
        }
        Ok(out)
    }
}

/// Mock coding model for LatticeTune: turns the idea's `set x=(..)` into a
/// one-line diff of `config.txt`. Ideas without a point get prose back,
/// which never applies.
#[derive(Debug, Clone, Default)]
pub struct LatticeCoder {
    pub spec: LatticeTuneSpec,
}

fn section<'a>(prompt: &'a str, heading: &str) -> &'a str {
    let Some(start) = prompt.find(heading) else { return "" };
    let rest = &prompt[start + heading.len()..];
    rest.find("\n## ").map_or(rest, |end| &rest[..end])
}

impl ModelEndpoint for LatticeCoder {
    fn generate(&self, req: &ModelRequest) -> Result<Vec<Completion>, GatewayError> {
        req.validate()?;
        let idea = self.spec.parse_point(section(&req.prompt, "## Idea\n"));
        let current = section(&req.prompt, "=== config.txt ===\n").lines().next().unwrap_or("");
        let body = match idea {
            Some(x) if !current.is_empty() => format!(
                "```diff\n--- a/config.txt\n+++ b/config.txt\n@@ -1 +1 @@\n-{current}\n+{}\n```\n",
                LatticeTuneSpec::format_point(&x)
            ),
            _ => "I could not find a configuration change in this idea.".to_string(),
        };
        Ok(vec![Completion::body(body); req.n_samples])
    }
}
