//! Polls the artifact bucket for new codebases, deduplicates them by content
//! digest, and hands job configurations to free worker slots.

use std::collections::{BTreeSet, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environments::{CommandSpec, Environment, Resources};
use crate::gateway::{sha256_hex, ArtifactKey, ArtifactStore, Cursor, GatewayError};

pub const STATE_FILE: &str = "scheduler_state.json";
pub const DEFAULT_TICK: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobConfig {
    pub codebase_key: ArtifactKey,
    pub codebase_digest: String,
    pub env_id: String,
    pub resource_requirement: Resources,
    pub time_budget_s: f64,
    pub entrypoint: CommandSpec,
}

impl JobConfig {
    pub fn time_budget(&self) -> Duration {
        Duration::from_secs_f64(self.time_budget_s)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub cursor: Cursor,
    /// Digests already enqueued; never enqueued again.
    pub executed_digests: BTreeSet<String>,
    pub pending: VecDeque<JobConfig>,
}

#[derive(Debug, Error)]
pub enum StateError {
    #[error("scheduler state io at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt scheduler state: {0}")]
    Corrupt(#[from] serde_json::Error),
}

impl SchedulerState {
    /// Loads the state file, or starts fresh when it does not exist.
    pub fn load(path: &Path) -> Result<Self, StateError> {
        match std::fs::read_to_string(path) {
            Ok(text) => Ok(serde_json::from_str(&text)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(source) => Err(StateError::Io {
                path: path.display().to_string(),
                source,
            }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), StateError> {
        let io = |source| StateError::Io {
            path: path.display().to_string(),
            source,
        };
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }
}

/// Job configuration for running `key` in `env`.
pub fn job_for(key: ArtifactKey, digest: String, env: &Environment) -> JobConfig {
    JobConfig {
        codebase_key: key,
        codebase_digest: digest,
        env_id: env.env_id.clone(),
        resource_requirement: env.resource_requirement,
        time_budget_s: env.time_budget.as_secs_f64(),
        entrypoint: env.entrypoint.clone(),
    }
}

/// Fetches every codebase uploaded since the last poll and enqueues those
/// with unseen digests. On a store failure the state is left untouched.
pub fn poll_once(
    state: &mut SchedulerState,
    store: &dyn ArtifactStore,
    env: &Environment,
) -> Result<Vec<JobConfig>, GatewayError> {
    let (keys, cursor) = store.list_new(state.cursor)?;
    let mut seen_now = BTreeSet::new();
    let mut jobs = Vec::new();
    for key in keys.into_iter().filter(ArtifactKey::is_codebase) {
        let digest = sha256_hex(&store.get_artifact(&key)?);
        if state.executed_digests.contains(&digest) || !seen_now.insert(digest.clone()) {
            log::debug!("skipping {key}: digest {digest} already scheduled");
            continue;
        }
        jobs.push(job_for(key, digest, env));
    }
    state.cursor = cursor;
    state.executed_digests.extend(seen_now);
    state.pending.extend(jobs.iter().cloned());
    Ok(jobs)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerSlot {
    pub id: usize,
    pub capacity: Resources,
    pub busy: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WorkerPool {
    pub slots: Vec<WorkerSlot>,
}

impl WorkerPool {
    pub fn uniform(n: usize, capacity: Resources) -> Self {
        Self {
            slots: (0..n)
                .map(|id| WorkerSlot {
                    id,
                    capacity,
                    busy: false,
                })
                .collect(),
        }
    }

    pub fn release(&mut self, slot: usize) {
        if let Some(s) = self.slots.iter_mut().find(|s| s.id == slot) {
            s.busy = false;
        }
    }

    pub fn busy_count(&self) -> usize {
        self.slots.iter().filter(|s| s.busy).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub slot: usize,
    pub job: JobConfig,
}

/// Assigns pending jobs, in FIFO order, to idle slots that can hold them.
/// Jobs that fit no idle slot stay pending in their original order.
pub fn dispatch(state: &mut SchedulerState, pool: &mut WorkerPool) -> Vec<Assignment> {
    let mut assignments = Vec::new();
    let mut remaining = VecDeque::with_capacity(state.pending.len());
    while let Some(job) = state.pending.pop_front() {
        let slot = pool
            .slots
            .iter_mut()
            .find(|s| !s.busy && job.resource_requirement.fits_in(&s.capacity));
        match slot {
            Some(s) => {
                s.busy = true;
                assignments.push(Assignment { slot: s.id, job });
            }
            None => remaining.push_back(job),
        }
    }
    state.pending = remaining;
    assignments
}

/// Runs one job to completion, including uploading its result.
pub trait JobExecutor: Send + Sync {
    fn run_job(&self, job: &JobConfig);
}

impl<F: Fn(&JobConfig) + Send + Sync> JobExecutor for F {
    fn run_job(&self, job: &JobConfig) {
        self(job)
    }
}

pub trait Clock {
    fn sleep(&self, d: Duration);
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Clock for tests: a tick advances virtual time by its full length but
/// only yields the thread for a millisecond of real time.
#[derive(Default)]
pub struct VirtualClock {
    elapsed: std::sync::Mutex<Duration>,
}

impl VirtualClock {
    pub fn elapsed(&self) -> Duration {
        *self.elapsed.lock().unwrap()
    }
}

impl Clock for VirtualClock {
    fn sleep(&self, d: Duration) {
        *self.elapsed.lock().unwrap() += d;
        std::thread::sleep(Duration::from_millis(1));
    }
}

/// The polling loop: owns the state and the pool; jobs run on their own
/// threads and report completion over a channel.
pub struct Scheduler {
    pub state: SchedulerState,
    pub pool: WorkerPool,
    state_path: Option<PathBuf>,
    store: Arc<dyn ArtifactStore>,
    env: Arc<Environment>,
    executor: Arc<dyn JobExecutor>,
    done_tx: mpsc::Sender<usize>,
    done_rx: mpsc::Receiver<usize>,
    in_flight: Vec<std::thread::JoinHandle<()>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TickReport {
    pub enqueued: usize,
    pub dispatched: usize,
    pub completed: usize,
    pub poll_failed: bool,
}

impl Scheduler {
    /// `state_path` persists the state after every change; pass the store
    /// root's `scheduler_state.json` so restarts resume where they left off.
    pub fn new(
        store: Arc<dyn ArtifactStore>,
        env: Arc<Environment>,
        pool: WorkerPool,
        executor: Arc<dyn JobExecutor>,
        state_path: Option<PathBuf>,
    ) -> Result<Self, StateError> {
        let state = match &state_path {
            Some(p) => SchedulerState::load(p)?,
            None => SchedulerState::default(),
        };
        let (done_tx, done_rx) = mpsc::channel();
        Ok(Self {
            state,
            pool,
            state_path,
            store,
            env,
            executor,
            done_tx,
            done_rx,
            in_flight: Vec::new(),
        })
    }

    fn persist(&self) {
        if let Some(p) = &self.state_path {
            if let Err(e) = self.state.save(p) {
                log::error!("failed to persist scheduler state: {e}");
            }
        }
    }

    fn reap(&mut self) -> usize {
        let mut n = 0;
        while let Ok(slot) = self.done_rx.try_recv() {
            self.pool.release(slot);
            n += 1;
        }
        self.in_flight.retain(|h| !h.is_finished());
        n
    }

    /// Frees finished slots, polls once, and dispatches.
    pub fn tick(&mut self) -> TickReport {
        let mut report = TickReport {
            completed: self.reap(),
            ..Default::default()
        };
        match poll_once(&mut self.state, self.store.as_ref(), &self.env) {
            Ok(jobs) => {
                report.enqueued = jobs.len();
                if !jobs.is_empty() {
                    log::info!("enqueued {} new job(s)", jobs.len());
                }
            }
            Err(e) => {
                log::warn!("poll failed, retrying next tick: {e}");
                report.poll_failed = true;
            }
        }
        let assignments = dispatch(&mut self.state, &mut self.pool);
        report.dispatched = assignments.len();
        self.persist();
        for Assignment { slot, job } in assignments {
            let executor = Arc::clone(&self.executor);
            let tx = self.done_tx.clone();
            self.in_flight.push(std::thread::spawn(move || {
                executor.run_job(&job);
                let _ = tx.send(slot);
            }));
        }
        report
    }

    pub fn is_idle(&self) -> bool {
        self.state.pending.is_empty() && self.pool.busy_count() == 0
    }

    /// Blocks until every running job has finished and its slot is free.
    pub fn drain(&mut self) {
        for h in std::mem::take(&mut self.in_flight) {
            let _ = h.join();
        }
        self.reap();
    }

    /// Ticks until `max_ticks` is reached, or, with `stop_when_idle`, until a
    /// tick finds nothing new, nothing pending and nothing running.
    pub fn run(&mut self, clock: &dyn Clock, tick: Duration, max_ticks: Option<u64>, stop_when_idle: bool) -> u64 {
        let mut ticks = 0;
        loop {
            let r = self.tick();
            ticks += 1;
            if max_ticks.is_some_and(|m| ticks >= m) {
                break;
            }
            if stop_when_idle && r.enqueued == 0 && !r.poll_failed && self.is_idle() {
                break;
            }
            clock.sleep(tick);
        }
        self.drain();
        ticks
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MemoryStore;

    fn env_with(gpus: u32) -> Environment {
        let mut env = Environment::lattice_tune();
        env.resource_requirement = Resources { gpus, cpus: 1, memory_mb: 1 };
        env
    }

    fn upload(store: &MemoryStore, idx: usize, content: &[u8]) {
        store
            .put_artifact(&ArtifactKey::codebase("r", 0, idx).unwrap(), content)
            .unwrap();
    }

    #[test]
    fn three_novel_keys_three_jobs() {
        let store = MemoryStore::new();
        for i in 0..3 {
            upload(&store, i, format!("c{i}").as_bytes());
        }
        let mut st = SchedulerState::default();
        assert_eq!(poll_once(&mut st, &store, &env_with(0)).unwrap().len(), 3);
        assert_eq!(st.pending.len(), 3);
        // nothing new: empty, cursor unchanged
        let cursor = st.cursor;
        assert!(poll_once(&mut st, &store, &env_with(0)).unwrap().is_empty());
        assert_eq!(st.cursor, cursor);
    }

    #[test]
    fn duplicate_content_yields_one_job() {
        let store = MemoryStore::new();
        upload(&store, 0, b"same");
        upload(&store, 1, b"same");
        let mut st = SchedulerState::default();
        assert_eq!(poll_once(&mut st, &store, &env_with(0)).unwrap().len(), 1);
        upload(&store, 2, b"same");
        assert!(poll_once(&mut st, &store, &env_with(0)).unwrap().is_empty());
    }

    #[test]
    fn non_codebase_keys_ignored() {
        let store = MemoryStore::new();
        store.put_artifact(&ArtifactKey::new("runs/r/epoch0/idea0.log").unwrap(), b"x").unwrap();
        let mut st = SchedulerState::default();
        assert!(poll_once(&mut st, &store, &env_with(0)).unwrap().is_empty());
    }

    struct Flaky(MemoryStore);
    impl ArtifactStore for Flaky {
        fn put_artifact(&self, k: &ArtifactKey, b: &[u8]) -> Result<String, GatewayError> {
            self.0.put_artifact(k, b)
        }
        fn get_artifact(&self, _: &ArtifactKey) -> Result<Vec<u8>, GatewayError> {
            Err(GatewayError::StoreUnavailable("down".into()))
        }
        fn list_new(&self, c: Cursor) -> Result<(Vec<ArtifactKey>, Cursor), GatewayError> {
            self.0.list_new(c)
        }
    }

    #[test]
    fn store_failure_leaves_state_unchanged() {
        let store = Flaky(MemoryStore::new());
        store.put_artifact(&ArtifactKey::codebase("r", 0, 0).unwrap(), b"a").unwrap();
        let mut st = SchedulerState::default();
        assert!(poll_once(&mut st, &store, &env_with(0)).is_err());
        assert_eq!(st, SchedulerState::default());
    }

    fn job(n: usize, gpus: u32) -> JobConfig {
        job_for(ArtifactKey::codebase("r", 0, n).unwrap(), format!("d{n}"), &env_with(gpus))
    }

    #[test]
    fn dispatch_fifo_into_free_slots() {
        let mut st = SchedulerState::default();
        st.pending.extend((0..5).map(|i| job(i, 0)));
        let mut pool = WorkerPool::uniform(2, Resources { gpus: 1, cpus: 8, memory_mb: 1024 });
        let a = dispatch(&mut st, &mut pool);
        assert_eq!(a.iter().map(|a| a.job.codebase_digest.as_str()).collect::<Vec<_>>(), ["d0", "d1"]);
        assert_eq!(st.pending.len(), 3);
        assert!(dispatch(&mut st, &mut pool).is_empty());
        pool.release(a[0].slot);
        assert_eq!(dispatch(&mut st, &mut pool)[0].job.codebase_digest, "d2");
    }

    #[test]
    fn oversized_job_stays_pending_without_blocking_others() {
        let mut st = SchedulerState::default();
        st.pending.push_back(job(0, 8));
        st.pending.push_back(job(1, 1));
        let mut pool = WorkerPool::uniform(2, Resources { gpus: 1, cpus: 8, memory_mb: 1024 });
        let a = dispatch(&mut st, &mut pool);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].job.codebase_digest, "d1");
        assert_eq!(st.pending.len(), 1);
        assert_eq!(st.pending[0].resource_requirement.gpus, 8);
        let mut empty = SchedulerState::default();
        assert!(dispatch(&mut empty, &mut pool).is_empty());
    }

    #[test]
    fn state_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(STATE_FILE);
        let mut st = SchedulerState::default();
        st.cursor = Cursor(4);
        st.executed_digests.insert("abc".into());
        st.pending.push_back(job(1, 0));
        st.save(&path).unwrap();
        assert_eq!(SchedulerState::load(&path).unwrap(), st);
        assert_eq!(SchedulerState::load(&dir.path().join("missing.json")).unwrap(), SchedulerState::default());
    }

    #[test]
    fn loop_runs_each_job_once_and_stops_when_idle() {
        let store = Arc::new(MemoryStore::new());
        for i in 0..6 {
            upload(&store, i, format!("c{}", i % 4).as_bytes());
        }
        let runs = Arc::new(std::sync::Mutex::new(Vec::new()));
        let r2 = Arc::clone(&runs);
        let exec = move |j: &JobConfig| r2.lock().unwrap().push(j.codebase_digest.clone());
        let mut s = Scheduler::new(
            store,
            Arc::new(env_with(0)),
            WorkerPool::uniform(2, Resources { gpus: 0, cpus: 4, memory_mb: 1024 }),
            Arc::new(exec),
            None,
        )
        .unwrap();
        let clock = VirtualClock::default();
        s.run(&clock, DEFAULT_TICK, None, true);
        assert_eq!(runs.lock().unwrap().len(), 4);
        assert!(s.is_idle());
    }
}
