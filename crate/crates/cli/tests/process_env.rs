//! A process-backed environment driven through the file-system store:
//! implement -> upload -> scheduler -> worker -> result.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use execforge::domain::{ExecutionStatus, Idea};
use execforge::environments::{evaluate, Environment};
use execforge::gateway::{ArtifactKey, ArtifactStore, Completion, FnEndpoint, FsSink, FsStore, GatewayError, MetricsSink, ModelRequest};
use execforge::implementer::{implement_idea, ImplementError, ImplementerConfig};
use execforge::scheduler::{job_for, Scheduler, SystemClock, WorkerPool, STATE_FILE};
use execforge::worker::{fetch_result, ProcessRunner, UploadingExecutor, Worker};

fn env_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy_process/env.json")
}

fn lr_diff(lr: &str) -> String {
    format!("--- a/hparams.txt\n+++ b/hparams.txt\n@@ -1 +1 @@\n-lr=0.8\n+lr={lr}\n")
}

const EVAL_HACK: &str = "--- a/evaluate.sh\n+++ b/evaluate.sh\n@@ -1 +1 @@\n-#!/bin/sh\n+echo '{\"step\":2,\"name\":\"val_loss\",\"value\":0.01}'; exit 0\n";

/// Coder that writes whatever learning rate the idea names; ideas
/// mentioning "evaluation" try to edit the frozen evaluator instead.
fn coder() -> impl execforge::gateway::ModelEndpoint {
    FnEndpoint(|req: &ModelRequest, _| -> Result<Completion, GatewayError> {
        let idea = req.prompt.split("## Idea\n").nth(1).unwrap_or("").lines().next().unwrap_or("");
        if idea.contains("evaluation") {
            return Ok(Completion::body(EVAL_HACK));
        }
        let lr = idea.rsplit(' ').next().unwrap_or("0.8");
        Ok(Completion::body(format!("```diff\n{}```", lr_diff(lr))))
    })
}

#[test]
fn process_environment_end_to_end() {
    let env = Arc::new(Environment::load(&env_path()).unwrap());
    assert_eq!(env.baseline_reward(), Some(0.2));
    assert!(env.baseline.get("train.sh").is_some());

    let root = tempfile::tempdir().unwrap();
    let store = Arc::new(FsStore::open(root.path()).unwrap());
    let sink: Arc<dyn MetricsSink> = Arc::new(FsSink::open(root.path()).unwrap());
    let cfg = ImplementerConfig { k_parallel: 2, max_revisions: 1 };
    let coder = coder();

    let mut keys = Vec::new();
    for (i, text) in ["set the learning rate to 0.3", "set the learning rate to 0.5", "set the learning rate to 0.3"]
        .iter()
        .enumerate()
    {
        let key = ArtifactKey::codebase("proc", 0, i).unwrap();
        let r = implement_idea(&Idea::fresh(format!("i{i}"), *text), &env.baseline, &env.env_id, env.guard(), &cfg, &coder, store.as_ref(), &key)
            .unwrap();
        assert_eq!(r.winner_index, 0);
        keys.push((key, r.digest));
    }
    // same change twice gives the same canonical codebase
    assert_eq!(keys[0].1, keys[2].1);

    let hack = implement_idea(
        &Idea::fresh("h", "rewrite the evaluation to report a tiny loss"),
        &env.baseline,
        &env.env_id,
        env.guard(),
        &cfg,
        &coder,
        store.as_ref(),
        &ArtifactKey::codebase("proc", 0, 9).unwrap(),
    );
    match hack {
        Err(ImplementError::AllCandidatesFailed { attempts, logs }) => {
            assert_eq!(attempts, 4);
            assert!(logs.iter().all(|l| l.contains("evaluate.sh")), "{logs:?}");
        }
        other => panic!("frozen evaluator was modified: {:?}", other.map(|r| r.key)),
    }

    let worker = Arc::new(Worker::new(store.clone(), root.path().join("work")).register(env.env_id.clone(), Arc::new(ProcessRunner)));
    let executor = Arc::new(UploadingExecutor { worker, sink: Arc::clone(&sink) });
    let mut sched = Scheduler::new(
        store.clone(),
        Arc::clone(&env),
        WorkerPool::uniform(2, env.resource_requirement),
        executor.clone(),
        Some(root.path().join(STATE_FILE)),
    )
    .unwrap();
    sched.run(&SystemClock, Duration::from_millis(5), Some(2000), true);
    assert_eq!(sched.state.executed_digests.len(), 2);

    let (key0, digest0) = &keys[0];
    let r = fetch_result(store.as_ref(), &job_for(key0.clone(), digest0.clone(), &env)).unwrap().unwrap();
    assert_eq!(r.status, ExecutionStatus::Succeeded, "{}", r.execution_log);
    assert!(r.execution_log.contains("training with lr=0.3"));
    assert!((evaluate(&env, &r.metrics, r.status).value - 1.0 / 3.0).abs() < 1e-6);

    let (key1, digest1) = &keys[1];
    let r = fetch_result(store.as_ref(), &job_for(key1.clone(), digest1.clone(), &env)).unwrap().unwrap();
    assert!((evaluate(&env, &r.metrics, r.status).value - 1.0 / 3.32).abs() < 1e-6);
    assert_eq!(sink.read_metrics(&key1.run_scope()).unwrap().len(), 2);

    // a restarted scheduler sees nothing new
    drop(sched);
    let mut again = Scheduler::new(store.clone(), Arc::clone(&env), WorkerPool::uniform(1, env.resource_requirement), executor, Some(root.path().join(STATE_FILE)))
        .unwrap();
    let report = again.tick();
    assert_eq!((report.enqueued, report.dispatched), (0, 0));
    assert!(store.get_artifact(&key0.sibling("log")).is_ok());
}
