//! Turns an idea into a patched, zipped codebase: sample several candidate
//! diffs in parallel, let each candidate self-revise on patch failure, and
//! keep the lowest-index candidate that applies cleanly.

pub mod patch;
pub mod tree;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Idea;
use crate::environments::PathGuard;
use crate::gateway::{generate_checked, ArtifactKey, ArtifactStore, GatewayError, ModelEndpoint, ModelRequest};
pub use patch::{apply_patch, parse_patch, Patch, PatchOutcome};
pub use tree::FileTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImplementerConfig {
    pub k_parallel: usize,
    pub max_revisions: usize,
}

impl Default for ImplementerConfig {
    fn default() -> Self {
        Self {
            k_parallel: 10,
            max_revisions: 2,
        }
    }
}

impl ImplementerConfig {
    /// Upper bound on `apply_patch` calls for one idea.
    pub fn max_attempts(&self) -> usize {
        self.k_parallel * (1 + self.max_revisions)
    }
}

#[derive(Debug, Error)]
pub enum ImplementError {
    #[error("precondition violated: {0}")]
    Precondition(&'static str),
    #[error("every candidate failed after {attempts} apply attempts")]
    AllCandidatesFailed { attempts: usize, logs: Vec<String> },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Tree(#[from] tree::TreeError),
}

const DIFF_INSTRUCTIONS: &str = "Respond with one unified diff (`diff -u` format, paths relative to the \
repository root, exact context lines and line numbers). Do not touch evaluation code.";

pub fn implementation_prompt(idea: &Idea, baseline: &FileTree) -> String {
    format!(
        "Implement the following research idea in the baseline codebase.\n\n\
         ## Idea\n{}\n\n## Baseline codebase\n{}\n{DIFF_INSTRUCTIONS}\n",
        idea.idea_text,
        baseline.render_for_prompt()
    )
}

pub fn revision_prompt(idea: &Idea, baseline: &FileTree, failed_diff: &str, patch_log: &str) -> String {
    format!(
        "Implement the following research idea in the baseline codebase.\n\n\
         ## Idea\n{}\n\n## Baseline codebase\n{}\n\
         ## Previous diff\n{failed_diff}\n\n\
         ## Patch log\nThe previous diff could not be applied:\n{patch_log}\n\n\
         Revise the previous diff so that it applies. {DIFF_INSTRUCTIONS}\n",
        idea.idea_text,
        baseline.render_for_prompt()
    )
}

/// Pulls the diff out of a model answer: the first ```diff/```patch fence if
/// there is one, else the whole body.
pub fn extract_diff(body: &str) -> String {
    for fence in ["```diff", "```patch", "```"] {
        if let Some(start) = body.find(fence) {
            let after = &body[start + fence.len()..];
            let after = after.split_once('\n').map_or("", |(_, rest)| rest);
            if let Some(end) = after.find("```") {
                return after[..end].to_string();
            }
        }
    }
    body.to_string()
}

/// Samples `k` candidate diffs for the idea.
pub fn propose_diffs(
    endpoint: &dyn ModelEndpoint,
    idea: &Idea,
    baseline: &FileTree,
    k: usize,
) -> Result<Vec<String>, ImplementError> {
    if baseline.is_empty() {
        return Err(ImplementError::Precondition("baseline codebase is empty"));
    }
    if k == 0 {
        return Err(ImplementError::Precondition("k must be at least 1"));
    }
    let req = ModelRequest::new(implementation_prompt(idea, baseline), k);
    Ok(generate_checked(endpoint, &req)?
        .into_iter()
        .map(|c| extract_diff(&c.body_text))
        .collect())
}

/// Asks the model for one corrected diff given the failure log.
pub fn revise_diff(
    endpoint: &dyn ModelEndpoint,
    idea: &Idea,
    baseline: &FileTree,
    failed_diff: &str,
    patch_log: &str,
) -> Result<String, ImplementError> {
    if patch_log.is_empty() {
        return Err(ImplementError::Precondition("patch log is empty"));
    }
    let req = ModelRequest::new(revision_prompt(idea, baseline, failed_diff, patch_log), 1);
    let mut out = generate_checked(endpoint, &req)?;
    Ok(extract_diff(&out.remove(0).body_text))
}

/// Sidecar stored next to each codebase artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebaseMetadata {
    pub idea_id: String,
    pub idea_text: String,
    pub diff: String,
    pub env_id: String,
}

#[derive(Debug, Clone)]
pub struct ImplementReport {
    pub key: ArtifactKey,
    pub digest: String,
    pub winner_index: usize,
    pub diff: String,
    /// Apply attempts made by each candidate pipeline, by sample index.
    pub attempts: Vec<usize>,
    pub logs: Vec<String>,
}

impl ImplementReport {
    pub fn total_attempts(&self) -> usize {
        self.attempts.iter().sum()
    }
}

struct PipelineResult {
    attempts: usize,
    log: String,
    success: Option<(String, FileTree)>,
}

fn run_pipeline(
    index: usize,
    initial: String,
    idea: &Idea,
    baseline: &FileTree,
    guard: &PathGuard,
    cfg: &ImplementerConfig,
    endpoint: &dyn ModelEndpoint,
    best: &AtomicUsize,
) -> PipelineResult {
    let mut diff = initial;
    let mut attempts = 0;
    let mut log = String::new();
    for round in 0..=cfg.max_revisions {
        if best.load(Ordering::SeqCst) < index {
            log.push_str("cancelled: a lower-index candidate already succeeded\n");
            break;
        }
        attempts += 1;
        let outcome = apply_patch(baseline, &diff);
        let failure = if outcome.applied {
            match guard.check_diff(&diff) {
                Ok(()) => {
                    best.fetch_min(index, Ordering::SeqCst);
                    log.push_str(&outcome.patch_log);
                    return PipelineResult {
                        attempts,
                        log,
                        success: Some((diff, outcome.patched_tree.expect("applied outcome has a tree"))),
                    };
                }
                Err(violation) => violation.to_string(),
            }
        } else {
            outcome.patch_log
        };
        log.push_str(&format!("attempt {attempts}:\n{failure}"));
        if !failure.ends_with('\n') {
            log.push('\n');
        }
        if round == cfg.max_revisions {
            break;
        }
        match revise_diff(endpoint, idea, baseline, &diff, &failure) {
            Ok(next) => diff = next,
            Err(e) => {
                log.push_str(&format!("revision request failed: {e}\n"));
                break;
            }
        }
    }
    PipelineResult {
        attempts,
        log,
        success: None,
    }
}

/// Runs the candidate pipelines concurrently and uploads the winning tree.
/// Of the candidates that succeed, the one with the lowest sample index wins.
pub fn implement_idea(
    idea: &Idea,
    baseline: &FileTree,
    env_id: &str,
    guard: &PathGuard,
    cfg: &ImplementerConfig,
    endpoint: &dyn ModelEndpoint,
    store: &dyn ArtifactStore,
    target: &ArtifactKey,
) -> Result<ImplementReport, ImplementError> {
    if cfg.k_parallel == 0 {
        return Err(ImplementError::Precondition("k_parallel must be at least 1"));
    }
    let candidates = propose_diffs(endpoint, idea, baseline, cfg.k_parallel)?;
    let best = AtomicUsize::new(usize::MAX);
    let results: Vec<PipelineResult> = std::thread::scope(|s| {
        let handles: Vec<_> = candidates
            .into_iter()
            .enumerate()
            .map(|(i, diff)| {
                let best = &best;
                s.spawn(move || run_pipeline(i, diff, idea, baseline, guard, cfg, endpoint, best))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("candidate pipeline panicked"))
            .collect()
    });

    let attempts: Vec<usize> = results.iter().map(|r| r.attempts).collect();
    let logs: Vec<String> = results.iter().map(|r| r.log.clone()).collect();
    let Some((winner_index, (diff, tree))) = results
        .into_iter()
        .enumerate()
        .find_map(|(i, r)| r.success.map(|s| (i, s)))
    else {
        return Err(ImplementError::AllCandidatesFailed {
            attempts: attempts.iter().sum(),
            logs,
        });
    };

    let bytes = tree.to_canonical_zip()?;
    let digest = store.put_artifact(target, &bytes)?;
    let meta = CodebaseMetadata {
        idea_id: idea.id.clone(),
        idea_text: idea.idea_text.clone(),
        diff: diff.clone(),
        env_id: env_id.to_string(),
    };
    store.put_artifact(
        &target.sibling("meta.json"),
        &serde_json::to_vec_pretty(&meta).expect("metadata serializes"),
    )?;
    log::info!("idea {} implemented by candidate {winner_index} -> {target}", idea.id);
    Ok(ImplementReport {
        key: target.clone(),
        digest,
        winner_index,
        diff,
        attempts,
        logs,
    })
}
