//! Research environments: reward mapping, frozen-path guards, process
//! manifests for real tasks and two deterministic synthetic environments.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    reward_from_accuracy, reward_from_loss, ExecutionStatus, MetricRecord, MetricsLog, Reward, RewardKind,
    LOSS_METRIC, SYNTHETIC_METRIC,
};
use crate::implementer::patch::{parse_patch, ParseError, Patch};
use crate::implementer::tree::{FileTree, TreeError};

/// Declarative resource counts for a job or a worker slot.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resources {
    #[serde(default)]
    pub gpus: u32,
    #[serde(default)]
    pub cpus: u32,
    #[serde(default)]
    pub memory_mb: u64,
}

impl Resources {
    pub fn fits_in(&self, capacity: &Resources) -> bool {
        self.gpus <= capacity.gpus && self.cpus <= capacity.cpus && self.memory_mb <= capacity.memory_mb
    }
}

/// Program and arguments, run inside the unpacked codebase.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CommandSpec(pub Vec<String>);

impl CommandSpec {
    pub fn new<S: Into<String>>(argv: impl IntoIterator<Item = S>) -> Self {
        Self(argv.into_iter().map(Into::into).collect())
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuardViolation {
    pub paths: Vec<String>,
}

impl std::fmt::Display for GuardViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "guard violation: diff modifies frozen paths: {}", self.paths.join(", "))
    }
}

impl std::error::Error for GuardViolation {}

/// Compiled frozen-path globs. A pattern without `/` also matches any file
/// with that name in a subdirectory.
#[derive(Debug, Clone, Default)]
pub struct PathGuard {
    patterns: Vec<glob::Pattern>,
}

impl PathGuard {
    pub fn new(globs: &[String]) -> Result<Self, glob::PatternError> {
        Ok(Self {
            patterns: globs.iter().map(|g| glob::Pattern::new(g)).collect::<Result<_, _>>()?,
        })
    }

    pub fn is_frozen(&self, path: &str) -> bool {
        let name = path.rsplit('/').next().unwrap_or(path);
        self.patterns
            .iter()
            .any(|p| p.matches(path) || (!p.as_str().contains('/') && p.matches(name)))
    }

    pub fn check_patch(&self, patch: &Patch) -> Result<(), GuardViolation> {
        let paths: Vec<String> = patch
            .touched_paths()
            .into_iter()
            .filter(|p| self.is_frozen(p))
            .map(str::to_string)
            .collect();
        if paths.is_empty() {
            Ok(())
        } else {
            Err(GuardViolation { paths })
        }
    }

    /// Unparseable diffs touch nothing and pass; they fail at apply time.
    pub fn check_diff(&self, diff: &str) -> Result<(), GuardViolation> {
        match parse_patch(diff) {
            Ok(p) => self.check_patch(&p),
            Err(_) => Ok(()),
        }
    }
}

/// Checks whether `diff` targets any of the environment's frozen paths.
pub fn guard_frozen_paths(diff: &str, env: &Environment) -> Result<Result<(), GuardViolation>, ParseError> {
    let patch = parse_patch(diff)?;
    Ok(env.guard().check_patch(&patch))
}

/// Analytic optimisation landscape on a small integer lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatticeTuneSpec {
    pub optimum: Vec<u8>,
    pub max_coordinate: u8,
    pub base: f64,
    pub amplitude: f64,
    pub width: f64,
    pub baseline_point: Vec<u8>,
}

impl Default for LatticeTuneSpec {
    fn default() -> Self {
        Self {
            optimum: vec![7, 2, 5, 1],
            max_coordinate: 9,
            base: 0.3,
            amplitude: 0.6,
            width: 8.0,
            baseline_point: vec![5, 5, 5, 5],
        }
    }
}

impl LatticeTuneSpec {
    pub fn dimension(&self) -> usize {
        self.optimum.len()
    }

    pub fn reward(&self, x: &[u8]) -> f64 {
        let dist2: f64 = x
            .iter()
            .zip(&self.optimum)
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
            .sum();
        self.base + self.amplitude * (-dist2 / self.width).exp()
    }

    /// Parses `set x=(a,b,c,d)` anywhere in the text, ignoring whitespace
    /// and case.
    pub fn parse_point(&self, text: &str) -> Option<Vec<u8>> {
        let squashed: String = text
            .chars()
            .filter(|c| !c.is_whitespace())
            .flat_map(char::to_lowercase)
            .collect();
        let start = squashed.find("setx=(")? + "setx=(".len();
        let end = start + squashed[start..].find(')')?;
        let coords: Vec<u8> = squashed[start..end]
            .split(',')
            .map(|s| s.parse::<u8>().ok().filter(|&v| v <= self.max_coordinate))
            .collect::<Option<_>>()?;
        (coords.len() == self.dimension()).then_some(coords)
    }

    pub fn format_point(x: &[u8]) -> String {
        let coords: Vec<String> = x.iter().map(u8::to_string).collect();
        format!("set x=({})", coords.join(","))
    }

    /// Every point of the lattice, in lexicographic order.
    pub fn all_points(&self) -> impl Iterator<Item = Vec<u8>> + '_ {
        let side = u64::from(self.max_coordinate) + 1;
        let d = self.dimension() as u32;
        (0..side.pow(d)).map(move |mut n| {
            let mut x = vec![0u8; d as usize];
            for slot in x.iter_mut().rev() {
                *slot = (n % side) as u8;
                n /= side;
            }
            x
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoModeIdea {
    pub name: String,
    pub text: String,
    pub easy: bool,
}

/// Idea space with two reliable, moderately rewarded ideas and eight
/// high-reward ideas that usually fail to execute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoModeSpec {
    pub ideas: Vec<TwoModeIdea>,
    pub easy_reward: f64,
    pub complex_reward: f64,
    pub complex_success_prob: f64,
    pub easy_thinking_len: usize,
    pub complex_thinking_len: usize,
}

const COMPLEX_IDEAS: [&str; 8] = [
    "replace the attention softmax with a learned sparse routing kernel",
    "add a second critic head trained on bootstrapped token values",
    "rewrite the optimizer as a per-layer second order preconditioner",
    "introduce a curriculum that reorders training batches by difficulty",
    "distill the model into a mixture of experts mid training",
    "add a learned tokenizer merge schedule during pretraining",
    "train an auxiliary verifier and rerank rollouts with it",
    "switch to a multi token prediction objective with shared heads",
];

impl Default for TwoModeSpec {
    fn default() -> Self {
        let mut ideas = vec![
            TwoModeIdea {
                name: "E1".into(),
                text: "E1: replace rmsnorm with layernorm in every block".into(),
                easy: true,
            },
            TwoModeIdea {
                name: "E2".into(),
                text: "E2: keep an ema of the model weights for evaluation".into(),
                easy: true,
            },
        ];
        ideas.extend(COMPLEX_IDEAS.iter().enumerate().map(|(i, t)| TwoModeIdea {
            name: format!("C{}", i + 1),
            text: format!("C{}: {t}", i + 1),
            easy: false,
        }));
        Self {
            ideas,
            easy_reward: 0.5,
            complex_reward: 0.9,
            complex_success_prob: 0.3,
            easy_thinking_len: 40,
            complex_thinking_len: 400,
        }
    }
}

impl TwoModeSpec {
    /// Keyword patterns that identify the easy ideas.
    pub const EASY_PATTERNS: [&'static str; 2] = ["layernorm", "ema"];

    pub fn len(&self) -> usize {
        self.ideas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ideas.is_empty()
    }

    pub fn index_of(&self, idea_text: &str) -> Option<usize> {
        let name = idea_text.split(':').next()?.trim();
        self.ideas.iter().position(|i| i.name == name)
    }

    pub fn expected_reward(&self, index: usize) -> f64 {
        let idea = &self.ideas[index];
        if idea.easy {
            self.easy_reward
        } else {
            self.complex_reward * self.complex_success_prob
        }
    }

    pub fn thinking_len(&self, index: usize) -> usize {
        if self.ideas[index].easy {
            self.easy_thinking_len
        } else {
            self.complex_thinking_len
        }
    }

    /// Deterministic thinking trace with the idea's token length.
    pub fn thinking_text(&self, index: usize) -> String {
        let n = self.thinking_len(index);
        let word = if self.ideas[index].easy { "check" } else { "consider" };
        let mut s = String::with_capacity(n * (word.len() + 1));
        for k in 0..n {
            if k > 0 {
                s.push(' ');
            }
            s.push_str(word);
        }
        s
    }

    /// Exact expected reward of a policy given as idea probabilities.
    pub fn policy_expected_reward(&self, probs: &[f64]) -> f64 {
        probs.iter().enumerate().map(|(i, p)| p * self.expected_reward(i)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticEnv {
    LatticeTune(LatticeTuneSpec),
    TwoMode(TwoModeSpec),
}

/// Status, metrics and log of one execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub status: ExecutionStatus,
    pub metrics: MetricsLog,
    pub execution_log: String,
}

fn synthetic_success(value: f64, log: String) -> RunOutcome {
    RunOutcome {
        status: ExecutionStatus::Succeeded,
        metrics: MetricsLog {
            records: vec![MetricRecord {
                step: 0,
                name: SYNTHETIC_METRIC.into(),
                value,
            }],
            terminal: true,
        },
        execution_log: log,
    }
}

/// Executes an idea against a synthetic environment. Pure in
/// (`idea_text`, `seed`).
pub fn synth_execute(env: &SyntheticEnv, idea_text: &str, seed: u64) -> RunOutcome {
    match env {
        SyntheticEnv::LatticeTune(spec) => match spec.parse_point(idea_text) {
            Some(x) => {
                let r = spec.reward(&x);
                synthetic_success(r, format!("{} -> reward {r:.6}\n", LatticeTuneSpec::format_point(&x)))
            }
            None => RunOutcome {
                status: ExecutionStatus::PatchFailed,
                metrics: MetricsLog::default(),
                execution_log: "could not derive a `set x=(..)` change from the idea\n".into(),
            },
        },
        SyntheticEnv::TwoMode(spec) => match spec.index_of(idea_text) {
            None => RunOutcome {
                status: ExecutionStatus::PatchFailed,
                metrics: MetricsLog::default(),
                execution_log: "unknown idea\n".into(),
            },
            Some(i) if spec.ideas[i].easy => {
                synthetic_success(spec.easy_reward, format!("{} executed\n", spec.ideas[i].name))
            }
            Some(i) => {
                let draw: f64 = crate::seed::rng(seed, &[]).random();
                if draw < spec.complex_success_prob {
                    synthetic_success(spec.complex_reward, format!("{} executed (draw {draw:.4})\n", spec.ideas[i].name))
                } else {
                    RunOutcome {
                        status: ExecutionStatus::RunFailed,
                        metrics: MetricsLog::default(),
                        execution_log: format!("{} crashed (draw {draw:.4})\n", spec.ideas[i].name),
                    }
                }
            }
        },
    }
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("cannot read manifest {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid manifest: {0}")]
    Invalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("bad frozen-path glob: {0}")]
    Glob(#[from] glob::PatternError),
}

fn synthetic_baseline(synthetic: &SyntheticEnv) -> FileTree {
    match synthetic {
        SyntheticEnv::LatticeTune(spec) => [(
            "config.txt".to_string(),
            format!("{}\n", LatticeTuneSpec::format_point(&spec.baseline_point)),
        )]
        .into_iter()
        .collect(),
        SyntheticEnv::TwoMode(_) => FileTree::new(),
    }
}

/// `env.json` on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvManifest {
    pub env_id: String,
    pub reward_kind: RewardKind,
    #[serde(default)]
    pub frozen_paths: Vec<String>,
    #[serde(default)]
    pub resource_requirement: Resources,
    pub time_budget_s: f64,
    #[serde(default)]
    pub entrypoint: CommandSpec,
    #[serde(default)]
    pub baseline_dir: Option<PathBuf>,
    /// Interval, in steps, at which the entrypoint evaluates.
    #[serde(default)]
    pub validation_interval: Option<u64>,
    /// Measured reward of the unmodified baseline, for process environments.
    #[serde(default)]
    pub baseline_reward: Option<f64>,
    #[serde(default)]
    pub synthetic: Option<SyntheticEnv>,
}

#[derive(Debug, Clone)]
pub struct Environment {
    pub env_id: String,
    pub reward_kind: RewardKind,
    pub frozen_paths: Vec<String>,
    pub resource_requirement: Resources,
    pub time_budget: Duration,
    pub entrypoint: CommandSpec,
    pub baseline: FileTree,
    pub validation_interval: Option<u64>,
    pub synthetic: Option<SyntheticEnv>,
    guard: PathGuard,
    declared_baseline_reward: Option<f64>,
    baseline_reward: OnceLock<f64>,
}

impl Environment {
    pub fn from_manifest(manifest: EnvManifest, manifest_dir: &Path) -> Result<Self, EnvError> {
        if !(manifest.time_budget_s > 0.0) {
            return Err(EnvError::Invalid("time_budget_s must be positive".into()));
        }
        if manifest.synthetic.is_none() {
            if manifest.frozen_paths.is_empty() {
                return Err(EnvError::Invalid("process environments must freeze at least one path".into()));
            }
            if manifest.entrypoint.is_empty() {
                return Err(EnvError::Invalid("process environments need an entrypoint".into()));
            }
        }
        let baseline = match (&manifest.baseline_dir, &manifest.synthetic) {
            (Some(dir), _) => FileTree::from_dir(&manifest_dir.join(dir))?,
            (None, Some(s)) => synthetic_baseline(s),
            (None, None) => FileTree::new(),
        };
        Ok(Self {
            guard: PathGuard::new(&manifest.frozen_paths)?,
            env_id: manifest.env_id,
            reward_kind: manifest.reward_kind,
            frozen_paths: manifest.frozen_paths,
            resource_requirement: manifest.resource_requirement,
            time_budget: Duration::from_secs_f64(manifest.time_budget_s),
            entrypoint: manifest.entrypoint,
            baseline,
            validation_interval: manifest.validation_interval,
            synthetic: manifest.synthetic,
            declared_baseline_reward: manifest.baseline_reward,
            baseline_reward: OnceLock::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path).map_err(|source| EnvError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let manifest: EnvManifest = serde_json::from_str(&text)?;
        Self::from_manifest(manifest, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn lattice_tune() -> Self {
        Self::synthetic("lattice_tune", SyntheticEnv::LatticeTune(LatticeTuneSpec::default()))
    }

    pub fn two_mode() -> Self {
        Self::synthetic("two_mode", SyntheticEnv::TwoMode(TwoModeSpec::default()))
    }

    pub fn synthetic(env_id: &str, synthetic: SyntheticEnv) -> Self {
        let baseline = synthetic_baseline(&synthetic);
        Self {
            env_id: env_id.to_string(),
            reward_kind: RewardKind::Synthetic,
            frozen_paths: vec!["evaluate.py".into()],
            resource_requirement: Resources {
                gpus: 0,
                cpus: 1,
                memory_mb: 64,
            },
            time_budget: Duration::from_secs(5),
            entrypoint: CommandSpec::default(),
            baseline,
            validation_interval: None,
            guard: PathGuard::new(&["evaluate.py".to_string()]).expect("literal glob"),
            synthetic: Some(synthetic),
            declared_baseline_reward: None,
            baseline_reward: OnceLock::new(),
        }
    }

    pub fn guard(&self) -> &PathGuard {
        &self.guard
    }

    /// Reward of the unmodified baseline, computed once. Synthetic
    /// environments evaluate their baseline analytically; process
    /// environments use the measured value from their manifest.
    pub fn baseline_reward(&self) -> Option<f64> {
        if let Some(v) = self.baseline_reward.get() {
            return Some(*v);
        }
        let v = match &self.synthetic {
            Some(SyntheticEnv::LatticeTune(spec)) => spec.reward(&spec.baseline_point),
            Some(SyntheticEnv::TwoMode(spec)) => spec.easy_reward,
            None => self.declared_baseline_reward?,
        };
        Some(*self.baseline_reward.get_or_init(|| v))
    }
}

/// Maps an execution's metrics to its reward. Anything short of a clean
/// success, or a degenerate metrics log, scores 0.
pub fn evaluate(env: &Environment, metrics: &MetricsLog, status: ExecutionStatus) -> Reward {
    if !status.is_success() {
        return Reward::zero(env.reward_kind);
    }
    let reward = match env.reward_kind {
        RewardKind::Accuracy => reward_from_accuracy(metrics).ok(),
        RewardKind::ReciprocalLoss => metrics.last_value(LOSS_METRIC).and_then(|l| reward_from_loss(l).ok()),
        RewardKind::Synthetic => metrics
            .last_value(SYNTHETIC_METRIC)
            .filter(|v| v.is_finite() && *v >= 0.0)
            .map(|value| Reward {
                value,
                kind: RewardKind::Synthetic,
            }),
    };
    reward.unwrap_or(Reward::zero(env.reward_kind))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ACCURACY_METRIC;

    fn manifest_env(kind: RewardKind) -> Environment {
        Environment::from_manifest(
            EnvManifest {
                env_id: "grpo".into(),
                reward_kind: kind,
                frozen_paths: vec!["evaluate.py".into(), "data/**".into()],
                resource_requirement: Resources { gpus: 1, cpus: 4, memory_mb: 1024 },
                time_budget_s: 60.0,
                entrypoint: CommandSpec::new(["python3", "grpo.py"]),
                baseline_dir: None,
                validation_interval: Some(10),
                baseline_reward: Some(0.480),
                synthetic: None,
            },
            Path::new("."),
        )
        .unwrap()
    }

    fn diff_for(path: &str) -> String {
        format!("--- a/{path}\n+++ b/{path}\n@@ -1 +1 @@\n-a\n+b\n")
    }

    #[test]
    fn guard_blocks_frozen_files() {
        let env = manifest_env(RewardKind::Accuracy);
        assert!(guard_frozen_paths(&diff_for("evaluate.py"), &env).unwrap().is_err());
        assert!(guard_frozen_paths(&diff_for("sub/evaluate.py"), &env).unwrap().is_err());
        assert!(guard_frozen_paths(&diff_for("data/val.jsonl"), &env).unwrap().is_err());
        assert!(guard_frozen_paths("", &env).unwrap().is_ok());
        assert!(guard_frozen_paths(&diff_for("grpo.py"), &env).unwrap().is_ok());
        let v = guard_frozen_paths(&format!("{}{}", diff_for("grpo.py"), diff_for("evaluate.py")), &env)
            .unwrap()
            .unwrap_err();
        assert_eq!(v.paths, vec!["evaluate.py"]);
    }

    #[test]
    fn evaluate_maps_each_kind() {
        let loss_env = manifest_env(RewardKind::ReciprocalLoss);
        let log = |name: &str, vals: &[f64]| MetricsLog {
            records: vals
                .iter()
                .enumerate()
                .map(|(i, &value)| MetricRecord { step: i as u64, name: name.into(), value })
                .collect(),
            terminal: true,
        };
        let r = evaluate(&loss_env, &log(LOSS_METRIC, &[4.0, 3.255]), ExecutionStatus::Succeeded);
        assert!((r.value - 0.30722).abs() < 1e-5);
        assert_eq!(evaluate(&loss_env, &log(LOSS_METRIC, &[3.255]), ExecutionStatus::RunFailed).value, 0.0);
        assert_eq!(evaluate(&loss_env, &log(LOSS_METRIC, &[f64::NAN]), ExecutionStatus::Succeeded).value, 0.0);
        let acc_env = manifest_env(RewardKind::Accuracy);
        let r = evaluate(&acc_env, &log(ACCURACY_METRIC, &[0.3, 0.48, 0.41]), ExecutionStatus::Succeeded);
        assert_eq!(r.value, 0.48);
        assert_eq!(evaluate(&acc_env, &MetricsLog::default(), ExecutionStatus::Succeeded).value, 0.0);
    }

    #[test]
    fn process_manifests_need_guards() {
        let mut m = EnvManifest {
            env_id: "x".into(),
            reward_kind: RewardKind::Accuracy,
            frozen_paths: vec![],
            resource_requirement: Resources::default(),
            time_budget_s: 1.0,
            entrypoint: CommandSpec::new(["true"]),
            baseline_dir: None,
            validation_interval: None,
            baseline_reward: None,
            synthetic: None,
        };
        assert!(Environment::from_manifest(m.clone(), Path::new(".")).is_err());
        m.frozen_paths = vec!["eval.py".into()];
        m.time_budget_s = 0.0;
        assert!(Environment::from_manifest(m, Path::new(".")).is_err());
    }

    #[test]
    fn lattice_examples() {
        let env = SyntheticEnv::LatticeTune(LatticeTuneSpec::default());
        let out = synth_execute(&env, "set x=(7,2,5,1)", 0);
        assert_eq!(out.status, ExecutionStatus::Succeeded);
        assert!((out.metrics.last_value(SYNTHETIC_METRIC).unwrap() - 0.9).abs() < 1e-12);
        let out = synth_execute(&env, "improve the optimizer", 0);
        assert_eq!(out.status, ExecutionStatus::PatchFailed);
        // hand evaluation: 0.3 + 0.6 * exp(-29/8)
        let out = synth_execute(&env, "Set X = (5, 5, 5, 5)", 0);
        assert!((out.metrics.last_value(SYNTHETIC_METRIC).unwrap() - 0.315_989_458).abs() < 1e-8);
        for bad in ["set x=(7,2,5)", "set x=(7,2,5,10)", "set x=(a,2,5,1)", "set x=(7,2,5,1"] {
            assert_eq!(synth_execute(&env, bad, 0).status, ExecutionStatus::PatchFailed, "{bad}");
        }
    }

    #[test]
    fn lattice_brute_force_argmax() {
        let spec = LatticeTuneSpec::default();
        let mut best = (f64::MIN, vec![]);
        let mut count = 0;
        let mut high = 0;
        for x in spec.all_points() {
            count += 1;
            let r = spec.reward(&x);
            assert!(r > spec.base && r <= spec.base + spec.amplitude);
            if r >= 0.85 {
                high += 1;
            }
            if r > best.0 {
                best = (r, x);
            }
        }
        assert_eq!(count, 10_000);
        assert_eq!(best.1, spec.optimum);
        assert!((best.0 - 0.9).abs() < 1e-12);
        assert_eq!(high, 1);
    }

    #[test]
    fn two_mode_expectations() {
        let spec = TwoModeSpec::default();
        assert_eq!(spec.len(), 10);
        for i in 0..10 {
            let e = spec.expected_reward(i);
            if spec.ideas[i].easy {
                assert_eq!(e, 0.5);
            } else {
                assert!((e - 0.27).abs() < 1e-12);
            }
            assert_eq!(crate::domain::whitespace_tokens(&spec.thinking_text(i)), spec.thinking_len(i));
        }
        let uniform = vec![0.1; 10];
        assert!((spec.policy_expected_reward(&uniform) - 0.316).abs() < 1e-12);
        let mut easy_only = vec![0.0; 10];
        easy_only[0] = 0.5;
        easy_only[1] = 0.5;
        assert_eq!(spec.policy_expected_reward(&easy_only), 0.5);
        // complex idea texts never match the easy keywords
        for idea in spec.ideas.iter().filter(|i| !i.easy) {
            let lower = idea.text.to_lowercase();
            for t in lower.split_whitespace() {
                assert!(!TwoModeSpec::EASY_PATTERNS.contains(&t));
            }
        }
    }

    #[test]
    fn two_mode_execution_is_seeded() {
        let env = SyntheticEnv::TwoMode(TwoModeSpec::default());
        assert_eq!(synth_execute(&env, "E1: anything", 3).status, ExecutionStatus::Succeeded);
        let outcomes: Vec<_> = (0..2000).map(|s| synth_execute(&env, "C3: x", s).status).collect();
        let ok = outcomes.iter().filter(|s| s.is_success()).count() as f64 / 2000.0;
        assert!((ok - 0.3).abs() < 0.04, "{ok}");
        assert_eq!(synth_execute(&env, "C3: x", 11), synth_execute(&env, "C3: x", 11));
        assert_eq!(synth_execute(&env, "Z9: x", 0).status, ExecutionStatus::PatchFailed);
    }

    #[test]
    fn baseline_reward_is_cached() {
        let env = Environment::lattice_tune();
        let b = env.baseline_reward().unwrap();
        assert!((b - 0.315_989_458).abs() < 1e-8);
        assert_eq!(env.baseline_reward(), Some(b));
        assert_eq!(manifest_env(RewardKind::Accuracy).baseline_reward(), Some(0.480));
    }

    #[test]
    fn manifest_json_shape() {
        let text = r#"{"env_id":"lattice","reward_kind":"synthetic","frozen_paths":[],"time_budget_s":2,
            "synthetic":{"kind":"lattice_tune"}}"#;
        let m: EnvManifest = serde_json::from_str(text).unwrap();
        let env = Environment::from_manifest(m, Path::new(".")).unwrap();
        assert!(matches!(env.synthetic, Some(SyntheticEnv::LatticeTune(_))));
    }

    proptest::proptest! {
        #[test]
        fn guard_is_compositional(
            a in proptest::sample::select(vec!["evaluate.py", "grpo.py", "model.py", "data/x.py", "sub/evaluate.py"]),
            b in proptest::sample::select(vec!["evaluate.py", "grpo.py", "model.py", "data/x.py", "sub/evaluate.py"]),
        ) {
            let env = manifest_env(RewardKind::Accuracy);
            let (da, db) = (diff_for(&a), diff_for(&b));
            let joint = guard_frozen_paths(&format!("{da}{db}"), &env).unwrap().is_ok();
            let parts = guard_frozen_paths(&da, &env).unwrap().is_ok() && guard_frozen_paths(&db, &env).unwrap().is_ok();
            proptest::prop_assert_eq!(joint, parts);
        }
    }
}
