//! Core records shared across the pipeline: ideas, execution status,
//! metric series, rewards and trajectories.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Where an idea came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdeaSource {
    Sampled,
    Exploit,
    Explore,
    RlRollout,
}

/// A natural-language proposal, optionally preceded by a thinking trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Idea {
    pub id: String,
    pub idea_text: String,
    pub thinking_text: Option<String>,
    pub thinking_len: usize,
    pub source: IdeaSource,
    pub parent_ids: Vec<String>,
}

#[derive(Debug, Error, PartialEq)]
pub enum IdeaError {
    #[error("exploit idea {0} has no parents")]
    OrphanExploit(String),
}

impl Idea {
    /// Builds an idea, deriving `thinking_len` from the thinking trace.
    pub fn new(
        id: impl Into<String>,
        idea_text: impl Into<String>,
        thinking_text: Option<String>,
        source: IdeaSource,
        parent_ids: Vec<String>,
    ) -> Result<Self, IdeaError> {
        let id = id.into();
        if source == IdeaSource::Exploit && parent_ids.is_empty() {
            return Err(IdeaError::OrphanExploit(id));
        }
        let thinking_len = thinking_text.as_deref().map(whitespace_tokens).unwrap_or(0);
        Ok(Self {
            id,
            idea_text: idea_text.into(),
            thinking_text,
            thinking_len,
            source,
            parent_ids,
        })
    }

    /// Fresh idea with no parents and no thinking trace.
    pub fn fresh(id: impl Into<String>, idea_text: impl Into<String>) -> Self {
        Self::new(id, idea_text, None, IdeaSource::Sampled, Vec::new())
            .expect("sampled ideas need no parents")
    }

    pub fn idea_len(&self) -> usize {
        whitespace_tokens(&self.idea_text)
    }
}

/// Number of whitespace-separated tokens.
pub fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionStatus {
    Succeeded,
    PatchFailed,
    RunFailed,
    TimedOut,
    GuardViolation,
}

impl ExecutionStatus {
    pub fn is_success(self) -> bool {
        self == ExecutionStatus::Succeeded
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub name: String,
    pub value: f64,
}

/// Ordered metric records emitted by one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub records: Vec<MetricRecord>,
    /// Whether the run reached its configured end.
    pub terminal: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("metric {name}: step {step} follows step {previous}")]
    StepRegression { name: String, step: u64, previous: u64 },
}

impl MetricsLog {
    pub fn new(records: Vec<MetricRecord>, terminal: bool) -> Result<Self, MetricsError> {
        let log = Self { records, terminal };
        log.validate()?;
        Ok(log)
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Steps must be non-decreasing per metric name.
    pub fn validate(&self) -> Result<(), MetricsError> {
        let mut last: std::collections::HashMap<&str, u64> = std::collections::HashMap::new();
        for r in &self.records {
            if let Some(&prev) = last.get(r.name.as_str()) {
                if r.step < prev {
                    return Err(MetricsError::StepRegression {
                        name: r.name.clone(),
                        step: r.step,
                        previous: prev,
                    });
                }
            }
            last.insert(&r.name, r.step);
        }
        Ok(())
    }

    pub fn series<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a MetricRecord> + 'a {
        self.records.iter().filter(move |r| r.name == name)
    }

    /// Value of the last record (highest position) with this name.
    pub fn last_value(&self, name: &str) -> Option<f64> {
        self.series(name).last().map(|r| r.value)
    }
}

/// Metric names understood by the reward mappings.
pub const ACCURACY_METRIC: &str = "val_accuracy";
pub const LOSS_METRIC: &str = "val_loss";
pub const SYNTHETIC_METRIC: &str = "reward";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Accuracy,
    ReciprocalLoss,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reward {
    pub value: f64,
    pub kind: RewardKind,
}

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("loss {0} is not a finite positive number")]
    NonFiniteLoss(f64),
    #[error("metrics log has no accuracy records")]
    NoAccuracyRecords,
}

impl Reward {
    pub fn zero(kind: RewardKind) -> Self {
        Self { value: 0.0, kind }
    }
}

/// Proxy reward for fixed-time training runs: `1 / loss`.
pub fn reward_from_loss(final_validation_loss: f64) -> Result<Reward, RewardError> {
    if !final_validation_loss.is_finite() || final_validation_loss <= 0.0 {
        return Err(RewardError::NonFiniteLoss(final_validation_loss));
    }
    Ok(Reward {
        value: 1.0 / final_validation_loss,
        kind: RewardKind::ReciprocalLoss,
    })
}

/// Peak accuracy over the series.
pub fn reward_from_accuracy(series: &MetricsLog) -> Result<Reward, RewardError> {
    series
        .series(ACCURACY_METRIC)
        .map(|r| r.value)
        .filter(|v| v.is_finite())
        .fold(None, |best: Option<f64>, v| Some(best.map_or(v, |b| b.max(v))))
        .map(|value| Reward {
            value,
            kind: RewardKind::Accuracy,
        })
        .ok_or(RewardError::NoAccuracyRecords)
}

/// Logical timestamps; ordinal positions within a run rather than wall time,
/// so that logs replay byte-identically.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogicalTimestamps {
    pub proposed_seq: u64,
    pub completed_seq: u64,
}

/// One executed idea with its outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub idea: Idea,
    pub epoch: u32,
    pub diff: Option<String>,
    pub codebase_key: Option<String>,
    pub status: ExecutionStatus,
    pub metrics: MetricsLog,
    pub reward: f64,
    pub execution_log: String,
}

impl Trajectory {
    /// Enforces `status != succeeded => reward == 0`.
    pub fn new(
        idea: Idea,
        epoch: u32,
        status: ExecutionStatus,
        metrics: MetricsLog,
        reward: f64,
        execution_log: String,
    ) -> Self {
        let reward = if status.is_success() && reward.is_finite() {
            reward.max(0.0)
        } else {
            0.0
        };
        Self {
            idea,
            epoch,
            diff: None,
            codebase_key: None,
            status,
            metrics,
            reward,
            execution_log,
        }
    }

    pub fn to_record(&self, run_id: &str, timestamps: LogicalTimestamps) -> TrajectoryRecord {
        TrajectoryRecord {
            run_id: run_id.to_string(),
            epoch: self.epoch,
            idea_id: self.idea.id.clone(),
            idea_text: self.idea.idea_text.clone(),
            thinking_text: self.idea.thinking_text.clone(),
            source: self.idea.source,
            parent_ids: self.idea.parent_ids.clone(),
            status: self.status,
            reward: self.reward,
            metrics: self.metrics.clone(),
            execution_log_ref: self
                .codebase_key
                .as_deref()
                .map(log_key_for)
                .unwrap_or_else(|| format!("inline:{}", self.idea.id)),
            timestamps,
        }
    }
}

/// Store key of the execution log that belongs to a codebase artifact key.
pub fn log_key_for(codebase_key: &str) -> String {
    match codebase_key.strip_suffix(".zip") {
        Some(stem) => format!("{stem}.log"),
        None => format!("{codebase_key}.log"),
    }
}

/// Serialized trajectory, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub run_id: String,
    pub epoch: u32,
    pub idea_id: String,
    pub idea_text: String,
    pub thinking_text: Option<String>,
    pub source: IdeaSource,
    pub parent_ids: Vec<String>,
    pub status: ExecutionStatus,
    pub reward: f64,
    pub metrics: MetricsLog,
    pub execution_log_ref: String,
    pub timestamps: LogicalTimestamps,
}

impl TrajectoryRecord {
    pub fn thinking_len(&self) -> usize {
        self.thinking_text.as_deref().map(whitespace_tokens).unwrap_or(0)
    }

    pub fn into_trajectory(self) -> Trajectory {
        let thinking_len = self.thinking_len();
        Trajectory {
            idea: Idea {
                id: self.idea_id,
                idea_text: self.idea_text,
                thinking_text: self.thinking_text,
                thinking_len,
                source: self.source,
                parent_ids: self.parent_ids,
            },
            epoch: self.epoch,
            diff: None,
            codebase_key: None,
            status: self.status,
            metrics: self.metrics,
            reward: self.reward,
            execution_log: String::new(),
        }
    }
}

/// Writes records as JSONL.
pub fn write_jsonl<T: Serialize>(
    mut out: impl std::io::Write,
    records: impl IntoIterator<Item = T>,
) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, &r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Reads JSONL records, skipping blank lines.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn acc(points: &[(u64, f64)]) -> MetricsLog {
        MetricsLog::new(
            points
                .iter()
                .map(|&(step, value)| MetricRecord {
                    step,
                    name: ACCURACY_METRIC.into(),
                    value,
                })
                .collect(),
            true,
        )
        .unwrap()
    }

    #[test]
    fn reciprocal_loss_values() {
        assert!((reward_from_loss(3.255).unwrap().value - 0.30722).abs() < 1e-5);
        assert!((reward_from_loss(4.066).unwrap().value - 0.24594).abs() < 1e-5);
        assert_eq!(reward_from_loss(1.0).unwrap().value, 1.0);
        assert_eq!(reward_from_loss(1.0).unwrap().kind, RewardKind::ReciprocalLoss);
    }

    #[test]
    fn degenerate_losses_rejected() {
        for bad in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(reward_from_loss(bad), Err(RewardError::NonFiniteLoss(_))));
        }
    }

    #[test]
    fn accuracy_is_peak_of_series() {
        assert_eq!(reward_from_accuracy(&acc(&[(1, 0.30), (2, 0.48), (3, 0.41)])).unwrap().value, 0.48);
        assert_eq!(reward_from_accuracy(&acc(&[(1, 0.480)])).unwrap().value, 0.480);
        assert_eq!(reward_from_accuracy(&acc(&[])), Err(RewardError::NoAccuracyRecords));
    }

    #[test]
    fn thinking_len_counts_whitespace_tokens() {
        let idea = Idea::new("a", "x", Some("one  two\nthree".into()), IdeaSource::Sampled, vec![]).unwrap();
        assert_eq!(idea.thinking_len, 3);
        assert_eq!(Idea::fresh("b", "y").thinking_len, 0);
    }

    #[test]
    fn exploit_requires_parents() {
        assert!(Idea::new("a", "x", None, IdeaSource::Exploit, vec![]).is_err());
        assert!(Idea::new("a", "x", None, IdeaSource::Exploit, vec!["p".into()]).is_ok());
    }

    #[test]
    fn failed_trajectories_carry_zero_reward() {
        let t = Trajectory::new(Idea::fresh("a", "x"), 0, ExecutionStatus::RunFailed, MetricsLog::default(), 0.7, String::new());
        assert_eq!(t.reward, 0.0);
        let t = Trajectory::new(Idea::fresh("a", "x"), 0, ExecutionStatus::Succeeded, MetricsLog::default(), 0.7, String::new());
        assert_eq!(t.reward, 0.7);
    }

    #[test]
    fn step_regression_detected() {
        let rec = |step| MetricRecord { step, name: "l".into(), value: 1.0 };
        assert!(MetricsLog::new(vec![rec(2), rec(1)], true).is_err());
        assert!(MetricsLog::new(vec![rec(1), rec(1), rec(3)], true).is_ok());
    }

    #[test]
    fn record_field_names() {
        let t = Trajectory::new(Idea::fresh("e0-i0", "x"), 0, ExecutionStatus::Succeeded, MetricsLog::default(), 0.5, String::new());
        let v = serde_json::to_value(t.to_record("r", LogicalTimestamps::default())).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "epoch", "execution_log_ref", "idea_id", "idea_text", "metrics", "parent_ids", "reward", "run_id",
                "source", "status", "thinking_text", "timestamps"
            ]
        );
    }

    proptest::proptest! {
        #[test]
        fn reciprocal_strictly_decreasing(a in 1e-6f64..1e6, b in 1e-6f64..1e6) {
            proptest::prop_assume!(a < b);
            proptest::prop_assert!(reward_from_loss(a).unwrap().value > reward_from_loss(b).unwrap().value);
        }

        #[test]
        fn accuracy_dominates_series(values in proptest::collection::vec(0.0f64..1.0, 1..30)) {
            let log = acc(&values.iter().enumerate().map(|(i, &v)| (i as u64, v)).collect::<Vec<_>>());
            let r = reward_from_accuracy(&log).unwrap().value;
            proptest::prop_assert!(values.iter().all(|&v| r >= v));
            proptest::prop_assert!(values.contains(&r));
        }
    }
}
