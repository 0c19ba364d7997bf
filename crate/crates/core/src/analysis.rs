//! Benchmark metrics and run reports: completion rate, average and best
//! performance, idea-type breakdowns, keyword convergence and the
//! thinking-length split of execution rates.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{read_jsonl, Idea, RewardKind, Trajectory, TrajectoryRecord};
use crate::environments::LatticeTuneSpec;
use crate::gateway::{generate_checked, ModelEndpoint, ModelRequest};
use crate::search::epoch_best;

pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const RUN_META_FILE: &str = "run_meta.json";
pub const DYNAMICS_FILE: &str = "dynamics.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("judge unavailable: {0}")]
    JudgeUnavailable(String),
    #[error("need at least {need} trajectories, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
}

/// Fraction of trajectories that executed successfully; 0 for none.
pub fn completion_rate(trajs: &[Trajectory]) -> f64 {
    if trajs.is_empty() {
        return 0.0;
    }
    trajs.iter().filter(|t| t.status.is_success()).count() as f64 / trajs.len() as f64
}

/// Direction in which performance is reported. Loss figures are derived
/// from rewards as `1 / reward` for display.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Reward,
    Loss,
}

impl Domain {
    pub fn for_kind(kind: RewardKind) -> Self {
        match kind {
            RewardKind::ReciprocalLoss => Domain::Loss,
            _ => Domain::Reward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Performance {
    pub average: f64,
    pub best: f64,
}

/// Average and best over successful executions only. `None` when nothing
/// succeeded.
pub fn avg_best_performance(trajs: &[Trajectory], domain: Domain) -> Option<Performance> {
    let values: Vec<f64> = trajs
        .iter()
        .filter(|t| t.status.is_success() && t.reward > 0.0)
        .map(|t| match domain {
            Domain::Reward => t.reward,
            Domain::Loss => 1.0 / t.reward,
        })
        .collect();
    if values.is_empty() {
        return None;
    }
    let average = values.iter().sum::<f64>() / values.len() as f64;
    let best = match domain {
        Domain::Reward => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Domain::Loss => values.iter().copied().fold(f64::INFINITY, f64::min),
    };
    Some(Performance { average, best })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdeaClass {
    HyperParameter,
    Algorithmic,
}

pub trait Judge {
    fn judge(&self, idea: &Idea) -> Result<IdeaClass, AnalysisError>;
}

/// Coordinate tweaks on LatticeTune are hyper-parameter changes; anything
/// else is algorithmic.
#[derive(Debug, Clone, Default)]
pub struct RuleJudge {
    pub lattice: LatticeTuneSpec,
}

impl Judge for RuleJudge {
    fn judge(&self, idea: &Idea) -> Result<IdeaClass, AnalysisError> {
        Ok(match self.lattice.parse_point(&idea.idea_text) {
            Some(_) => IdeaClass::HyperParameter,
            None => IdeaClass::Algorithmic,
        })
    }
}

/// Fixed labels keyed by idea id.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(transparent)]
pub struct ScriptedJudge {
    pub labels: HashMap<String, IdeaClass>,
}

impl ScriptedJudge {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

impl Judge for ScriptedJudge {
    fn judge(&self, idea: &Idea) -> Result<IdeaClass, AnalysisError> {
        self.labels
            .get(&idea.id)
            .copied()
            .ok_or_else(|| AnalysisError::JudgeUnavailable(format!("no scripted label for {}", idea.id)))
    }
}

/// Asks a model endpoint; the reply must name exactly one class.
pub struct ModelJudge<'a> {
    pub endpoint: &'a dyn ModelEndpoint,
}

pub fn judge_prompt(idea: &Idea) -> String {
    format!(
        "Classify the research idea below. Answer `hyper_parameter` if it can be implemented only by \
         changing existing configuration values, otherwise answer `algorithmic`.\n\nIdea:\n{}\n",
        idea.idea_text
    )
}

impl Judge for ModelJudge<'_> {
    fn judge(&self, idea: &Idea) -> Result<IdeaClass, AnalysisError> {
        let out = generate_checked(self.endpoint, &ModelRequest::new(judge_prompt(idea), 1))
            .map_err(|e| AnalysisError::JudgeUnavailable(e.to_string()))?;
        let answer = out[0].body_text.to_lowercase();
        match (answer.contains("hyper_parameter"), answer.contains("algorithmic")) {
            (true, false) => Ok(IdeaClass::HyperParameter),
            (false, true) => Ok(IdeaClass::Algorithmic),
            _ => Err(AnalysisError::JudgeUnavailable(format!("ambiguous judge reply: {answer:?}"))),
        }
    }
}

pub fn classify_idea(idea: &Idea, judge: &dyn Judge) -> Result<IdeaClass, AnalysisError> {
    let class = judge.judge(idea)?;
    log::info!("judge: {} -> {:?}", idea.id, class);
    Ok(class)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedRow {
    pub class: IdeaClass,
    pub share_pct: f64,
    pub performance: Option<Performance>,
}

/// One row per class, hyper-parameter first. `classes` aligns with `trajs`.
pub fn stratified_table(trajs: &[Trajectory], classes: &[IdeaClass], domain: Domain) -> [StratifiedRow; 2] {
    assert_eq!(trajs.len(), classes.len(), "every trajectory needs a class");
    let row = |class| {
        let members: Vec<Trajectory> = trajs
            .iter()
            .zip(classes)
            .filter(|(_, c)| **c == class)
            .map(|(t, _)| t.clone())
            .collect();
        StratifiedRow {
            class,
            share_pct: if trajs.is_empty() {
                0.0
            } else {
                100.0 * members.len() as f64 / trajs.len() as f64
            },
            performance: avg_best_performance(&members, domain),
        }
    };
    [row(IdeaClass::HyperParameter), row(IdeaClass::Algorithmic)]
}

fn normalized_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
}

pub fn matches_any(text: &str, patterns: &[String]) -> bool {
    let pats: Vec<String> = patterns.iter().map(|p| p.to_lowercase()).collect();
    normalized_tokens(text).any(|t| pats.contains(&t))
}

/// Per epoch, how many ideas contain a token equal (ignoring case and
/// surrounding punctuation) to one of the patterns.
pub fn keyword_convergence<S: AsRef<str>>(ideas_by_epoch: &[Vec<S>], patterns: &[String]) -> Vec<usize> {
    ideas_by_epoch
        .iter()
        .map(|epoch| epoch.iter().filter(|t| matches_any(t.as_ref(), patterns)).count())
        .collect()
}

/// Completion rates of the `floor(top_frac * n)` longest- and
/// shortest-thinking trajectories, as `(top, bottom)`. Ties in thinking
/// length are ordered by idea id.
pub fn thinking_stratified_execution(trajs: &[Trajectory], top_frac: f64) -> Result<(f64, f64), AnalysisError> {
    assert!(top_frac > 0.0 && top_frac <= 0.5, "top_frac must be in (0, 0.5]");
    let need = (1.0 / top_frac - 1e-9).ceil() as usize;
    if trajs.len() < need {
        return Err(AnalysisError::TooFew { need, got: trajs.len() });
    }
    let mut sorted: Vec<&Trajectory> = trajs.iter().collect();
    sorted.sort_by(|a, b| {
        a.idea
            .thinking_len
            .cmp(&b.idea.thinking_len)
            .then_with(|| a.idea.id.cmp(&b.idea.id))
    });
    let m = (top_frac * trajs.len() as f64 + 1e-9).floor() as usize;
    let rate = |slice: &[&Trajectory]| slice.iter().filter(|t| t.status.is_success()).count() as f64 / slice.len() as f64;
    Ok((rate(&sorted[sorted.len() - m..]), rate(&sorted[..m])))
}

/// Context a run directory carries about itself.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub kind: String,
    pub env_id: Option<String>,
    pub reward_kind: Option<RewardKind>,
    pub baseline_reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// Epoch index with the initial batch as epoch 0.
    pub epoch: u32,
    /// Same epoch, counted with the initial batch as epoch 1.
    pub epoch_counting_initial: u32,
    pub ideas: usize,
    pub completion_rate: f64,
    pub best: f64,
    pub best_so_far: f64,
    pub keyword_matches: Option<usize>,
    pub thinking_split: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub meta: RunMeta,
    pub ideas: usize,
    pub completion_rate: f64,
    pub domain: Domain,
    pub performance: Option<Performance>,
    pub search_epochs_excluding_initial: u32,
    pub epochs: Vec<EpochReport>,
    pub stratified: Vec<StratifiedRow>,
    pub patterns: Vec<String>,
    pub rl_epochs: usize,
}

pub struct ReportOptions<'a> {
    pub judge: &'a dyn Judge,
    pub patterns: Vec<String>,
}

fn read_optional(path: &Path) -> Result<Option<String>, AnalysisError> {
    match std::fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(source) => Err(AnalysisError::Io {
            path: path.display().to_string(),
            source,
        }),
    }
}

fn parse_err(path: &Path, e: impl std::fmt::Display) -> AnalysisError {
    AnalysisError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Builds the report for trajectories already in memory.
pub fn build_report(meta: RunMeta, trajs: &[Trajectory], rl_epochs: usize, opts: &ReportOptions) -> Result<Report, AnalysisError> {
    let domain = meta.reward_kind.map(Domain::for_kind).unwrap_or(Domain::Reward);
    let classes = trajs
        .iter()
        .map(|t| classify_idea(&t.idea, opts.judge))
        .collect::<Result<Vec<_>, _>>()?;
    let stratified = if trajs.is_empty() {
        Vec::new()
    } else {
        stratified_table(trajs, &classes, domain).to_vec()
    };
    let running = epoch_best(trajs);
    let epochs = running
        .iter()
        .map(|&(epoch, best_so_far)| {
            let members: Vec<Trajectory> = trajs.iter().filter(|t| t.epoch == epoch).cloned().collect();
            EpochReport {
                epoch,
                epoch_counting_initial: epoch + 1,
                ideas: members.len(),
                completion_rate: completion_rate(&members),
                best: members.iter().map(|t| t.reward).fold(0.0, f64::max),
                best_so_far,
                keyword_matches: (!opts.patterns.is_empty()).then(|| {
                    members
                        .iter()
                        .filter(|t| matches_any(&t.idea.idea_text, &opts.patterns))
                        .count()
                }),
                thinking_split: thinking_stratified_execution(&members, 0.3).ok(),
            }
        })
        .collect::<Vec<_>>();
    Ok(Report {
        meta,
        ideas: trajs.len(),
        completion_rate: completion_rate(trajs),
        domain,
        performance: avg_best_performance(trajs, domain),
        search_epochs_excluding_initial: epochs.last().map(|e| e.epoch).unwrap_or(0),
        epochs,
        stratified,
        patterns: opts.patterns.clone(),
        rl_epochs,
    })
}

fn fmt_opt(p: Option<Performance>) -> (String, String) {
    match p {
        Some(p) => (format!("{:.4}", p.average), format!("{:.4}", p.best)),
        None => ("n/a".into(), "n/a".into()),
    }
}

pub fn render_markdown(r: &Report) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Run report: {}\n", if r.meta.run_id.is_empty() { "(unnamed)" } else { &r.meta.run_id });
    if let Some(env) = &r.meta.env_id {
        let _ = writeln!(md, "Environment: `{env}`");
    }
    if let Some(b) = r.meta.baseline_reward {
        let _ = writeln!(md, "Baseline reward: {b:.4}");
    }
    let _ = writeln!(md, "\n## Summary\n");
    let (avg, best) = fmt_opt(r.performance);
    let unit = match r.domain {
        Domain::Reward => "reward",
        Domain::Loss => "loss",
    };
    let _ = writeln!(md, "| ideas | completion rate | average {unit} | best {unit} |");
    let _ = writeln!(md, "|---|---|---|---|");
    let _ = writeln!(md, "| {} | {:.1}% | {avg} | {best} |", r.ideas, 100.0 * r.completion_rate);
    let _ = writeln!(md, "\n## Idea types\n");
    if r.stratified.is_empty() {
        let _ = writeln!(md, "No ideas.");
    } else {
        let _ = writeln!(md, "| type | share | average | best |");
        let _ = writeln!(md, "|---|---|---|---|");
        for row in &r.stratified {
            let (avg, best) = fmt_opt(row.performance);
            let name = match row.class {
                IdeaClass::HyperParameter => "hyper-parameter",
                IdeaClass::Algorithmic => "algorithmic",
            };
            let _ = writeln!(md, "| {name} | {:.1}% | {avg} | {best} |", row.share_pct);
        }
    }
    let _ = writeln!(md, "\n## Epochs\n");
    if r.epochs.is_empty() {
        let _ = writeln!(md, "No epochs.");
    } else {
        let _ = writeln!(md, "| epoch | ideas | completion | best | best so far | keyword matches |");
        let _ = writeln!(md, "|---|---|---|---|---|---|");
        for e in &r.epochs {
            let kw = e.keyword_matches.map(|k| k.to_string()).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                md,
                "| {} | {} | {:.1}% | {:.4} | {:.4} | {kw} |",
                e.epoch,
                e.ideas,
                100.0 * e.completion_rate,
                e.best,
                e.best_so_far
            );
        }
        let _ = writeln!(
            md,
            "\nEpoch 0 is the initial batch; {} search epochs follow it.",
            r.search_epochs_excluding_initial
        );
    }
    if r.rl_epochs > 0 {
        let _ = writeln!(md, "\nRL dynamics: {} epochs in `{DYNAMICS_FILE}`.", r.rl_epochs);
    }
    md
}

/// Reads a run directory and writes `report.json` and `report.md` into it.
/// Missing trajectory or dynamics files are treated as empty.
pub fn report(run_dir: &Path, opts: &ReportOptions) -> Result<Report, AnalysisError> {
    let meta_path = run_dir.join(RUN_META_FILE);
    let meta: RunMeta = match read_optional(&meta_path)? {
        Some(text) => serde_json::from_str(&text).map_err(|e| parse_err(&meta_path, e))?,
        None => RunMeta::default(),
    };
    let traj_path = run_dir.join(TRAJECTORIES_FILE);
    let records: Vec<TrajectoryRecord> = match read_optional(&traj_path)? {
        Some(text) => read_jsonl(&text).map_err(|e| parse_err(&traj_path, e))?,
        None => Vec::new(),
    };
    let trajs: Vec<Trajectory> = records.into_iter().map(TrajectoryRecord::into_trajectory).collect();
    let rl_epochs = read_optional(&run_dir.join(DYNAMICS_FILE))?
        .map(|t| t.lines().filter(|l| !l.trim().is_empty()).count())
        .unwrap_or(0);
    let r = build_report(meta, &trajs, rl_epochs, opts)?;
    write_report(run_dir, &r)?;
    Ok(r)
}

pub fn write_report(run_dir: &Path, r: &Report) -> Result<(), AnalysisError> {
    let write = |name: &str, body: String| {
        let path = run_dir.join(name);
        std::fs::write(&path, body).map_err(|source| AnalysisError::Io {
            path: path.display().to_string(),
            source,
        })
    };
    write(REPORT_JSON, serde_json::to_string_pretty(r).expect("report serializes") + "\n")?;
    write(REPORT_MD, render_markdown(r))
}
