//! Execution-guided evolutionary search over ideas, and the best-of-N
//! comparator it is measured against.
//!
//! Epoch 0 is a fresh batch. Every later epoch splits its batch between
//! exploiting the trajectories that beat the baseline and exploring away
//! from everything tried so far; the split follows an annealing schedule.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Idea, IdeaSource, LogicalTimestamps, Trajectory, TrajectoryRecord};
use crate::environments::{evaluate, synth_execute, Environment, LatticeTuneSpec};
use crate::gateway::{generate_checked, Completion, GatewayError, ModelEndpoint, ModelRequest};
use crate::seed::{derive_seed, rng, seed_from_bytes};

pub const FRESH_TAG: &str = "[execforge:fresh]";
pub const EXPLOIT_TAG: &str = "[execforge:exploit]";
pub const EXPLORE_TAG: &str = "[execforge:explore]";

/// Exploitation percentage per epoch, for epochs 1..=T.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum Schedule {
    /// `min(cap, a1 + step * (t - 1))`
    Linear { step: u32, cap: u32 },
    Constant,
    /// Explicit rates for epochs 1, 2, ...; the last value repeats.
    Table { rates: Vec<u32> },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Linear { step: 5, cap: 90 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: u32,
    #[serde(default = "default_a1")]
    pub a1: u32,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "default_budget")]
    pub context_budget_chars: usize,
    pub seed: u64,
}

fn default_a1() -> u32 {
    50
}

fn default_budget() -> usize {
    8000
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("environment {0} has no baseline reward")]
    NoBaseline(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("execution backend failed: {0}")]
    Execution(String),
}

impl SearchConfig {
    pub fn new(n: usize, t: u32, seed: u64) -> Self {
        Self {
            n,
            t,
            a1: default_a1(),
            schedule: Schedule::default(),
            context_budget_chars: default_budget(),
            seed,
        }
    }

    /// a(t) for `t >= 1`.
    pub fn rate(&self, t: u32) -> u32 {
        let t = t.max(1);
        match &self.schedule {
            Schedule::Linear { step, cap } => (*cap).min(self.a1.saturating_add(step.saturating_mul(t - 1))),
            Schedule::Constant => self.a1,
            Schedule::Table { rates } => rates
                .get(t as usize - 1)
                .or(rates.last())
                .copied()
                .unwrap_or(self.a1),
        }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::Config(m.to_string()));
        if self.n == 0 {
            return bad("N must be at least 1");
        }
        if self.context_budget_chars == 0 {
            return bad("context_budget_chars must be positive");
        }
        if let Schedule::Table { rates } = &self.schedule {
            if rates.is_empty() {
                return bad("table schedule needs at least one rate");
            }
        }
        let mut prev = 0;
        for t in 1..=self.t.max(1) {
            let a = self.rate(t);
            if a > 100 {
                return Err(SearchError::Config(format!("a({t}) = {a} exceeds 100")));
            }
            if a < prev {
                return Err(SearchError::Config(format!("a({t}) = {a} decreases; exploitation may only grow")));
            }
            prev = a;
        }
        Ok(())
    }
}

/// `(N_exp, N_expl)` with `N_exp = floor(a * N / 100)`.
pub fn split_budget(a: u32, n: usize) -> (usize, usize) {
    assert!(a <= 100, "exploitation rate {a} outside 0..=100");
    let n_exp = a as usize * n / 100;
    (n_exp, n - n_exp)
}

/// Trajectories whose reward is strictly above the baseline.
pub fn select_positive(trajs: &[Trajectory], beta: f64) -> Vec<&Trajectory> {
    trajs.iter().filter(|t| t.reward > beta).collect()
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn exploit_entry(t: &Trajectory) -> String {
    format!("- reward={:.6} | {}\n", t.reward, one_line(&t.idea.idea_text))
}

pub fn explore_entry(t: &Trajectory) -> String {
    format!("- {}\n", one_line(&t.idea.idea_text))
}

fn chars(s: &str) -> usize {
    s.chars().count()
}

/// Greedy prefix of the positives, best first (ties: earlier epoch, then
/// id), that fits in `budget` characters of rendered entries.
pub fn exploit_selection<'a>(d_plus: &[&'a Trajectory], budget: usize) -> Vec<&'a Trajectory> {
    let mut sorted = d_plus.to_vec();
    sorted.sort_by(|a, b| {
        b.reward
            .total_cmp(&a.reward)
            .then(a.epoch.cmp(&b.epoch))
            .then_with(|| a.idea.id.cmp(&b.idea.id))
    });
    let mut used = 0;
    let mut out = Vec::new();
    for t in sorted {
        let cost = chars(&exploit_entry(t));
        if used + cost > budget {
            break;
        }
        used += cost;
        out.push(t);
    }
    out
}

/// Uniform sampling without replacement, stopping at the first candidate
/// that would overflow the budget.
pub fn subsample_to_context<'a>(trajs: &[&'a Trajectory], budget: usize, seed: u64) -> Vec<&'a Trajectory> {
    let mut order = trajs.to_vec();
    order.shuffle(&mut rng(seed, &[]));
    let mut used = 0;
    let mut out = Vec::new();
    for t in order {
        let cost = chars(&explore_entry(t));
        if used + cost > budget {
            break;
        }
        used += cost;
        out.push(t);
    }
    out
}

fn context_block(env: &Environment) -> String {
    if env.baseline.is_empty() {
        format!("Environment: {}\n", env.env_id)
    } else {
        format!("Environment: {}\nBaseline codebase:\n{}", env.env_id, env.baseline.render_for_prompt())
    }
}

pub fn fresh_prompt(env: &Environment, epoch: u32, n: usize) -> ModelRequest {
    let prompt = format!(
        "{FRESH_TAG} epoch={epoch}\n{}\nPropose {n} research ideas that would improve the baseline's score. \
         Reply with one idea.\n",
        context_block(env)
    );
    ModelRequest::new(prompt, n)
}

/// Prompt asking for `n` variants of the embedded positives. `None` when no
/// positive fits, which tells the caller to explore instead.
pub fn exploit_prompt(
    env: &Environment,
    epoch: u32,
    d_plus: &[&Trajectory],
    n: usize,
    budget: usize,
) -> Option<(ModelRequest, Vec<String>)> {
    let chosen = exploit_selection(d_plus, budget);
    if chosen.is_empty() {
        return None;
    }
    let mut prompt = format!(
        "{EXPLOIT_TAG} epoch={epoch}\n{}\nThese ideas beat the baseline when executed, best first:\n",
        context_block(env)
    );
    for t in &chosen {
        prompt.push_str(&exploit_entry(t));
    }
    prompt.push_str(&format!(
        "Propose {n} new variants that combine their strengths. Reply with one idea.\n"
    ));
    let parents = chosen.iter().map(|t| t.idea.id.clone()).collect();
    Some((ModelRequest::new(prompt, n), parents))
}

pub fn explore_prompt(env: &Environment, epoch: u32, subset: &[&Trajectory], n: usize) -> ModelRequest {
    let mut prompt = format!("{EXPLORE_TAG} epoch={epoch}\n{}\n", context_block(env));
    if subset.is_empty() {
        prompt.push_str("Propose a completely new idea.\n");
    } else {
        prompt.push_str("Ideas already tried:\n");
        for t in subset {
            prompt.push_str(&explore_entry(t));
        }
        prompt.push_str("Propose a completely new idea that is different from all of the above.\n");
    }
    prompt.push_str(&format!("Proposals requested: {n}. Reply with one idea.\n"));
    ModelRequest::new(prompt, n)
}

/// Executes a batch of ideas for one epoch; results come back in input
/// order. Individual failures are trajectories, not errors.
pub trait ExecutionApi: Send + Sync {
    fn execute_batch(&self, run_id: &str, epoch: u32, ideas: Vec<Idea>) -> Result<Vec<Trajectory>, SearchError>;
}

/// Executes ideas directly against a synthetic environment.
pub struct SyntheticExecution {
    pub env: Environment,
    pub seed: u64,
}

impl SyntheticExecution {
    pub fn new(env: Environment, seed: u64) -> Self {
        Self { env, seed }
    }

    pub fn execute_one(&self, epoch: u32, idea: Idea) -> Trajectory {
        let Some(synthetic) = &self.env.synthetic else {
            return Trajectory::new(
                idea,
                epoch,
                crate::domain::ExecutionStatus::RunFailed,
                Default::default(),
                0.0,
                "not a synthetic environment\n".into(),
            );
        };
        let seed = seed_from_bytes(self.seed, idea.id.as_bytes());
        let out = synth_execute(synthetic, &idea.idea_text, seed);
        let reward = evaluate(&self.env, &out.metrics, out.status).value;
        Trajectory::new(idea, epoch, out.status, out.metrics, reward, out.execution_log)
    }
}

impl ExecutionApi for SyntheticExecution {
    fn execute_batch(&self, _run_id: &str, epoch: u32, ideas: Vec<Idea>) -> Result<Vec<Trajectory>, SearchError> {
        Ok(ideas.into_iter().map(|i| self.execute_one(epoch, i)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: u32,
    pub rate: u32,
    pub n_exploit: usize,
    pub n_explore: usize,
    pub positives: usize,
    /// The exploitation share went to exploration because no positive fit.
    pub reassigned: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchRun {
    pub run_id: String,
    pub beta: f64,
    pub trajectories: Vec<Trajectory>,
    pub epochs: Vec<EpochSummary>,
}

impl SearchRun {
    pub fn records(&self) -> Vec<TrajectoryRecord> {
        to_records(&self.run_id, &self.trajectories)
    }

    pub fn final_best(&self) -> f64 {
        self.trajectories.iter().map(|t| t.reward).fold(0.0, f64::max)
    }
}

/// Records with logical timestamps: sequence numbers in proposal order;
/// completions are reduced in the same order.
pub fn to_records(run_id: &str, trajs: &[Trajectory]) -> Vec<TrajectoryRecord> {
    trajs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            t.to_record(
                run_id,
                LogicalTimestamps {
                    proposed_seq: i as u64,
                    completed_seq: i as u64,
                },
            )
        })
        .collect()
}

fn ideas_from(
    completions: Vec<Completion>,
    epoch: u32,
    first_index: usize,
    source: IdeaSource,
    parents: &[String],
) -> Vec<Idea> {
    completions
        .into_iter()
        .enumerate()
        .map(|(j, c)| {
            Idea::new(
                format!("e{epoch}-i{:03}", first_index + j),
                c.body_text.trim().to_string(),
                c.thinking_text,
                source,
                parents.to_vec(),
            )
            .expect("exploit ideas always carry the prompt's parents")
        })
        .collect()
}

pub fn run_search(
    cfg: &SearchConfig,
    run_id: &str,
    ideator: &dyn ModelEndpoint,
    execution: &dyn ExecutionApi,
    env: &Environment,
) -> Result<SearchRun, SearchError> {
    cfg.validate()?;
    let beta = env.baseline_reward().ok_or_else(|| SearchError::NoBaseline(env.env_id.clone()))?;
    let mut all: Vec<Trajectory> = Vec::with_capacity((cfg.t as usize + 1) * cfg.n);
    let mut epochs = Vec::new();

    let fresh = generate_checked(ideator, &fresh_prompt(env, 0, cfg.n))?;
    let ideas = ideas_from(fresh, 0, 0, IdeaSource::Sampled, &[]);
    all.extend(execution.execute_batch(run_id, 0, ideas)?);
    epochs.push(EpochSummary {
        epoch: 0,
        rate: 0,
        n_exploit: 0,
        n_explore: 0,
        positives: 0,
        reassigned: false,
    });
    log::info!("epoch 0: best {:.6}", all.iter().map(|t| t.reward).fold(0.0, f64::max));

    for t in 1..=cfg.t {
        let rate = cfg.rate(t);
        let (mut n_exp, mut n_expl) = split_budget(rate, cfg.n);
        let d_plus = select_positive(&all, beta);
        let positives = d_plus.len();
        let mut ideas = Vec::with_capacity(cfg.n);
        let mut reassigned = false;
        if n_exp > 0 {
            match exploit_prompt(env, t, &d_plus, n_exp, cfg.context_budget_chars) {
                Some((req, parents)) => {
                    let out = generate_checked(ideator, &req)?;
                    ideas.extend(ideas_from(out, t, 0, IdeaSource::Exploit, &parents));
                }
                None => {
                    reassigned = true;
                    n_expl += n_exp;
                    n_exp = 0;
                }
            }
        }
        if n_expl > 0 {
            let prior: Vec<&Trajectory> = all.iter().collect();
            let subset = subsample_to_context(&prior, cfg.context_budget_chars, derive_seed(cfg.seed, &[t as u64]));
            let out = generate_checked(ideator, &explore_prompt(env, t, &subset, n_expl))?;
            ideas.extend(ideas_from(out, t, n_exp, IdeaSource::Explore, &[]));
        }
        let batch = execution.execute_batch(run_id, t, ideas)?;
        all.extend(batch);
        log::info!(
            "epoch {t}: a={rate} exploit={n_exp} explore={n_expl} positives={positives} best {:.6}",
            all.iter().map(|x| x.reward).fold(0.0, f64::max)
        );
        epochs.push(EpochSummary {
            epoch: t,
            rate,
            n_exploit: n_exp,
            n_explore: n_expl,
            positives,
            reassigned,
        });
    }
    Ok(SearchRun {
        run_id: run_id.to_string(),
        beta,
        trajectories: all,
        epochs,
    })
}

/// `n` independent fresh samples, executed with no feedback between them.
pub fn best_of_n(
    ideator: &dyn ModelEndpoint,
    execution: &dyn ExecutionApi,
    env: &Environment,
    run_id: &str,
    n: usize,
) -> Result<Vec<Trajectory>, SearchError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let out = generate_checked(ideator, &fresh_prompt(env, 0, n))?;
    execution.execute_batch(run_id, 0, ideas_from(out, 0, 0, IdeaSource::Sampled, &[]))
}

/// Running maximum of reward, one point per epoch present, in epoch order.
pub fn epoch_best(trajs: &[Trajectory]) -> Vec<(u32, f64)> {
    let mut per_epoch: BTreeMap<u32, f64> = BTreeMap::new();
    for t in trajs {
        let e = per_epoch.entry(t.epoch).or_insert(f64::NEG_INFINITY);
        *e = e.max(t.reward);
    }
    let mut best = f64::NEG_INFINITY;
    per_epoch
        .into_iter()
        .map(|(e, r)| {
            best = best.max(r);
            (e, best)
        })
        .collect()
}

/// Writes `trajectories.jsonl`, `run_meta.json` and the report files.
pub fn write_run(
    dir: &std::path::Path,
    run_id: &str,
    kind: &str,
    trajs: &[Trajectory],
    env: &Environment,
    opts: &crate::analysis::ReportOptions,
) -> Result<crate::analysis::Report, crate::analysis::AnalysisError> {
    use crate::analysis::{AnalysisError, RunMeta, RUN_META_FILE, TRAJECTORIES_FILE};
    let io = |path: &std::path::Path| {
        let path = path.display().to_string();
        move |source| AnalysisError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let traj_path = dir.join(TRAJECTORIES_FILE);
    let file = std::fs::File::create(&traj_path).map_err(io(&traj_path))?;
    crate::domain::write_jsonl(std::io::BufWriter::new(file), to_records(run_id, trajs)).map_err(io(&traj_path))?;
    let meta = RunMeta {
        run_id: run_id.to_string(),
        kind: kind.to_string(),
        env_id: Some(env.env_id.clone()),
        reward_kind: Some(env.reward_kind),
        baseline_reward: env.baseline_reward(),
    };
    let meta_path = dir.join(RUN_META_FILE);
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n")
        .map_err(io(&meta_path))?;
    crate::analysis::report(dir, opts)
}

/// Mock ideator for LatticeTune. Fresh and explore prompts get a uniform
/// lattice point; exploit prompts get a random embedded parent moved by one
/// step along one coordinate. Seeded by (seed, prompt, sample index).
pub struct MutationIdeator {
    pub spec: LatticeTuneSpec,
    pub seed: u64,
}

impl MutationIdeator {
    pub fn new(spec: LatticeTuneSpec, seed: u64) -> Self {
        Self { spec, seed }
    }

    fn parents(&self, prompt: &str) -> Vec<Vec<u8>> {
        prompt
            .lines()
            .filter(|l| l.starts_with("- reward="))
            .filter_map(|l| l.split_once(" | "))
            .filter_map(|(_, text)| self.spec.parse_point(text))
            .collect()
    }

    fn uniform(&self, r: &mut impl Rng) -> Vec<u8> {
        (0..self.spec.dimension()).map(|_| r.random_range(0..=self.spec.max_coordinate)).collect()
    }

    fn mutate(&self, parent: &[u8], r: &mut impl Rng) -> Vec<u8> {
        let mut x = parent.to_vec();
        let i = r.random_range(0..x.len());
        let up = r.random_bool(0.5);
        x[i] = match (up, x[i]) {
            (true, v) if v < self.spec.max_coordinate => v + 1,
            (true, v) => v - 1,
            (false, 0) => 1,
            (false, v) => v - 1,
        };
        x
    }
}

impl ModelEndpoint for MutationIdeator {
    fn generate(&self, req: &ModelRequest) -> Result<Vec<Completion>, GatewayError> {
        req.validate()?;
        let base = seed_from_bytes(self.seed, req.prompt.as_bytes());
        let parents = if req.prompt.starts_with(EXPLOIT_TAG) {
            self.parents(&req.prompt)
        } else {
            Vec::new()
        };
        Ok((0..req.n_samples)
            .map(|j| {
                let mut r = rng(base, &[j as u64]);
                let x = if parents.is_empty() {
                    self.uniform(&mut r)
                } else {
                    let p = &parents[r.random_range(0..parents.len())];
                    self.mutate(p, &mut r)
                };
                Completion::body(LatticeTuneSpec::format_point(&x))
            })
            .collect())
    }
}
