//! Acceptance suite. One line per criterion; the process exits non-zero if
//! any criterion fails. Every tolerance used below is a named constant.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use execforge::analysis::{ReportOptions, RuleJudge, REPORT_JSON, TRAJECTORIES_FILE};
use execforge::domain::{reward_from_loss, ExecutionStatus, Idea, IdeaSource, MetricsLog, Trajectory};
use execforge::environments::{Environment, LatticeTuneSpec, Resources, SyntheticEnv, TwoModeSpec};
use execforge::gateway::{
    ArtifactKey, ArtifactStore, Completion, FnEndpoint, GatewayError, MemorySink, MemoryStore, ModelEndpoint, ModelRequest,
};
use execforge::implementer::{implement_idea, ImplementError, ImplementerConfig};
use execforge::pipeline::{LatticeCoder, PipelineExecution};
use execforge::rlsim::{group_normalized_advantages, jaccard, shaped_reward, train_rl, RLConfig, Shaping};
use execforge::scheduler::{JobConfig, Scheduler, VirtualClock, WorkerPool, DEFAULT_TICK, STATE_FILE};
use execforge::search::{
    best_of_n, epoch_best, run_search, select_positive, split_budget, write_run, MutationIdeator, SearchConfig,
    SyntheticExecution, EXPLOIT_TAG,
};
use execforge::worker::{SyntheticRunner, Worker};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- criterion 1

fn budget_law() -> Verdict {
    const PAIRS: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..PAIRS {
        let a: u32 = rng.random_range(0..=100);
        let n: usize = rng.random_range(0..=1000);
        let (exp, expl) = split_budget(a, n);
        // oracle: integer floor without going through the implementation's arithmetic
        let floor = (f64::from(a) * n as f64 / 100.0 + 1e-9).floor() as usize;
        if exp != floor || exp + expl != n {
            return verdict(false, format!("a={a} N={n} gave ({exp}, {expl})"));
        }
    }

    let env = Environment::lattice_tune();
    let mut cfg = SearchConfig::new(10, 4, 3);
    cfg.a1 = 100;
    cfg.schedule = execforge::search::Schedule::Constant;
    let run = run_search(&cfg, "c1", &MutationIdeator::new(LatticeTuneSpec::default(), 3), &SyntheticExecution::new(env.clone(), 3), &env)
        .expect("search");
    let explore = run
        .trajectories
        .iter()
        .filter(|t| t.epoch >= 1 && t.idea.source == IdeaSource::Explore)
        .count();
    let orphan = run
        .trajectories
        .iter()
        .filter(|t| t.epoch >= 1 && t.idea.parent_ids.is_empty())
        .count();
    verdict(
        explore == 0 && orphan == 0,
        format!("{PAIRS} (a, N) pairs exact; a(t)=100 run: {explore} explore ideas, {orphan} parentless ideas in epochs >= 1"),
    )
}

// ---------------------------------------------------------------- criterion 2

struct Recording<E> {
    inner: E,
    prompts: Mutex<Vec<String>>,
}

impl<E: ModelEndpoint> ModelEndpoint for Recording<E> {
    fn generate(&self, req: &ModelRequest) -> Result<Vec<Completion>, GatewayError> {
        self.prompts.lock().unwrap().push(req.prompt.clone());
        self.inner.generate(req)
    }
}

fn traj(id: &str, epoch: u32, reward: f64) -> Trajectory {
    Trajectory::new(Idea::fresh(id, format!("idea {id}")), epoch, ExecutionStatus::Succeeded, MetricsLog::default(), reward, String::new())
}

fn positive_strictness() -> Verdict {
    const SETS: usize = 2000;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for s in 0..SETS {
        let beta: f64 = rng.random_range(0.0..1.0);
        let n = rng.random_range(0..40);
        let trajs: Vec<Trajectory> = (0..n)
            .map(|i| {
                let r = match rng.random_range(0..4) {
                    0 => beta,
                    1 => 0.0,
                    _ => rng.random_range(0.0..1.0),
                };
                traj(&format!("s{s}-{i}"), 0, r)
            })
            .collect();
        let got: BTreeSet<&str> = select_positive(&trajs, beta).iter().map(|t| t.idea.id.as_str()).collect();
        let want: BTreeSet<&str> = trajs.iter().filter(|t| t.reward > beta).map(|t| t.idea.id.as_str()).collect();
        if got != want {
            return verdict(false, format!("set {s}: selection differs from {{r > beta}}"));
        }
    }

    let env = Environment::lattice_tune();
    let mut scanned = 0;
    let mut embedded = 0;
    for seed in 0..4u64 {
        let ideator = Recording {
            inner: MutationIdeator::new(LatticeTuneSpec::default(), seed),
            prompts: Mutex::new(Vec::new()),
        };
        let cfg = SearchConfig::new(20, 10, seed);
        let run = run_search(&cfg, "c2", &ideator, &SyntheticExecution::new(env.clone(), seed), &env).expect("search");
        let mut by_text: HashMap<&str, Vec<f64>> = HashMap::new();
        for t in &run.trajectories {
            by_text.entry(t.idea.idea_text.as_str()).or_default().push(t.reward);
        }
        for p in ideator.prompts.lock().unwrap().iter().filter(|p| p.starts_with(EXPLOIT_TAG)) {
            scanned += 1;
            for line in p.lines().filter(|l| l.starts_with("- reward=")) {
                embedded += 1;
                let text = line.split_once(" | ").map(|x| x.1).unwrap_or("");
                let rewards = by_text.get(text).cloned().unwrap_or_default();
                if rewards.is_empty() || rewards.iter().any(|&r| r <= run.beta) {
                    return verdict(false, format!("exploit prompt embeds {text:?} with rewards {rewards:?} <= beta {}", run.beta));
                }
            }
        }
    }
    verdict(
        scanned > 0 && embedded > 0,
        format!("{SETS} random sets exact; {scanned} exploit prompts scanned, {embedded} embedded trajectories all above beta"),
    )
}

// ---------------------------------------------------------------- criterion 3

const C3_SEEDS: u64 = 50;
const C3_N: usize = 20;
const C3_T: u32 = 10;
const C3_BON: usize = 220;
const C3_CONTEXT_BUDGET: usize = 400;
const C3_SIGMAS: f64 = 3.0;

/// Rewards of every lattice point, computed from the landscape's definition.
fn lattice_oracle() -> Vec<f64> {
    let optimum = [7.0, 2.0, 5.0, 1.0];
    let mut out = Vec::with_capacity(10_000);
    for a in 0..10 {
        for b in 0..10 {
            for c in 0..10 {
                for d in 0..10 {
                    let x = [a as f64, b as f64, c as f64, d as f64];
                    let d2: f64 = x.iter().zip(optimum).map(|(p, q)| (p - q) * (p - q)).sum();
                    out.push(0.3 + 0.6 * (-d2 / 8.0).exp());
                }
            }
        }
    }
    out
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn search_beats_best_of_n() -> Verdict {
    let oracle = lattice_oracle();
    let mut levels: Vec<f64> = oracle.clone();
    levels.sort_by(|a, b| b.total_cmp(a));
    levels.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let (r1, _r2) = (levels[1], levels[2]);
    let cdf = |r: f64, strict: bool| {
        let below = oracle.iter().filter(|&&x| if strict { x < r - 1e-12 } else { x <= r + 1e-12 }).count();
        (below as f64 / oracle.len() as f64).powi(C3_BON as i32)
    };
    // oracle median of the best of 220 uniform draws
    let oracle_median = levels
        .iter()
        .rev()
        .copied()
        .find(|&r| cdf(r, false) >= 0.5)
        .expect("cdf reaches 1");
    let p = cdf(r1, true);
    let tau = p - C3_SIGMAS * (p * (1.0 - p) / C3_SEEDS as f64).sqrt();

    let env = Environment::lattice_tune();
    let spec = LatticeTuneSpec::default();
    let mut search_best = Vec::new();
    let mut bon_best = Vec::new();
    let mut wins = 0;
    let mut monotone = true;
    for seed in 0..C3_SEEDS {
        let mut cfg = SearchConfig::new(C3_N, C3_T, seed);
        cfg.context_budget_chars = C3_CONTEXT_BUDGET;
        let run = run_search(&cfg, "c3", &MutationIdeator::new(spec.clone(), seed), &SyntheticExecution::new(env.clone(), seed), &env)
            .expect("search");
        monotone &= epoch_best(&run.trajectories).windows(2).all(|w| w[1].1 >= w[0].1);
        let bseed = seed ^ 0xb0;
        let bon = best_of_n(&MutationIdeator::new(spec.clone(), bseed), &SyntheticExecution::new(env.clone(), bseed), &env, "c3b", C3_BON)
            .expect("best of n");
        let s = run.final_best();
        let b = bon.iter().map(|t| t.reward).fold(0.0, f64::max);
        if s > b {
            wins += 1;
        }
        search_best.push(s);
        bon_best.push(b);
    }
    let ms = median(&mut search_best);
    let mb = median(&mut bon_best);
    let frac = wins as f64 / C3_SEEDS as f64;
    verdict(
        ms > mb && frac >= tau && monotone,
        format!(
            "median search {ms:.4} vs best-of-{C3_BON} {mb:.4} (oracle median {oracle_median:.4}); wins {wins}/{C3_SEEDS} = {frac:.3} >= tau {tau:.3} (p={p:.4}); running best monotone: {monotone}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

const GOOD: &str = "--- a/config.txt\n+++ b/config.txt\n@@ -1 +1 @@\n-set x=(5,5,5,5)\n+set x=(7,2,5,1)\n";

fn bad(candidate: usize, round: usize) -> String {
    format!("--- a/config.txt\n+++ b/config.txt\n@@ -1 +1 @@\n-wrong {candidate} {round}\n+set x=(1,1,1,1)\n")
}

/// Scripted coder: candidate `i` produces a working diff at round
/// `succeed_at[i]` (None: never). Counts revision requests.
fn scripted(succeed_at: Vec<Option<usize>>, revisions: Arc<AtomicUsize>) -> impl ModelEndpoint {
    FnEndpoint(move |req: &ModelRequest, i: usize| {
        let (cand, round) = match req.prompt.find("\n-wrong ") {
            Some(pos) => {
                revisions.fetch_add(1, Ordering::SeqCst);
                let rest = &req.prompt[pos + "\n-wrong ".len()..];
                let mut it = rest.split_whitespace();
                let c: usize = it.next().unwrap().parse().unwrap();
                let r: usize = it.next().unwrap().parse().unwrap();
                (c, r + 1)
            }
            None => (i, 0),
        };
        let body = if succeed_at[cand] == Some(round) { GOOD.to_string() } else { bad(cand, round) };
        Ok(Completion::body(format!("```diff\n{body}```\n")))
    })
}

fn run_implementer(succeed_at: Vec<Option<usize>>) -> (Result<execforge::implementer::ImplementReport, ImplementError>, usize) {
    let env = Environment::lattice_tune();
    let revisions = Arc::new(AtomicUsize::new(0));
    let coder = scripted(succeed_at, Arc::clone(&revisions));
    let store = MemoryStore::new();
    let r = implement_idea(
        &Idea::fresh("x", "move to the optimum"),
        &env.baseline,
        &env.env_id,
        env.guard(),
        &ImplementerConfig::default(),
        &coder,
        &store,
        &ArtifactKey::codebase("c4", 0, 0).unwrap(),
    );
    (r, revisions.load(Ordering::SeqCst))
}

fn implementer_protocol() -> Verdict {
    const K: usize = 10;
    const MAX_REVISIONS: usize = 2;
    const CASES: usize = 300;
    let cfg = ImplementerConfig::default();
    if cfg.k_parallel != K || cfg.max_revisions != MAX_REVISIONS || cfg.max_attempts() != 30 {
        return verdict(false, format!("defaults are {cfg:?}"));
    }

    let (r, revisions) = run_implementer(vec![None; K]);
    match r {
        Err(ImplementError::AllCandidatesFailed { attempts, logs }) if attempts == 30 && revisions == 20 && logs.len() == K => {}
        other => return verdict(false, format!("all-fail case gave {:?} with {revisions} revisions", other.map(|r| r.winner_index))),
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..CASES {
        let script: Vec<Option<usize>> = (0..K)
            .map(|_| match rng.random_range(0..6) {
                0 => Some(0),
                1 => Some(1),
                2 => Some(2),
                _ => None,
            })
            .collect();
        let expected = script.iter().position(Option::is_some);
        let (r, revisions) = run_implementer(script.clone());
        match (r, expected) {
            (Ok(rep), Some(w)) => {
                if rep.winner_index != w || rep.total_attempts() > 30 || rep.total_attempts() > K + revisions {
                    return verdict(
                        false,
                        format!("case {case} {script:?}: winner {} attempts {} revisions {revisions}", rep.winner_index, rep.total_attempts()),
                    );
                }
            }
            (Err(ImplementError::AllCandidatesFailed { attempts, .. }), None) if attempts == 30 => {}
            (r, e) => return verdict(false, format!("case {case} {script:?}: expected winner {e:?}, got {:?}", r.map(|r| r.winner_index))),
        }
    }
    verdict(true, format!("defaults k=10, revisions=2; all-fail = 30 attempts exactly; {CASES} scripted cases pick the lowest successful index within 30 attempts"))
}

// ---------------------------------------------------------------- criterion 5

const C5_UPLOADS: usize = 200;
const C5_DUPLICATES: usize = 30;
const C5_INTERLEAVINGS: u64 = 8;

fn scheduler_exactly_once() -> Verdict {
    let mut env = Environment::lattice_tune();
    env.resource_requirement = Resources { gpus: 0, cpus: 1, memory_mb: 1 };
    let env = Arc::new(env);
    for seed in 0..C5_INTERLEAVINGS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let distinct = C5_UPLOADS - C5_DUPLICATES;
        let mut contents: Vec<Vec<u8>> = (0..distinct).map(|i| format!("codebase {i}").into_bytes()).collect();
        for _ in 0..C5_DUPLICATES {
            let j = rng.random_range(0..distinct);
            contents.push(contents[j].clone());
        }
        contents.shuffle(&mut rng);

        let dir = tempfile::tempdir().unwrap();
        let state = dir.path().join(STATE_FILE);
        let store = Arc::new(MemoryStore::new());
        let runs: Arc<Mutex<HashMap<String, usize>>> = Arc::default();
        let make = |runs: &Arc<Mutex<HashMap<String, usize>>>| {
            let runs = Arc::clone(runs);
            let exec = move |j: &JobConfig| {
                *runs.lock().unwrap().entry(j.codebase_digest.clone()).or_insert(0) += 1;
            };
            Scheduler::new(
                Arc::clone(&store) as Arc<dyn ArtifactStore>,
                Arc::clone(&env),
                WorkerPool::uniform(3, Resources { gpus: 0, cpus: 2, memory_mb: 16 }),
                Arc::new(exec),
                Some(state.clone()),
            )
            .unwrap()
        };
        let restart_at = rng.random_range(20..180);
        let mut sched = make(&runs);
        for (i, c) in contents.iter().enumerate() {
            store.put_artifact(&ArtifactKey::codebase("c5", (i / 20) as u32, i).unwrap(), c).unwrap();
            if rng.random_bool(0.3) {
                sched.tick();
            }
            if i == restart_at {
                // stop mid-stream: let running jobs finish, drop, reload from disk
                sched.drain();
                drop(sched);
                sched = make(&runs);
            }
        }
        sched.run(&VirtualClock::default(), DEFAULT_TICK, None, true);
        sched.drain();
        let runs = runs.lock().unwrap();
        let total: usize = runs.values().sum();
        if total != distinct || runs.values().any(|&n| n != 1) {
            return verdict(false, format!("interleaving {seed}: {total} executions over {} digests", runs.len()));
        }
    }
    verdict(true, format!("{C5_INTERLEAVINGS} interleavings of {C5_UPLOADS} uploads ({C5_DUPLICATES} duplicates) with a restart: 170 executions each, none repeated"))
}

// ---------------------------------------------------------------- criterion 6

const C6_GROUPS: usize = 10_000;
const C6_TOL: f64 = 1e-9;

fn advantage_oracle() -> Verdict {
    let eps = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..C6_GROUPS {
        let n = rng.random_range(2..=64);
        let discrete = rng.random_bool(0.5);
        let rewards: Vec<f64> = (0..n)
            .map(|_| if discrete { [0.0, 0.5, 0.9][rng.random_range(0..3)] } else { rng.random_range(-2.0..2.0) })
            .collect();
        let mut sum = 0.0;
        for r in &rewards {
            sum += r;
        }
        let mean = sum / n as f64;
        let mut ss = 0.0;
        for r in &rewards {
            ss += (r - mean) * (r - mean);
        }
        let std = (ss / (n as f64 - 1.0)).sqrt();
        for (norm, got) in [(true, group_normalized_advantages(&rewards, eps, true)), (false, group_normalized_advantages(&rewards, eps, false))] {
            for (r, a) in rewards.iter().zip(&got) {
                let want = if norm { (r - mean) / (std + eps) } else { r - mean };
                worst = worst.max((a - want).abs());
            }
        }
    }
    let mut zeros = true;
    for v in [0.0, 0.1 + 0.2, 0.9, 1e6, -3.7] {
        for n in [2, 3, 7, 128] {
            zeros &= group_normalized_advantages(&vec![v; n], eps, true).iter().all(|&a| a == 0.0);
            zeros &= group_normalized_advantages(&vec![v; n], eps, false).iter().all(|&a| a == 0.0);
        }
    }
    verdict(worst <= C6_TOL && zeros, format!("{C6_GROUPS} groups, max deviation {worst:.2e} <= {C6_TOL:e}; all-equal groups exact zeros: {zeros}"))
}

// ---------------------------------------------------------- criteria 7 and 8

const C7_G: usize = 128;
const C7_EPOCHS: u32 = 68;
const C7_SEEDS: u64 = 5;
const C7_MIN_FINAL_AVG: f64 = 0.45;
const C7_MAX_REWARD: f64 = 0.9;
const C7_MIN_CONVERGED_SHARE: f64 = 0.90;
const C7_MAX_FINAL_THINKING: f64 = 60.0;
const C7_THINKING_SIGMAS: f64 = 3.0;
const C8_TOP_FRAC: f64 = 0.3;
const C8_SIGMAS: f64 = 3.0;
const FLOAT_SLACK: f64 = 1e-12;

fn rl_runs() -> Vec<execforge::rlsim::RlRun> {
    let spec = TwoModeSpec::default();
    (0..C7_SEEDS)
        .map(|seed| train_rl(&RLConfig::new(C7_G, C7_EPOCHS, seed), &spec).expect("rl run"))
        .collect()
}

fn mode_collapse(runs: &[execforge::rlsim::RlRun]) -> Verdict {
    // TwoMode constants: 2 easy ideas (reward 0.5, always run, 40 thinking
    // tokens), 8 complex ideas (reward 0.9 with probability 0.3, 400 tokens)
    let (easy, complex) = (2.0, 8.0);
    let uniform_expected = (easy * 0.5 + complex * 0.9 * 0.3) / 10.0;
    let upper_bound = f64::max(0.5, 0.9 * 0.3);
    let think_mean = (easy * 40.0 + complex * 400.0) / 10.0;
    let think_var = (easy * 40.0f64.powi(2) + complex * 400.0f64.powi(2)) / 10.0 - think_mean * think_mean;
    let think_tol = C7_THINKING_SIGMAS * (think_var / C7_G as f64).sqrt();

    let mut problems = Vec::new();
    let mut min_avg = f64::INFINITY;
    let mut min_share = f64::INFINITY;
    let mut max_final_thinking: f64 = 0.0;
    let mut max_reward: f64 = 0.0;
    for (seed, run) in runs.iter().enumerate() {
        let d0 = &run.dynamics[0];
        let last = run.dynamics.last().unwrap();
        if (d0.expected_reward - uniform_expected).abs() > FLOAT_SLACK {
            problems.push(format!("seed {seed}: uniform start {:.4}", d0.expected_reward));
        }
        if (d0.avg_thinking_len - think_mean).abs() > think_tol {
            problems.push(format!("seed {seed}: epoch-0 thinking {:.1}", d0.avg_thinking_len));
        }
        if last.expected_reward > upper_bound + FLOAT_SLACK {
            problems.push(format!("seed {seed}: expected reward above oracle bound"));
        }
        min_avg = min_avg.min(last.avg_reward);
        min_share = min_share.min(last.converged_idea_count as f64 / C7_G as f64);
        max_final_thinking = max_final_thinking.max(last.avg_thinking_len);
        max_reward = run.dynamics.iter().map(|d| d.max_reward).fold(max_reward, f64::max);
    }
    let pass = problems.is_empty()
        && min_avg >= C7_MIN_FINAL_AVG
        && max_reward <= C7_MAX_REWARD + FLOAT_SLACK
        && min_share >= C7_MIN_CONVERGED_SHARE
        && max_final_thinking <= C7_MAX_FINAL_THINKING;
    verdict(
        pass,
        format!(
            "{C7_SEEDS} seeds: final avg reward min {min_avg:.3} >= {C7_MIN_FINAL_AVG} (bound {upper_bound}, start {uniform_expected:.3}); \
             max reward {max_reward:.3} <= {C7_MAX_REWARD}; converged share min {min_share:.3} >= {C7_MIN_CONVERGED_SHARE}; \
             thinking {think_mean:.0}±{think_tol:.1} -> max {max_final_thinking:.1} <= {C7_MAX_FINAL_THINKING}{}",
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    )
}

fn stratification(runs: &[execforge::rlsim::RlRun]) -> Verdict {
    let n_top = (C8_TOP_FRAC * C7_G as f64 + 1e-9).floor();
    let p = 0.3;
    let top_limit = p + C8_SIGMAS * (p * (1.0 - p) / n_top).sqrt();
    let mut bottom_bad = 0;
    let mut top_bad = 0;
    let mut epochs = 0;
    let mut worst_bottom: f64 = 1.0;
    let mut worst_top: f64 = 0.0;
    for run in runs {
        for d in &run.dynamics {
            epochs += 1;
            if d.execution_rate_bottom30_thinking != 1.0 {
                bottom_bad += 1;
            }
            if d.execution_rate_top30_thinking > top_limit {
                top_bad += 1;
            }
            worst_bottom = worst_bottom.min(d.execution_rate_bottom30_thinking);
            worst_top = worst_top.max(d.execution_rate_top30_thinking);
        }
    }
    verdict(
        bottom_bad == 0 && top_bad == 0,
        format!(
            "{epochs} epochs: bottom-30% rate != 1.0 in {bottom_bad} (min {worst_bottom:.3}); top-30% rate > {top_limit:.3} in {top_bad} (max {worst_top:.3})"
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn shaping_variants() -> Verdict {
    const CAP: f64 = 0.3;
    const C9_LENGTH_CASES: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_bonus: f64 = 0.0;
    let mut over_cap = 0;
    for i in 0..C9_LENGTH_CASES {
        let weight: f64 = rng.random_range(0.0..3.0);
        let thinking = "tok ".repeat(rng.random_range(0..2000));
        let idea = Idea::new(format!("r{i}"), "add layernorm", Some(thinking), IdeaSource::RlRollout, vec![]).unwrap();
        let base: f64 = rng.random_range(0.0..1.0);
        let bonus = shaped_reward(base, &idea, &[], &Shaping::Length { weight, cap: CAP }) - base;
        if bonus > CAP * weight + FLOAT_SLACK || bonus < -FLOAT_SLACK {
            over_cap += 1;
        }
        worst_bonus = worst_bonus.max(bonus - CAP * weight);
    }

    let mut penalty_exact = true;
    for weight in [0.1, 0.25, 1.0, 2.5] {
        for base in [0.0, 0.5, 0.9] {
            let idea = Idea::new("d", "add ema of weights", None, IdeaSource::RlRollout, vec![]).unwrap();
            let shaped = shaped_reward(base, &idea, &["something else entirely", "add ema of weights"], &Shaping::DiversityPenalty { weight });
            penalty_exact &= shaped == base - weight * 1.0;
        }
    }

    // (a, b, |A ∩ B|, |A ∪ B|) counted by hand over whitespace token sets
    let fixtures: [(&str, &str, u32, u32); 20] = [
        ("a b c", "a b c", 3, 3),
        ("a b c", "d e f", 0, 6),
        ("a b", "b c", 1, 3),
        ("a b c d", "c d e f", 2, 6),
        ("a", "a b c d", 1, 4),
        ("a a a", "a", 1, 1),
        ("x y", "y x", 2, 2),
        ("add layernorm", "add layernorm before attention", 2, 4),
        ("use ema", "use ema of weights", 2, 4),
        ("one two three", "three four", 1, 4),
        ("p q r s t", "p", 1, 5),
        ("A b", "a b", 1, 3),
        ("a  b\tc", "c b a", 3, 3),
        ("m n o", "o n", 2, 3),
        ("k", "l", 0, 2),
        ("a b c d e", "a c e g", 3, 6),
        ("lr 0.1", "lr 0.01", 1, 3),
        ("1 2 3 4", "2 4 6 8", 2, 6),
        ("foo bar baz", "bar", 1, 3),
        ("same same", "same", 1, 1),
    ];
    let mut jac_bad = Vec::new();
    for (a, b, inter, union) in fixtures {
        let want = f64::from(inter) / f64::from(union);
        if (jaccard(a, b) - want).abs() > FLOAT_SLACK || (jaccard(b, a) - want).abs() > FLOAT_SLACK {
            jac_bad.push(format!("{a:?}/{b:?}"));
        }
    }
    verdict(
        over_cap == 0 && penalty_exact && jac_bad.is_empty(),
        format!(
            "length bonus over cap·weight in {over_cap}/{C9_LENGTH_CASES} (max excess {worst_bonus:.2e}); duplicate penalty exact: {penalty_exact}; jaccard fixtures wrong: {}",
            if jac_bad.is_empty() { "none".to_string() } else { jac_bad.join(", ") }
        ),
    )
}

// --------------------------------------------------------------- criterion 10

const C10_TOL: f64 = 1e-5;

fn metric_plumbing() -> Verdict {
    let cases = [(3.255, 0.30722), (4.066, 0.24594)];
    let mut detail = Vec::new();
    let mut pass = true;
    for (loss, want) in cases {
        let got = reward_from_loss(loss).map(|r| r.value).unwrap_or(f64::NAN);
        pass &= (got - want).abs() <= C10_TOL;
        detail.push(format!("loss {loss} -> {got:.5} (want {want}±{C10_TOL:e})"));
    }
    verdict(pass, detail.join("; "))
}

// --------------------------------------------------------------- criterion 11

fn pipeline_search(dir: &Path) -> (Vec<u8>, Vec<u8>) {
    let env = Arc::new(Environment::lattice_tune());
    let store: Arc<dyn ArtifactStore> = Arc::new(MemoryStore::new());
    let worker = Arc::new(
        Worker::new(Arc::clone(&store), dir.join("work"))
            .register("lattice_tune", Arc::new(SyntheticRunner { env: SyntheticEnv::LatticeTune(LatticeTuneSpec::default()) })),
    );
    let exec = PipelineExecution::new(
        Arc::clone(&env),
        Arc::new(LatticeCoder::default()),
        ImplementerConfig::default(),
        Arc::clone(&store),
        Arc::new(MemorySink::new()),
        worker,
        WorkerPool::uniform(4, Resources { gpus: 0, cpus: 2, memory_mb: 256 }),
        Some(dir.join(STATE_FILE)),
    )
    .unwrap()
    .with_tick(Duration::from_millis(1));
    let mut cfg = SearchConfig::new(20, 10, 42);
    cfg.context_budget_chars = C3_CONTEXT_BUDGET;
    let run = run_search(&cfg, "det", &MutationIdeator::new(LatticeTuneSpec::default(), 42), &exec, &env).expect("search");
    let out = dir.join("run");
    let judge = RuleJudge::default();
    write_run(&out, "det", "search", &run.trajectories, &env, &ReportOptions { judge: &judge, patterns: vec![] }).expect("write run");
    (std::fs::read(out.join(TRAJECTORIES_FILE)).unwrap(), std::fs::read(out.join(REPORT_JSON)).unwrap())
}

fn determinism() -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ta, ra) = pipeline_search(a.path());
    let (tb, rb) = pipeline_search(b.path());
    let lines = ta.iter().filter(|&&c| c == b'\n').count();
    verdict(
        ta == tb && ra == rb && lines == 220,
        format!("two pipeline runs: trajectories.jsonl identical {} ({lines} lines), report.json identical {}", ta == tb, ra == rb),
    )
}

// -------------------------------------------------------------------- driver

fn main() {
    let rl: Mutex<Option<Vec<execforge::rlsim::RlRun>>> = Mutex::new(None);
    let rl_runs_cached = || {
        let mut g = rl.lock().unwrap();
        g.get_or_insert_with(rl_runs).clone()
    };
    let criteria: Vec<(u32, &str, f64, Box<dyn Fn() -> Verdict + '_>)> = vec![
        (1, "budget split law", 1.0, Box::new(budget_law)),
        (2, "positive-set strictness", 5.0, Box::new(positive_strictness)),
        (3, "search beats best-of-N on LatticeTune", 30.0, Box::new(search_beats_best_of_n)),
        (4, "implementer protocol", 1.0, Box::new(implementer_protocol)),
        (5, "scheduler exactly-once", 10.0, Box::new(scheduler_exactly_once)),
        (6, "advantage oracle", 5.0, Box::new(advantage_oracle)),
        (7, "mode collapse on TwoMode", 60.0, Box::new(|| mode_collapse(&rl_runs_cached()))),
        // shares the runs of criterion 7
        (8, "thinking/execution stratification", 60.0, Box::new(|| stratification(&rl_runs_cached()))),
        (9, "shaping variants", 1.0, Box::new(shaping_variants)),
        (10, "loss to reward plumbing", 1.0, Box::new(metric_plumbing)),
        (11, "end-to-end determinism", 30.0, Box::new(determinism)),
    ];
    let mut failed = 0;
    for (n, name, budget_s, check) in &criteria {
        let start = Instant::now();
        let v = check();
        let secs = start.elapsed().as_secs_f64();
        let in_time = secs < *budget_s;
        let pass = v.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {n} ({name}): {} [{secs:.2}s, limit {budget_s}s{}]",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            if in_time { "" } else { ", over time" }
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
