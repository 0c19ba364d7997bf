//! Policy-gradient training of a tabular ideator on the TwoMode idea space.
//!
//! The policy is a softmax over the ideas. Each epoch samples a group of
//! rollouts, executes them, normalizes rewards within the group and takes
//! one step on the clipped surrogate.

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{keyword_convergence, thinking_stratified_execution};
use crate::domain::{whitespace_tokens, ExecutionStatus, Idea, IdeaSource, Reward, RewardKind, Trajectory};
use crate::environments::{synth_execute, SyntheticEnv, TwoModeSpec};
use crate::seed::{derive_seed, rng};

/// Rollout length at which the length bonus reaches its cap when the
/// weight is 1 and the cap is 1. Equal to the complex ideas' thinking length.
pub const LENGTH_NORMALIZER: f64 = 400.0;

/// In exact mode, expected reward never decreases for learning rates up to
/// this value on the default TwoMode space: the expected rewards span only
/// 0.23, which keeps the objective's curvature small enough that a step
/// this long cannot overshoot.
pub const EXACT_MONOTONE_MAX_LR: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shaping {
    None,
    Length {
        weight: f64,
        #[serde(default = "default_cap")]
        cap: f64,
    },
    DiversityPenalty {
        weight: f64,
    },
    /// Mixes `samples` rollouts of the previous epoch into the sampling
    /// distribution with weight `mix`.
    DynamicPrompt {
        samples: usize,
        mix: f64,
    },
}

fn default_cap() -> f64 {
    0.3
}

/// `Sampled` follows the group estimate; `Exact` steps along the exact
/// gradient of expected reward, which makes the dynamics checkable in
/// closed form.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    Sampled,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RLConfig {
    pub group_size: usize,
    pub epochs: u32,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_clip")]
    pub cliprange: f64,
    #[serde(default = "default_eps")]
    pub advantage_eps: f64,
    #[serde(default = "default_true")]
    pub normalize_by_std: bool,
    #[serde(default = "default_shaping")]
    pub shaping: Shaping,
    #[serde(default)]
    pub gradient: GradientMode,
    pub seed: u64,
}

fn default_lr() -> f64 {
    2.0
}
fn default_clip() -> f64 {
    0.2
}
fn default_eps() -> f64 {
    1e-6
}
fn default_true() -> bool {
    true
}
fn default_shaping() -> Shaping {
    Shaping::None
}

#[derive(Debug, Error, PartialEq)]
pub enum RlError {
    #[error("invalid rl config: {0}")]
    Config(String),
    #[error("group size must be at least 2, got {0}")]
    GroupTooSmall(usize),
}

impl RLConfig {
    pub fn new(group_size: usize, epochs: u32, seed: u64) -> Self {
        Self {
            group_size,
            epochs,
            learning_rate: default_lr(),
            cliprange: default_clip(),
            advantage_eps: default_eps(),
            normalize_by_std: true,
            shaping: Shaping::None,
            gradient: GradientMode::Sampled,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), RlError> {
        if self.group_size < 2 {
            return Err(RlError::GroupTooSmall(self.group_size));
        }
        let bad = |m: &str| Err(RlError::Config(m.into()));
        if !(self.cliprange > 0.0) {
            return bad("cliprange must be positive");
        }
        if !(self.advantage_eps > 0.0) {
            return bad("advantage_eps must be positive");
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return bad("learning_rate must be finite and non-negative");
        }
        match self.shaping {
            Shaping::Length { weight, cap } if !(weight >= 0.0 && cap >= 0.0) => bad("length shaping needs weight, cap >= 0"),
            Shaping::DiversityPenalty { weight } if !(weight >= 0.0) => bad("diversity weight must be >= 0"),
            Shaping::DynamicPrompt { mix, .. } if !(0.0..=1.0).contains(&mix) => bad("dynamic prompt mix must be in [0, 1]"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub logits: Vec<f64>,
    pub context_key: Option<String>,
    pub step: u64,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

impl PolicyState {
    pub fn uniform(n: usize) -> Self {
        Self {
            logits: vec![0.0; n],
            context_key: None,
            step: 0,
        }
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.logits)
    }
}

/// A sampled idea together with its index in the idea space.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub index: usize,
    pub idea: Idea,
}

fn make_rollout(spec: &TwoModeSpec, index: usize, id: String) -> Rollout {
    let idea = Idea::new(
        id,
        spec.ideas[index].text.clone(),
        Some(spec.thinking_text(index)),
        IdeaSource::RlRollout,
        Vec::new(),
    )
    .expect("rollouts have no parents to check");
    Rollout { index, idea }
}

/// `g` independent draws from `dist`, deterministic given the seed.
pub fn sample_group(dist: &[f64], spec: &TwoModeSpec, g: usize, epoch: u32, seed: u64) -> Result<Vec<Rollout>, RlError> {
    if g < 2 {
        return Err(RlError::GroupTooSmall(g));
    }
    let w = WeightedIndex::new(dist).map_err(|e| RlError::Config(format!("bad sampling distribution: {e}")))?;
    let mut r = rng(seed, &[]);
    Ok((0..g)
        .map(|j| make_rollout(spec, w.sample(&mut r), format!("e{epoch:03}-r{j:04}")))
        .collect())
}

pub fn rollout_group(policy: &PolicyState, spec: &TwoModeSpec, g: usize, seed: u64) -> Result<Vec<Rollout>, RlError> {
    sample_group(&policy.probs(), spec, g, policy.step as u32, seed)
}

/// Centers rewards within the group and, optionally, divides by the sample
/// standard deviation plus `eps`.
pub fn group_normalized_advantages(rewards: &[f64], eps: f64, normalize_by_std: bool) -> Vec<f64> {
    group_normalized_advantages_with(rewards, eps, normalize_by_std, false)
}

/// As above; `population_std` divides the variance by G instead of G - 1.
pub fn group_normalized_advantages_with(rewards: &[f64], eps: f64, normalize_by_std: bool, population_std: bool) -> Vec<f64> {
    let g = rewards.len();
    assert!(g >= 2, "group size must be at least 2");
    if rewards.iter().all(|r| *r == rewards[0]) {
        // summing identical values can leave rounding residue in the mean
        return vec![0.0; g];
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let centered: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    if !normalize_by_std {
        return centered;
    }
    let ss: f64 = centered.iter().map(|c| c * c).sum();
    let denom = if population_std { g as f64 } else { (g - 1) as f64 };
    let std = (ss / denom).sqrt();
    centered.into_iter().map(|c| c / (std + eps)).collect()
}

/// Gradient of the mean clipped surrogate with respect to the logits.
pub fn surrogate_gradient(policy: &PolicyState, actions: &[usize], advantages: &[f64], old: &PolicyState, cliprange: f64) -> Vec<f64> {
    assert_eq!(actions.len(), advantages.len());
    let p = policy.probs();
    let p_old = old.probs();
    let mut grad = vec![0.0; p.len()];
    let g = actions.len() as f64;
    for (&a, &adv) in actions.iter().zip(advantages) {
        let ratio = p[a] / p_old[a];
        // the clipped branch has zero gradient once it binds
        let active = if adv > 0.0 {
            ratio < 1.0 + cliprange
        } else if adv < 0.0 {
            ratio > 1.0 - cliprange
        } else {
            false
        };
        if !active {
            continue;
        }
        let w = ratio * adv / g;
        for (k, gk) in grad.iter_mut().enumerate() {
            *gk += w * (if k == a { 1.0 } else { 0.0 } - p[k]);
        }
    }
    grad
}

/// One gradient ascent step on the clipped surrogate.
pub fn policy_update(policy: &PolicyState, actions: &[usize], advantages: &[f64], old: &PolicyState, cfg: &RLConfig) -> PolicyState {
    let grad = surrogate_gradient(policy, actions, advantages, old, cfg.cliprange);
    PolicyState {
        logits: policy
            .logits
            .iter()
            .zip(&grad)
            .map(|(l, g)| l + cfg.learning_rate * g)
            .collect(),
        context_key: policy.context_key.clone(),
        step: policy.step + 1,
    }
}

/// Exact gradient of expected reward: `pi_k * (R_k - J)`.
pub fn exact_gradient(policy: &PolicyState, spec: &TwoModeSpec) -> Vec<f64> {
    let p = policy.probs();
    let j = spec.policy_expected_reward(&p);
    p.iter()
        .enumerate()
        .map(|(k, pk)| pk * (spec.expected_reward(k) - j))
        .collect()
}

pub fn exact_update(policy: &PolicyState, spec: &TwoModeSpec, lr: f64) -> PolicyState {
    let grad = exact_gradient(policy, spec);
    PolicyState {
        logits: policy.logits.iter().zip(&grad).map(|(l, g)| l + lr * g).collect(),
        context_key: policy.context_key.clone(),
        step: policy.step + 1,
    }
}

/// Executes one rollout; failures score 0.
pub fn execution_reward(idea: &Idea, spec: &TwoModeSpec, seed: u64) -> (ExecutionStatus, Reward) {
    let out = synth_execute(&SyntheticEnv::TwoMode(spec.clone()), &idea.idea_text, seed);
    let value = if out.status.is_success() {
        out.metrics.last_value(crate::domain::SYNTHETIC_METRIC).unwrap_or(0.0)
    } else {
        0.0
    };
    (
        out.status,
        Reward {
            value,
            kind: RewardKind::Synthetic,
        },
    )
}

fn token_set(text: &str) -> HashSet<&str> {
    text.split_whitespace().collect()
}

/// Jaccard similarity of whitespace token sets; two empty sets score 1.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let (sa, sb) = (token_set(a), token_set(b));
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / sa.union(&sb).count() as f64
}

/// Length bonus counts every token of the rollout, thinking included.
pub fn shaped_reward(base: f64, idea: &Idea, prev_epoch_ideas: &[&str], shaping: &Shaping) -> f64 {
    match *shaping {
        Shaping::Length { weight, cap } => {
            let tokens = idea.thinking_len + whitespace_tokens(&idea.idea_text);
            base + weight * cap.min(tokens as f64 / LENGTH_NORMALIZER)
        }
        Shaping::DiversityPenalty { weight } => {
            let max_sim = prev_epoch_ideas
                .iter()
                .map(|p| jaccard(&idea.idea_text, p))
                .fold(0.0, f64::max);
            base - weight * max_sim
        }
        Shaping::None | Shaping::DynamicPrompt { .. } => base,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochDynamics {
    pub epoch: u32,
    /// Mean execution reward over the group, failures counted as 0.
    pub avg_reward: f64,
    pub max_reward: f64,
    /// Mean of the rewards the update actually used.
    pub avg_shaped_reward: f64,
    /// Exact expected reward of the policy that sampled this epoch.
    pub expected_reward: f64,
    pub avg_thinking_len: f64,
    pub avg_idea_len: f64,
    pub execution_rate_top30_thinking: f64,
    pub execution_rate_bottom30_thinking: f64,
    /// Rollouts matching the easy-idea keyword patterns.
    pub converged_idea_count: usize,
    pub group_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlRun {
    pub dynamics: Vec<EpochDynamics>,
    pub policy: PolicyState,
    /// Executed rollouts of every epoch, in order.
    pub trajectories: Vec<Trajectory>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn train_rl(cfg: &RLConfig, spec: &TwoModeSpec) -> Result<RlRun, RlError> {
    cfg.validate()?;
    let patterns: Vec<String> = TwoModeSpec::EASY_PATTERNS.iter().map(|s| s.to_string()).collect();
    let mut policy = PolicyState::uniform(spec.len());
    let mut dynamics = Vec::with_capacity(cfg.epochs as usize);
    let mut trajectories = Vec::with_capacity(cfg.epochs as usize * cfg.group_size);
    let mut prev: Vec<Rollout> = Vec::new();

    for epoch in 0..cfg.epochs {
        let old = policy.clone();
        let probs = policy.probs();
        let mut dist = probs.clone();
        if let Shaping::DynamicPrompt { samples, mix } = cfg.shaping {
            if !prev.is_empty() && samples > 0 {
                let mut r = rng(cfg.seed, &[epoch as u64, 2]);
                let picked: Vec<&Rollout> = (0..samples).map(|_| &prev[r.random_range(0..prev.len())]).collect();
                let mut empirical = vec![0.0; spec.len()];
                for p in &picked {
                    empirical[p.index] += 1.0 / samples as f64;
                }
                dist = probs.iter().zip(&empirical).map(|(p, e)| (1.0 - mix) * p + mix * e).collect();
                policy.context_key = Some(
                    picked
                        .iter()
                        .map(|p| spec.ideas[p.index].name.as_str())
                        .collect::<Vec<_>>()
                        .join(","),
                );
            }
        }
        let rollouts = sample_group(&dist, spec, cfg.group_size, epoch, derive_seed(cfg.seed, &[epoch as u64, 0]))?;
        let executed: Vec<(ExecutionStatus, f64)> = rollouts
            .iter()
            .enumerate()
            .map(|(j, r)| {
                let (status, reward) = execution_reward(&r.idea, spec, derive_seed(cfg.seed, &[epoch as u64, 1, j as u64]));
                (status, reward.value)
            })
            .collect();
        let prev_texts: Vec<&str> = prev.iter().map(|r| r.idea.idea_text.as_str()).collect();
        let shaped: Vec<f64> = rollouts
            .iter()
            .zip(&executed)
            .map(|(r, (_, base))| shaped_reward(*base, &r.idea, &prev_texts, &cfg.shaping))
            .collect();

        let epoch_trajs: Vec<Trajectory> = rollouts
            .iter()
            .zip(&executed)
            .map(|(r, (status, reward))| {
                Trajectory::new(r.idea.clone(), epoch, *status, Default::default(), *reward, String::new())
            })
            .collect();
        let (top, bottom) = thinking_stratified_execution(&epoch_trajs, 0.3).unwrap_or((f64::NAN, f64::NAN));
        let texts: Vec<Vec<&str>> = vec![rollouts.iter().map(|r| r.idea.idea_text.as_str()).collect()];
        dynamics.push(EpochDynamics {
            epoch,
            avg_reward: mean(executed.iter().map(|e| e.1)),
            max_reward: executed.iter().map(|e| e.1).fold(0.0, f64::max),
            avg_shaped_reward: mean(shaped.iter().copied()),
            expected_reward: spec.policy_expected_reward(&probs),
            avg_thinking_len: mean(rollouts.iter().map(|r| r.idea.thinking_len as f64)),
            avg_idea_len: mean(rollouts.iter().map(|r| r.idea.idea_len() as f64)),
            execution_rate_top30_thinking: top,
            execution_rate_bottom30_thinking: bottom,
            converged_idea_count: keyword_convergence(&texts, &patterns)[0],
            group_size: cfg.group_size,
        });

        policy = match cfg.gradient {
            GradientMode::Sampled => {
                let adv = group_normalized_advantages(&shaped, cfg.advantage_eps, cfg.normalize_by_std);
                let actions: Vec<usize> = rollouts.iter().map(|r| r.index).collect();
                policy_update(&policy, &actions, &adv, &old, cfg)
            }
            GradientMode::Exact => exact_update(&policy, spec, cfg.learning_rate),
        };
        trajectories.extend(epoch_trajs);
        prev = rollouts;
    }
    Ok(RlRun {
        dynamics,
        policy,
        trajectories,
    })
}
