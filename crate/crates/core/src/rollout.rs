//! Group sampling under the frozen behavior policy and group-relative
//! advantages.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::policy::{PolicyError, PolicyParams, Trajectory};
use crate::seeding::{self, stream};
use crate::tasks::{TaskSpec, Token};

/// Added to the population standard deviation before dividing.
pub const ADVANTAGE_DELTA: f64 = 1e-6;

/// One query with its `G` sampled responses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub prompt_index: usize,
    pub prompt_tokens: Vec<Token>,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    /// One advantage per trajectory, shared by all of its tokens.
    pub advantages: Vec<f64>,
}

impl Group {
    /// Builds a group from already-rewarded trajectories.
    pub fn from_trajectories(prompt_index: usize, trajectories: Vec<Trajectory>) -> Self {
        let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward).collect();
        let advantages = compute_advantages(&rewards);
        Self {
            prompt_index,
            prompt_tokens: trajectories
                .first()
                .map(|t| t.prompt_tokens.clone())
                .unwrap_or_default(),
            trajectories,
            rewards,
            advantages,
        }
    }

    pub fn size(&self) -> usize {
        self.trajectories.len()
    }

    /// Overrides rewards (and recomputes advantages).
    pub fn with_rewards(mut self, rewards: &[f64]) -> Self {
        assert_eq!(rewards.len(), self.trajectories.len());
        for (t, &r) in self.trajectories.iter_mut().zip(rewards) {
            t.reward = r;
        }
        self.rewards = rewards.to_vec();
        self.advantages = compute_advantages(rewards);
        self
    }

    /// Both reward strata are non-empty.
    pub fn is_mixed(&self) -> bool {
        self.rewards.iter().any(|&r| r != self.rewards[0])
    }

    pub fn total_response_tokens(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }
}

/// `(r_i - mean) / (std + δ)` with the population standard deviation; a group
/// whose rewards are all equal gets exact zeros.
pub fn compute_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len();
    if n == 0 || rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; n];
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
    let denom = var.sqrt() + ADVANTAGE_DELTA;
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RolloutError {
    #[error("group size must be at least 2, got {0}")]
    GroupTooSmall(usize),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSettings {
    pub group_size: usize,
    pub temperature: f64,
    pub max_len: usize,
}

/// Seed of response `response_index` for prompt `prompt_index`.
pub fn response_seed(seed: u64, prompt_index: usize, response_index: usize) -> u64 {
    seeding::derive(&[seed, stream::RESPONSE, prompt_index as u64, response_index as u64])
}

/// Samples `G` responses at the deepest exit of `params_old` and scores them.
pub fn collect_group(
    params_old: &PolicyParams,
    task: &TaskSpec,
    prompt: &[Token],
    prompt_index: usize,
    settings: RolloutSettings,
    seed: u64,
) -> Result<Group, RolloutError> {
    let mut groups = collect_chunk(params_old, task, &[prompt.to_vec()], prompt_index, settings, seed)?;
    Ok(groups.remove(0))
}

/// All `B·G` samples of a chunk go through one batched sampler call.
fn collect_chunk(
    params_old: &PolicyParams,
    task: &TaskSpec,
    prompts: &[Vec<Token>],
    first_prompt_index: usize,
    settings: RolloutSettings,
    seed: u64,
) -> Result<Vec<Group>, RolloutError> {
    let g = settings.group_size;
    if g < 2 {
        return Err(RolloutError::GroupTooSmall(g));
    }
    let mut inputs: Vec<&[Token]> = Vec::with_capacity(prompts.len() * g);
    let mut seeds = Vec::with_capacity(prompts.len() * g);
    for (k, p) in prompts.iter().enumerate() {
        for i in 0..g {
            inputs.push(p);
            seeds.push(response_seed(seed, first_prompt_index + k, i));
        }
    }
    let mut trajectories = params_old.generate(
        &inputs,
        &seeds,
        settings.temperature,
        settings.max_len,
        params_old.config().deepest_exit(),
    )?;
    for t in &mut trajectories {
        t.reward = task.verify(&t.prompt_tokens, &t.response_tokens);
    }
    let mut groups = Vec::with_capacity(prompts.len());
    let mut rest = trajectories.into_iter();
    for k in 0..prompts.len() {
        let members: Vec<Trajectory> = rest.by_ref().take(g).collect();
        groups.push(Group::from_trajectories(first_prompt_index + k, members));
    }
    Ok(groups)
}

/// Collects one group per prompt. Prompts are split into one contiguous chunk
/// per thread of the current rayon pool; sampling is row-independent, so the
/// result does not depend on the pool size.
pub fn collect_groups(
    params_old: &PolicyParams,
    task: &TaskSpec,
    prompts: &[Vec<Token>],
    first_prompt_index: usize,
    settings: RolloutSettings,
    seed: u64,
) -> Result<Vec<Group>, RolloutError> {
    if prompts.is_empty() {
        return Ok(Vec::new());
    }
    let chunk = prompts.len().div_ceil(rayon::current_num_threads().max(1));
    let parts: Vec<Vec<Group>> = prompts
        .par_chunks(chunk)
        .enumerate()
        .map(|(c, ps)| collect_chunk(params_old, task, ps, first_prompt_index + c * chunk, settings, seed))
        .collect::<Result<_, _>>()?;
    Ok(parts.into_iter().flatten().collect())
}
