use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::policy::PolicyParams;
use crate::seeding::{self, stream};
use crate::tasks::{TaskInstance, TaskSpec, EOS};

/// Samples one response (temperature 1, deepest exit), freezes its first
/// `prefix_len` tokens and resamples `k` suffixes. Returns the fraction of
/// suffixes whose reward equals the majority reward. A frozen prefix that
/// already covers the whole response leaves no freedom and scores 1.
pub fn prefix_commitment(
    params: &PolicyParams,
    task: &TaskSpec,
    instance: &TaskInstance,
    prefix_len: usize,
    k: usize,
    seed: u64,
) -> Result<f64, AnalysisError> {
    if k < 2 {
        return Err(AnalysisError::InvalidInput(format!("K must be at least 2, got {k}")));
    }
    let depth = params.config().deepest_exit();
    let max_len = task.max_answer_len();
    let prompt = &instance.prompt_tokens;
    let base = params.sample_response(prompt, 1.0, max_len, seeding::derive(&[seed, stream::ANALYSIS, 10]), depth)?;
    let frozen = &base.response_tokens[..prefix_len.min(base.len())];
    if prefix_len >= base.len() || frozen.last() == Some(&EOS) {
        return Ok(1.0);
    }
    let mut context = prompt.clone();
    context.extend_from_slice(frozen);
    let inputs = vec![context.as_slice(); k];
    let seeds: Vec<u64> = (0..k)
        .map(|i| seeding::derive(&[seed, stream::ANALYSIS, 11, prefix_len as u64, i as u64]))
        .collect();
    let suffixes = params.generate(&inputs, &seeds, 1.0, max_len - frozen.len(), depth)?;
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for s in &suffixes {
        let mut response = frozen.to_vec();
        response.extend_from_slice(&s.response_tokens);
        *counts.entry(task.verify(prompt, &response).to_bits()).or_default() += 1;
    }
    let majority = counts.values().copied().max().unwrap_or(0);
    Ok(majority as f64 / k as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommitmentPoint {
    pub prefix_len: usize,
    pub mean_score: f64,
    pub instances: usize,
}

/// Mean commitment over `instances` at each prefix length. Instance `i`
/// reuses the same base response at every prefix length.
pub fn commitment_curve(
    params: &PolicyParams,
    task: &TaskSpec,
    instances: &[TaskInstance],
    prefix_lens: &[usize],
    k: usize,
    seed: u64,
) -> Result<Vec<CommitmentPoint>, AnalysisError> {
    use rayon::prelude::*;
    if instances.is_empty() {
        return Err(AnalysisError::InvalidInput("no instances".into()));
    }
    prefix_lens
        .iter()
        .map(|&len| {
            let scores: Vec<f64> = instances
                .par_iter()
                .enumerate()
                .map(|(i, inst)| {
                    prefix_commitment(params, task, inst, len, k, seeding::derive(&[seed, i as u64]))
                })
                .collect::<Result<_, _>>()?;
            Ok(CommitmentPoint {
                prefix_len: len,
                mean_score: scores.iter().sum::<f64>() / scores.len() as f64,
                instances: scores.len(),
            })
        })
        .collect()
}
