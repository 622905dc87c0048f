use rayon::prelude::*;

use crate::policy::{PolicyError, PolicyParams};
use crate::seeding::{self, stream};
use crate::tasks::{TaskInstance, TaskSpec, Token};

/// Anything that maps prompts to responses.
pub trait ResponsePolicy: Sync {
    fn respond(&self, prompts: &[&[Token]], max_len: usize) -> Result<Vec<Vec<Token>>, PolicyError>;
}

/// Greedy decoding of one member of the family.
pub struct Greedy<'a> {
    pub params: &'a PolicyParams,
    pub exit_depth: usize,
}

impl ResponsePolicy for Greedy<'_> {
    fn respond(&self, prompts: &[&[Token]], max_len: usize) -> Result<Vec<Vec<Token>>, PolicyError> {
        let seeds = vec![0; prompts.len()];
        Ok(self
            .params
            .generate(prompts, &seeds, 0.0, max_len, self.exit_depth)?
            .into_iter()
            .map(|t| t.response_tokens)
            .collect())
    }
}

impl ResponsePolicy for PolicyParams {
    fn respond(&self, prompts: &[&[Token]], max_len: usize) -> Result<Vec<Vec<Token>>, PolicyError> {
        Greedy {
            params: self,
            exit_depth: self.config().deepest_exit(),
        }
        .respond(prompts, max_len)
    }
}

/// The `n` held-out instances used by [`evaluate`].
pub fn eval_instances(task: &TaskSpec, n: usize, seed: u64) -> Vec<TaskInstance> {
    (0..n)
        .map(|i| {
            task.generate(seeding::derive(&[seed, stream::EVAL, i as u64]))
                .expect("validated task")
        })
        .collect()
}

/// Exact-match accuracy over `n` instances, decoded with up to
/// `max_answer_len` tokens. Work is split into one chunk per pool thread.
pub fn evaluate_policy(
    policy: &impl ResponsePolicy,
    task: &TaskSpec,
    n: usize,
    seed: u64,
) -> Result<f64, PolicyError> {
    task.validate()
        .map_err(|e| PolicyError::InvalidConfig(e.to_string()))?;
    if n == 0 {
        return Ok(0.0);
    }
    let instances = eval_instances(task, n, seed);
    let max_len = task.max_answer_len();
    let chunk = n.div_ceil(rayon::current_num_threads().max(1));
    let hits: Vec<usize> = instances
        .par_chunks(chunk)
        .map(|part| -> Result<usize, PolicyError> {
            let prompts: Vec<&[Token]> = part.iter().map(|i| i.prompt_tokens.as_slice()).collect();
            let responses = policy.respond(&prompts, max_len)?;
            Ok(part
                .iter()
                .zip(&responses)
                .filter(|(inst, r)| task.verify(&inst.prompt_tokens, r) == 1.0)
                .count())
        })
        .collect::<Result<_, _>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / n as f64)
}

/// Greedy accuracy of the deepest member.
pub fn evaluate(params: &PolicyParams, task: &TaskSpec, n: usize, seed: u64) -> Result<f64, PolicyError> {
    evaluate_policy(params, task, n, seed)
}
