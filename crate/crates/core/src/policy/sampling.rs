use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PolicyError, PolicyParams};
use crate::tasks::{Token, EOS};

/// One sampled response together with the behavior log-probabilities that
/// produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_tokens: Vec<Token>,
    pub response_tokens: Vec<Token>,
    /// Untempered `log π_old(o_t | q, o_<t)` per response token.
    pub behavior_logprobs: Vec<f64>,
    pub reward: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.response_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response_tokens.is_empty()
    }
}

/// Draws a token from `logits / temperature`. Temperature 0 is argmax with
/// the lowest index winning ties.
pub fn sample_from_logits(logits: &[f64], temperature: f64, rng: &mut impl Rng) -> Token {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
        }
        acc += w;
        if u < acc {
            return i;
        }
    }
    last_positive
}

impl PolicyParams {
    /// Samples one response per prompt. Sample `i` draws from its own stream
    /// seeded by `seeds[i]`, so results do not depend on batch composition.
    /// Generation stops at EOS or after `max_len` tokens.
    pub fn generate(
        &self,
        prompts: &[&[Token]],
        seeds: &[u64],
        temperature: f64,
        max_len: usize,
        exit_depth: usize,
    ) -> Result<Vec<Trajectory>, PolicyError> {
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(PolicyError::InvalidConfig(format!(
                "temperature must be >= 0, got {temperature}"
            )));
        }
        assert_eq!(prompts.len(), seeds.len());
        self.config().exit_index(exit_depth)?;
        let context = self.config().context_len;
        let mut limits = Vec::with_capacity(prompts.len());
        for p in prompts {
            self.check_sequence(p)?;
            if p.len() > context || max_len == 0 {
                return Err(PolicyError::ContextOverflow {
                    len: p.len() + 1,
                    context,
                });
            }
            // Predicting response token t feeds prompt + t tokens.
            limits.push(max_len.min(context + 1 - p.len()));
        }
        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
        let mut out: Vec<Trajectory> = prompts
            .iter()
            .map(|p| Trajectory {
                prompt_tokens: p.to_vec(),
                response_tokens: Vec::new(),
                behavior_logprobs: Vec::new(),
                reward: 0.0,
            })
            .collect();
        let mut active: Vec<usize> = (0..prompts.len()).collect();
        let mut seq_buf: Vec<Vec<Token>> = prompts.iter().map(|p| p.to_vec()).collect();
        while !active.is_empty() {
            // Identical sequences share one forward row.
            let mut distinct: Vec<usize> = Vec::new();
            let mut row_of: HashMap<&[Token], usize> = HashMap::new();
            let mut rows = Vec::with_capacity(active.len());
            for &i in &active {
                let key = seq_buf[i].as_slice();
                let r = *row_of.entry(key).or_insert_with(|| {
                    distinct.push(i);
                    distinct.len() - 1
                });
                rows.push(r);
            }
            let inputs: Vec<&[Token]> = distinct.iter().map(|&i| seq_buf[i].as_slice()).collect();
            let logprobs = self.next_token_logprobs(&inputs, exit_depth)?;
            let mut still = Vec::with_capacity(active.len());
            for (&i, &r) in active.iter().zip(&rows) {
                let lp = &logprobs[r];
                let tok = sample_from_logits(lp, temperature, &mut rngs[i]);
                out[i].response_tokens.push(tok);
                out[i].behavior_logprobs.push(lp[tok]);
                if tok != EOS && out[i].response_tokens.len() < limits[i] {
                    still.push(i);
                }
            }
            for &i in &still {
                let tok = *out[i].response_tokens.last().unwrap();
                seq_buf[i].push(tok);
            }
            active = still;
        }
        Ok(out)
    }

    /// Single-response sampler at `exit_depth`.
    pub fn sample_response(
        &self,
        prompt: &[Token],
        temperature: f64,
        max_len: usize,
        seed: u64,
        exit_depth: usize,
    ) -> Result<Trajectory, PolicyError> {
        Ok(self
            .generate(&[prompt], &[seed], temperature, max_len, exit_depth)?
            .pop()
            .expect("one prompt in, one trajectory out"))
    }
}
