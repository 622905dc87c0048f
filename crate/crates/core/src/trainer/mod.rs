//! Supervised warmup, the RL outer loop and run-directory output.

mod adam;
mod eval;
mod rundir;

pub use adam::{AdamConfig, AdamState};
pub use eval::{eval_instances, evaluate, evaluate_policy, Greedy, ResponsePolicy};
pub use rundir::{read_metrics, read_timings, RunDir, RunManifest, RunSummary, ARTIFACT_VERSION};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, Tape};
use crate::objective::{
    batch_loss, select_binary, selection_loss, ObjectiveConfig, ObjectiveError, Selected, Selection,
};
use crate::policy::{BoundParams, ParamGrads, PolicyConfig, PolicyError, PolicyParams};
use crate::rollout::{collect_groups, Group, RolloutError, RolloutSettings};
use crate::seeding::{self, stream};
use crate::tasks::{TaskInstance, TaskSpec, Token};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    #[default]
    Grpo,
    Bppo,
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algo::Grpo => "grpo",
            Algo::Bppo => "bppo",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub target_accuracy: f64,
    pub eval_every: usize,
    pub eval_size: usize,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_steps: 10_000,
            target_accuracy: 0.3,
            eval_every: 25,
            eval_size: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algo: Algo,
    pub group_size: usize,
    pub batch_prompts: usize,
    pub steps: usize,
    pub inner_epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub temperature: f64,
    /// Defaults to the task's longest answer.
    pub max_response_len: Option<usize>,
    pub eval_size: usize,
    pub eval_every: usize,
    /// 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    pub objective: ObjectiveConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Grpo,
            group_size: 8,
            batch_prompts: 16,
            steps: 100,
            inner_epochs: 1,
            learning_rate: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            temperature: 1.0,
            max_response_len: None,
            eval_size: 200,
            eval_every: 25,
            checkpoint_every: 0,
            objective: ObjectiveConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Everything a run needs, as read from a config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskSpec,
    pub policy: PolicyConfig,
    pub warmup: WarmupConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        self.task.validate().map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        self.policy.validate().map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        self.train.objective.validate().map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        self.train.adam().validate().map_err(TrainError::InvalidConfig)?;
        AdamConfig::with_lr(self.warmup.learning_rate)
            .validate()
            .map_err(TrainError::InvalidConfig)?;
        let t = &self.train;
        if t.steps == 0 || t.batch_prompts == 0 || t.inner_epochs == 0 {
            return bad("steps, batch_prompts and inner_epochs must be >= 1".into());
        }
        if t.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", t.group_size));
        }
        if !(t.temperature > 0.0 && t.temperature.is_finite()) {
            return bad(format!("temperature must be > 0, got {}", t.temperature));
        }
        if t.max_response_len == Some(0) {
            return bad("max_response_len must be >= 1".into());
        }
        if t.eval_every == 0 || self.warmup.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        if self.warmup.batch_size == 0 || self.warmup.max_steps == 0 {
            return bad("warmup batch_size and max_steps must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.warmup.target_accuracy) {
            return bad("warmup target_accuracy must be in [0, 1]".into());
        }
        let needed = self.task.max_prompt_len() + self.max_response_len();
        if needed > self.policy.context_len + 1 {
            return bad(format!(
                "context_len {} too short for prompts of {} plus responses of {}",
                self.policy.context_len,
                self.task.max_prompt_len(),
                self.max_response_len()
            ));
        }
        Ok(())
    }

    pub fn max_response_len(&self) -> usize {
        self.train.max_response_len.unwrap_or_else(|| self.task.max_answer_len())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("warmup stopped after {steps} steps at best accuracy {best_accuracy:.4}, below target {target:.4}")]
    WarmupFailed {
        best_accuracy: f64,
        target: f64,
        steps: usize,
    },
    #[error("non-finite loss at step {step}: {dump}")]
    NonFinite { step: usize, dump: String },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error("io: {0}")]
    Io(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
}

/// One line of `metrics.jsonl`. Only deterministic quantities live here;
/// wall-clock timings go to `timings.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: usize,
    pub algo: Algo,
    pub mean_reward: f64,
    /// Groups whose rewards are all equal (skipped under BPPO).
    pub frac_groups_skipped: f64,
    pub loss: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub grad_token_count: usize,
    pub eval_accuracy: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepTiming {
    pub step: usize,
    pub sample_ms: f64,
    pub update_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupRecord {
    pub step: usize,
    pub loss: f64,
    pub eval_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct WarmupOutcome {
    pub params: PolicyParams,
    pub accuracy: f64,
    pub steps: usize,
    pub history: Vec<WarmupRecord>,
}

/// Runtime knobs that never change numerical results.
#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub workers: usize,
    pub verbose: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            verbose: false,
        }
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, TrainError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| TrainError::InvalidConfig(format!("thread pool: {e}")))
}

/// Mean token cross-entropy on oracle responses, averaged over all exits.
pub fn warmup_loss(
    params: &PolicyParams,
    instances: &[TaskInstance],
    want_grads: bool,
) -> Result<(f64, Option<ParamGrads>), PolicyError> {
    if instances.is_empty() {
        return Err(PolicyError::EmptyInput);
    }
    let mut inputs: Vec<Vec<Token>> = Vec::with_capacity(instances.len());
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut offset = 0;
    for inst in instances {
        let p = inst.prompt_tokens.len();
        let n = inst.oracle_response.len();
        let mut seq = inst.prompt_tokens.clone();
        seq.extend_from_slice(&inst.oracle_response[..n - 1]);
        for t in 0..n {
            rows.push(offset + p - 1 + t);
            targets.push(inst.oracle_response[t]);
        }
        offset += seq.len();
        inputs.push(seq);
    }
    let cfg = params.config();
    let seqs: Vec<&[Token]> = inputs.iter().map(Vec::as_slice).collect();
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, want_grads);
    let hidden = params.backbone(&mut tape, &bound, &seqs, cfg.deepest_exit())?;
    let weight = -1.0 / (targets.len() * cfg.exit_depths.len()) as f64;
    let weights = vec![weight; targets.len()];
    let mut total = None;
    for &depth in &cfg.exit_depths {
        let h = tape.embedding(hidden.states[depth - 1], &rows)?;
        let logits = params.head_logits(&mut tape, &bound, h, depth)?;
        let lp = tape.log_softmax(logits)?;
        let picked = tape.gather_cols(lp, &targets)?;
        let part = tape.dot_const(picked, &weights)?;
        total = Some(match total {
            None => part,
            Some(acc) => tape.add(acc, part)?,
        });
    }
    let root = total.expect("at least one exit");
    let loss = tape.value(root)?.item().expect("scalar");
    let grads = if want_grads {
        Some(bound.grads(&tape.backward(root)?)?)
    } else {
        None
    };
    Ok((loss, grads))
}

/// Instances of warmup batch `step`.
pub fn warmup_batch(task: &TaskSpec, seed: u64, step: usize, batch: usize) -> Vec<TaskInstance> {
    (0..batch)
        .map(|b| {
            task.generate(seeding::derive(&[seed, stream::WARMUP, step as u64, b as u64]))
                .expect("validated task")
        })
        .collect()
}

/// Cross-entropy training on oracle answers until greedy accuracy reaches the
/// target (checked every `eval_every` steps) or the step cap is hit.
pub fn supervised_warmup(
    cfg: &ExperimentConfig,
    init: PolicyParams,
    opts: RunOptions,
) -> Result<WarmupOutcome, TrainError> {
    cfg.validate()?;
    let w = &cfg.warmup;
    let pool = pool(opts.workers)?;
    let adam_cfg = AdamConfig::with_lr(w.learning_rate);
    let mut adam = AdamState::new(&init);
    let mut params = init;
    let mut history = Vec::new();
    let mut best = 0.0f64;
    for step in 1..=w.max_steps {
        let batch = warmup_batch(&cfg.task, cfg.seed, step, w.batch_size);
        let (loss, grads) = warmup_loss(&params, &batch, true)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                dump: "warmup loss".into(),
            });
        }
        params = adam.update(&params, &grads.expect("requested"), &adam_cfg)?;
        let mut record = WarmupRecord {
            step,
            loss,
            eval_accuracy: None,
        };
        if step % w.eval_every == 0 || step == w.max_steps {
            let acc = pool.install(|| evaluate(&params, &cfg.task, w.eval_size, cfg.seed))?;
            record.eval_accuracy = Some(acc);
            best = best.max(acc);
            if opts.verbose {
                eprintln!("warmup step {step} loss {loss:.4} acc {acc:.3}");
            }
            if acc >= w.target_accuracy {
                history.push(record);
                return Ok(WarmupOutcome {
                    params,
                    accuracy: acc,
                    steps: step,
                    history,
                });
            }
        }
        history.push(record);
    }
    Err(TrainError::WarmupFailed {
        best_accuracy: best,
        target: w.target_accuracy,
        steps: w.max_steps,
    })
}

/// Prompts for RL step `step` (1-based).
pub fn step_prompts(task: &TaskSpec, seed: u64, step: usize, batch: usize) -> Vec<Vec<Token>> {
    (0..batch)
        .map(|b| {
            task.generate(seeding::derive(&[seed, stream::PROMPT, step as u64, b as u64]))
                .expect("validated task")
                .prompt_tokens
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub history: Vec<MetricsRecord>,
    pub timings: Vec<StepTiming>,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
}

fn is_non_finite(e: &ObjectiveError) -> bool {
    matches!(
        e,
        ObjectiveError::Policy(PolicyError::Numerics(NumericsError::NonFinite { .. }))
    )
}

/// The RL loop. `reference` is the frozen KL anchor; `init` is the starting
/// policy (normally the same warmup checkpoint). When `run_dir` is given,
/// metrics, timings and checkpoints are written there as the run progresses.
pub fn train(
    cfg: &ExperimentConfig,
    init: &PolicyParams,
    reference: &PolicyParams,
    opts: RunOptions,
    mut run_dir: Option<&mut RunDir>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if init.config() != reference.config() {
        return Err(TrainError::InvalidConfig(
            "initial and reference policies have different configs".into(),
        ));
    }
    let t = &cfg.train;
    let pool = pool(opts.workers)?;
    let adam_cfg = t.adam();
    let settings = RolloutSettings {
        group_size: t.group_size,
        temperature: t.temperature,
        max_len: cfg.max_response_len(),
    };
    let mut adam = AdamState::new(init);
    let mut theta = init.clone();
    let initial_accuracy = pool.install(|| evaluate(&theta, &cfg.task, t.eval_size, cfg.seed))?;
    let mut history = Vec::with_capacity(t.steps);
    let mut timings = Vec::with_capacity(t.steps);
    let mut final_accuracy = initial_accuracy;

    for step in 1..=t.steps {
        let started = Instant::now();
        let theta_old = theta.clone();
        let prompts = step_prompts(&cfg.task, cfg.seed, step, t.batch_prompts);
        let first_index = (step - 1) * t.batch_prompts;
        let groups = pool.install(|| {
            collect_groups(&theta_old, &cfg.task, &prompts, first_index, settings, cfg.seed)
        })?;
        let sample_ms = started.elapsed().as_secs_f64() * 1e3;

        let updating = Instant::now();
        let degenerate = groups.iter().filter(|g| !g.is_mixed()).count();
        let selections: Vec<Option<Selection>> = groups
            .iter()
            .map(|g| match t.algo {
                Algo::Grpo => Some(Selection::full(g)),
                Algo::Bppo => match select_binary(
                    g,
                    t.objective.selection_strategy,
                    t.objective.prefix_spec,
                    cfg.seed,
                ) {
                    Selected::Pair(p) => Some(p.selection()),
                    Selected::GroupSkipped => None,
                },
            })
            .collect();
        let items: Vec<(&Group, &Selection)> = groups
            .iter()
            .zip(&selections)
            .filter_map(|(g, s)| s.as_ref().map(|s| (g, s)))
            .collect();

        let (mut loss_sum, mut kl_sum, mut clip_sum) = (0.0, 0.0, 0.0);
        let mut grad_tokens = 0;
        let mut epochs = 0;
        if !items.is_empty() {
            for _ in 0..t.inner_epochs {
                let out = match batch_loss(&theta, &items, reference, &t.objective, true) {
                    Ok(o) => o,
                    Err(e) if is_non_finite(&e) => {
                        return Err(non_finite_dump(step, &theta, &items, reference, &t.objective))
                    }
                    Err(e) => return Err(e.into()),
                };
                if !out.loss.is_finite() {
                    return Err(non_finite_dump(step, &theta, &items, reference, &t.objective));
                }
                loss_sum += out.loss;
                kl_sum += out.stats.kl;
                clip_sum += out.stats.clip_fraction;
                grad_tokens = out.stats.grad_token_count;
                epochs += 1;
                let grads = out.grads.expect("requested");
                // A zero gradient is a zero update: moments and step count
                // stay as they are.
                if !grads.is_all_zero() {
                    theta = adam.update(&theta, &grads, &adam_cfg)?;
                }
            }
        }
        let update_ms = updating.elapsed().as_secs_f64() * 1e3;

        let eval_accuracy = if step % t.eval_every == 0 || step == t.steps {
            let acc = pool.install(|| evaluate(&theta, &cfg.task, t.eval_size, cfg.seed))?;
            final_accuracy = acc;
            Some(acc)
        } else {
            None
        };
        let n_samples = groups.len() * t.group_size;
        let mean = |x: f64| if epochs == 0 { 0.0 } else { x / epochs as f64 };
        let record = MetricsRecord {
            step,
            algo: t.algo,
            mean_reward: groups.iter().flat_map(|g| &g.rewards).sum::<f64>() / n_samples as f64,
            frac_groups_skipped: degenerate as f64 / groups.len() as f64,
            loss: mean(loss_sum),
            kl: mean(kl_sum),
            clip_fraction: mean(clip_sum),
            grad_token_count: grad_tokens,
            eval_accuracy,
            seed: cfg.seed,
        };
        let timing = StepTiming {
            step,
            sample_ms,
            update_ms,
        };
        if opts.verbose {
            eprintln!(
                "step {step} reward {:.3} loss {:.4} tokens {} acc {}",
                record.mean_reward,
                record.loss,
                record.grad_token_count,
                eval_accuracy.map_or("-".into(), |a| format!("{a:.3}"))
            );
        }
        if let Some(dir) = run_dir.as_deref_mut() {
            dir.append_step(&record, &timing)?;
            if t.checkpoint_every > 0 && step % t.checkpoint_every == 0 {
                dir.save_step_checkpoint(step, &theta)?;
            }
        }
        history.push(record);
        timings.push(timing);
    }
    if let Some(dir) = run_dir {
        dir.save_final(&theta)?;
        dir.write_summary(&RunSummary {
            algo: t.algo,
            seed: cfg.seed,
            steps: t.steps,
            initial_accuracy,
            final_accuracy,
        })?;
    }
    Ok(TrainOutcome {
        params: theta,
        history,
        timings,
        initial_accuracy,
        final_accuracy,
    })
}

/// Finds the first group whose own loss is non-finite and serializes it.
fn non_finite_dump(
    step: usize,
    theta: &PolicyParams,
    items: &[(&Group, &Selection)],
    reference: &PolicyParams,
    cfg: &ObjectiveConfig,
) -> TrainError {
    let culprit = items.iter().find(|(g, s)| {
        !matches!(selection_loss(theta, g, s, reference, cfg, false), Ok(o) if o.loss.is_finite())
    });
    let dump = match culprit {
        Some((g, s)) => serde_json::json!({ "group": g, "selection": s }).to_string(),
        None => "batch loss non-finite, no single group reproduces it".into(),
    };
    TrainError::NonFinite { step, dump }
}
