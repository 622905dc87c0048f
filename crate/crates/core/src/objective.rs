//! Clipped importance-weighted surrogate with KL regularization, evaluated
//! either on a binary (positive, negative) selection with prefix masks or on
//! the full group.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Tape, Tensor};
use crate::policy::{BoundParams, ParamGrads, PolicyError, PolicyParams};
use crate::rollout::Group;
use crate::seeding::{self, stream};
use crate::tasks::Token;

/// Log-ratios are clamped to this magnitude before exponentiation.
pub const LOG_RATIO_CLAMP: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixSpec {
    Absolute(usize),
    /// Fraction of the response length, rounded up.
    Fraction(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    #[default]
    Random,
    ExtremeAdvantage,
    MedianLength,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    #[default]
    Exact,
    K3Estimator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub epsilon: f64,
    pub beta: f64,
    pub prefix_spec: PrefixSpec,
    pub selection_strategy: SelectionStrategy,
    pub kl_mode: KlMode,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            beta: 0.01,
            prefix_spec: PrefixSpec::Fraction(0.5),
            selection_strategy: SelectionStrategy::Random,
            kl_mode: KlMode::Exact,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |m: String| Err(ObjectiveError::InvalidConfig(m));
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon must be in (0, 1), got {}", self.epsilon));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        match self.prefix_spec {
            PrefixSpec::Absolute(0) => bad("absolute prefix must be >= 1".into()),
            PrefixSpec::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                bad(format!("prefix fraction must be in (0, 1], got {f}"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error("invalid objective config: {0}")]
    InvalidConfig(String),
    #[error("invalid selection: {0}")]
    InvalidSelection(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

impl From<crate::numerics::NumericsError> for ObjectiveError {
    fn from(e: crate::numerics::NumericsError) -> Self {
        ObjectiveError::Policy(e.into())
    }
}

/// Ones on the first `min(n, len)` positions.
pub fn make_prefix_mask(response_len: usize, spec: PrefixSpec) -> Vec<u8> {
    let n = prefix_len(response_len, spec);
    (0..response_len).map(|t| u8::from(t < n)).collect()
}

fn prefix_len(response_len: usize, spec: PrefixSpec) -> usize {
    let n = match spec {
        PrefixSpec::Absolute(n) => n,
        PrefixSpec::Fraction(f) => {
            // Guard against 0.3 * 10 = 3.0000000000000004 rounding up to 4.
            let x = f * response_len as f64;
            (x - 1e-9 * x.max(1.0)).ceil() as usize
        }
    };
    n.clamp(1, response_len.max(1)).min(response_len)
}

/// Responses entering the loss and their per-token masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub members: Vec<usize>,
    pub masks: Vec<Vec<u8>>,
}

impl Selection {
    /// Every response with an all-ones mask.
    pub fn full(group: &Group) -> Self {
        Self {
            members: (0..group.size()).collect(),
            masks: group.trajectories.iter().map(|t| vec![1; t.len()]).collect(),
        }
    }

    /// Every response with masks built from `spec`.
    pub fn all_with_prefix(group: &Group, spec: PrefixSpec) -> Self {
        Self {
            members: (0..group.size()).collect(),
            masks: group
                .trajectories
                .iter()
                .map(|t| make_prefix_mask(t.len(), spec))
                .collect(),
        }
    }

    pub fn token_count(&self) -> usize {
        self.masks
            .iter()
            .map(|m| m.iter().map(|&b| b as usize).sum::<usize>())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryPair {
    pub positive_index: usize,
    pub negative_index: usize,
    pub positive_mask: Vec<u8>,
    pub negative_mask: Vec<u8>,
}

impl BinaryPair {
    pub fn selection(&self) -> Selection {
        Selection {
            members: vec![self.positive_index, self.negative_index],
            masks: vec![self.positive_mask.clone(), self.negative_mask.clone()],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Selected {
    Pair(BinaryPair),
    /// One of the reward strata is empty.
    GroupSkipped,
}

impl Selected {
    pub fn pair(self) -> Option<BinaryPair> {
        match self {
            Selected::Pair(p) => Some(p),
            Selected::GroupSkipped => None,
        }
    }
}

/// Picks one positive (reward 1) and one negative (reward 0) response.
pub fn select_binary(
    group: &Group,
    strategy: SelectionStrategy,
    prefix: PrefixSpec,
    seed: u64,
) -> Selected {
    let pos: Vec<usize> = (0..group.size()).filter(|&i| group.rewards[i] == 1.0).collect();
    let neg: Vec<usize> = (0..group.size()).filter(|&i| group.rewards[i] == 0.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Selected::GroupSkipped;
    }
    let (p, n) = match strategy {
        SelectionStrategy::Random => {
            let mut rng = seeding::rng(&[seed, stream::SELECT, group.prompt_index as u64]);
            let p = pos[rng.gen_range(0..pos.len())];
            let n = neg[rng.gen_range(0..neg.len())];
            (p, n)
        }
        SelectionStrategy::ExtremeAdvantage => {
            let a = &group.advantages;
            let p = pos.iter().copied().fold(pos[0], |b, i| if a[i] > a[b] { i } else { b });
            let n = neg.iter().copied().fold(neg[0], |b, i| if a[i] < a[b] { i } else { b });
            (p, n)
        }
        SelectionStrategy::MedianLength => {
            let median = |idx: &[usize]| {
                let mut v: Vec<(usize, usize)> = idx
                    .iter()
                    .map(|&i| (group.trajectories[i].len(), i))
                    .collect();
                v.sort_unstable();
                v[(v.len() - 1) / 2].1
            };
            (median(&pos), median(&neg))
        }
    };
    Selected::Pair(BinaryPair {
        positive_index: p,
        negative_index: n,
        positive_mask: make_prefix_mask(group.trajectories[p].len(), prefix),
        negative_mask: make_prefix_mask(group.trajectories[n].len(), prefix),
    })
}

/// `Σ_v p(v) (log p(v) − log q(v))` from log-probabilities.
pub fn categorical_kl(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| if lp == f64::NEG_INFINITY { 0.0 } else { lp.exp() * (lp - lq) })
        .sum()
}

/// `exp(d) − d − 1` with `d = log π_ref − log π_θ` at the realized token.
pub fn k3_estimate(logp_theta: f64, logp_ref: f64) -> f64 {
    let d = logp_ref - logp_theta;
    d.exp() - d - 1.0
}

/// Per-position KL between the policy and the reference at the deepest exit.
/// `realized` is required by the estimator mode.
pub fn token_kl(
    theta: &PolicyParams,
    reference: &PolicyParams,
    context: &[Token],
    mode: KlMode,
    realized: Option<Token>,
) -> Result<f64, ObjectiveError> {
    let exit = theta.config().deepest_exit();
    let lp = theta.next_token_logprobs(&[context], exit)?.remove(0);
    let lq = reference.next_token_logprobs(&[context], exit)?.remove(0);
    match mode {
        KlMode::Exact => Ok(categorical_kl(&lp, &lq)),
        KlMode::K3Estimator => {
            let tok = realized.ok_or_else(|| {
                ObjectiveError::InvalidSelection("estimator KL needs a realized token".into())
            })?;
            if tok >= lp.len() {
                return Err(PolicyError::TokenOutOfVocab(tok).into());
            }
            Ok(k3_estimate(lp[tok], lq[tok]))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub loss: f64,
    pub ratio_mean: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub clip_fraction: f64,
    pub kl: f64,
    pub grad_token_count: usize,
    /// Set when some log-ratio hit the ±20 clamp.
    pub log_ratio_clamped: bool,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub stats: LossStats,
    pub grads: Option<ParamGrads>,
}

/// Flattened token layout of a batch of selections.
struct Layout {
    inputs: Vec<Vec<Token>>,
    /// Row within the stacked backbone output, per masked-range token.
    rows: Vec<usize>,
    targets: Vec<Token>,
    old_logprobs: Vec<f64>,
    advantages: Vec<f64>,
    weights: Vec<f64>,
    masked: Vec<bool>,
}

fn layout(items: &[(&Group, &Selection)]) -> Result<Layout, ObjectiveError> {
    let mut l = Layout {
        inputs: Vec::new(),
        rows: Vec::new(),
        targets: Vec::new(),
        old_logprobs: Vec::new(),
        advantages: Vec::new(),
        weights: Vec::new(),
        masked: Vec::new(),
    };
    let group_weight = 1.0 / items.len() as f64;
    let mut offset = 0;
    for (group, sel) in items {
        if sel.members.len() != sel.masks.len() || sel.members.is_empty() {
            return Err(ObjectiveError::InvalidSelection(
                "one mask per member required".into(),
            ));
        }
        let outer = group_weight / sel.members.len() as f64;
        for (&i, mask) in sel.members.iter().zip(&sel.masks) {
            let traj = group.trajectories.get(i).ok_or_else(|| {
                ObjectiveError::InvalidSelection(format!("member {i} outside group"))
            })?;
            if mask.len() != traj.len() || traj.behavior_logprobs.len() != traj.len() {
                return Err(ObjectiveError::InvalidSelection(format!(
                    "member {i}: mask/logprob length does not match response"
                )));
            }
            let total: usize = mask.iter().map(|&b| b as usize).sum();
            if total == 0 {
                return Err(ObjectiveError::InvalidSelection(format!(
                    "member {i} has an empty mask"
                )));
            }
            // Positions after the last masked token never reach the loss, and
            // causality lets us drop them from the input entirely.
            let n = mask.iter().rposition(|&b| b == 1).unwrap() + 1;
            let p = traj.prompt_tokens.len();
            let mut input = traj.prompt_tokens.clone();
            input.extend_from_slice(&traj.response_tokens[..n - 1]);
            for t in 0..n {
                l.rows.push(offset + p - 1 + t);
                l.targets.push(traj.response_tokens[t]);
                l.old_logprobs.push(traj.behavior_logprobs[t]);
                l.advantages.push(group.advantages[i]);
                l.weights.push(mask[t] as f64 * outer / total as f64);
                l.masked.push(mask[t] == 1);
            }
            offset += input.len();
            l.inputs.push(input);
        }
    }
    Ok(l)
}

fn reference_logprobs(
    reference: &PolicyParams,
    inputs: &[&[Token]],
    rows: &[usize],
) -> Result<Tensor, ObjectiveError> {
    let exit = reference.config().deepest_exit();
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, reference, false);
    let hidden = reference.backbone(&mut tape, &bound, inputs, exit)?;
    let h = tape.embedding(hidden.states[exit - 1], rows)?;
    let logits = reference.head_logits(&mut tape, &bound, h, exit)?;
    let lp = tape.log_softmax(logits)?;
    Ok(tape.value(lp)?.clone())
}

/// Loss over several groups, each with its own selection; groups are weighted
/// equally and members within a group by `1/|S|`.
pub fn batch_loss(
    theta: &PolicyParams,
    items: &[(&Group, &Selection)],
    reference: &PolicyParams,
    cfg: &ObjectiveConfig,
    want_grads: bool,
) -> Result<LossOutput, ObjectiveError> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(ObjectiveError::InvalidSelection("no groups".into()));
    }
    if theta.config() != reference.config() {
        return Err(ObjectiveError::InvalidConfig(
            "policy and reference configs differ".into(),
        ));
    }
    let l = layout(items)?;
    let exit = theta.config().deepest_exit();
    let inputs: Vec<&[Token]> = l.inputs.iter().map(Vec::as_slice).collect();

    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, theta, want_grads);
    let hidden = theta.backbone(&mut tape, &bound, &inputs, exit)?;
    let h = tape.embedding(hidden.states[exit - 1], &l.rows)?;
    let logits = theta.head_logits(&mut tape, &bound, h, exit)?;
    let lp_all = tape.log_softmax(logits)?;
    let logp = tape.gather_cols(lp_all, &l.targets)?;

    let eps = cfg.epsilon;
    let surrogate = {
        let old = &l.old_logprobs;
        let adv = &l.advantages;
        tape.map(logp, |t, x| {
            let lr = x - old[t];
            let r = lr.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP).exp();
            let a = adv[t];
            let unclipped = r * a;
            let clipped = r.clamp(1.0 - eps, 1.0 + eps) * a;
            if clipped < unclipped {
                (clipped, 0.0)
            } else if lr.abs() > LOG_RATIO_CLAMP {
                (unclipped, 0.0)
            } else {
                (unclipped, unclipped)
            }
        })?
    };

    // Stats from the current values.
    let lp_vals = tape.value(logp)?.data().to_vec();
    let mut ratio_sum = 0.0;
    let mut ratio_min = f64::INFINITY;
    let mut ratio_max = f64::NEG_INFINITY;
    let mut clipped_count = 0usize;
    let mut masked_count = 0usize;
    let mut clamped = false;
    for t in 0..lp_vals.len() {
        let lr = lp_vals[t] - l.old_logprobs[t];
        if !l.masked[t] {
            continue;
        }
        if lr.abs() > LOG_RATIO_CLAMP {
            clamped = true;
        }
        let r = lr.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP).exp();
        let a = l.advantages[t];
        if r.clamp(1.0 - eps, 1.0 + eps) * a < r * a {
            clipped_count += 1;
        }
        ratio_sum += r;
        ratio_min = ratio_min.min(r);
        ratio_max = ratio_max.max(r);
        masked_count += 1;
    }

    let mut kl_value = 0.0;
    let objective = if cfg.beta > 0.0 {
        let ref_lp = reference_logprobs(reference, &inputs, &l.rows)?;
        let kl = match cfg.kl_mode {
            KlMode::Exact => {
                let q = tape.constant(ref_lp);
                let p = tape.exp(lp_all)?;
                let diff = tape.sub(lp_all, q)?;
                let prod = tape.mul(p, diff)?;
                tape.row_sum(prod)?
            }
            KlMode::K3Estimator => {
                let ref_tok: Vec<f64> = l
                    .targets
                    .iter()
                    .enumerate()
                    .map(|(t, &v)| ref_lp.row(t)[v])
                    .collect();
                tape.map(logp, |t, x| {
                    let d = ref_tok[t] - x;
                    (d.exp() - d - 1.0, 1.0 - d.exp())
                })?
            }
        };
        kl_value = tape
            .value(kl)?
            .data()
            .iter()
            .zip(&l.weights)
            .map(|(k, w)| k * w)
            .sum();
        let penalty = tape.scale(kl, cfg.beta)?;
        tape.sub(surrogate, penalty)?
    } else {
        // Diagnostics only; the penalty does not enter the tape.
        let ref_lp = reference_logprobs(reference, &inputs, &l.rows)?;
        let theta_lp = tape.value(lp_all)?;
        for t in 0..l.rows.len() {
            if l.weights[t] == 0.0 {
                continue;
            }
            let k = match cfg.kl_mode {
                KlMode::Exact => categorical_kl(theta_lp.row(t), ref_lp.row(t)),
                KlMode::K3Estimator => k3_estimate(lp_vals[t], ref_lp.row(t)[l.targets[t]]),
            };
            kl_value += k * l.weights[t];
        }
        surrogate
    };
    let neg_w: Vec<f64> = l.weights.iter().map(|w| -w).collect();
    let loss_var = tape.dot_const(objective, &neg_w)?;
    let loss = tape.value(loss_var)?.item().expect("scalar loss");

    let grads = if want_grads {
        let g = tape.backward(loss_var)?;
        Some(bound.grads(&g)?)
    } else {
        None
    };
    let stats = LossStats {
        loss,
        ratio_mean: ratio_sum / masked_count as f64,
        ratio_min,
        ratio_max,
        clip_fraction: clipped_count as f64 / masked_count as f64,
        kl: kl_value,
        grad_token_count: masked_count,
        log_ratio_clamped: clamped,
    };
    Ok(LossOutput { loss, stats, grads })
}

/// Loss of one group under an arbitrary selection.
pub fn selection_loss(
    theta: &PolicyParams,
    group: &Group,
    selection: &Selection,
    reference: &PolicyParams,
    cfg: &ObjectiveConfig,
    want_grads: bool,
) -> Result<LossOutput, ObjectiveError> {
    batch_loss(theta, &[(group, selection)], reference, cfg, want_grads)
}

pub fn bppo_loss(
    theta: &PolicyParams,
    group: &Group,
    pair: &BinaryPair,
    reference: &PolicyParams,
    cfg: &ObjectiveConfig,
) -> Result<LossOutput, ObjectiveError> {
    selection_loss(theta, group, &pair.selection(), reference, cfg, true)
}

pub fn grpo_loss(
    theta: &PolicyParams,
    group: &Group,
    reference: &PolicyParams,
    cfg: &ObjectiveConfig,
) -> Result<LossOutput, ObjectiveError> {
    selection_loss(theta, group, &Selection::full(group), reference, cfg, true)
}
