use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::numerics::Tensor;
use crate::objective::{
    make_prefix_mask, selection_loss, ObjectiveConfig, PrefixSpec, Selection,
};
use crate::policy::{ParamGrads, PolicyConfig, PolicyParams};
use crate::rollout::{collect_group, Group, RolloutSettings};
use crate::seeding::{self, stream};
use crate::tasks::{TaskInstance, TaskSpec, Token};
use crate::trainer::{warmup_batch, warmup_loss};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Warmup,
    Grpo,
    Bppo,
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Fourth-order central difference of `f` at `x` with step `h`.
/// Symmetric pairs are differenced first so a flat direction gives exactly 0.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    let d1 = f(x + h) - f(x - h);
    let d2 = f(x + 2.0 * h) - f(x - 2.0 * h);
    (8.0 * d1 - d2) / (12.0 * h)
}

/// A fully seeded loss evaluation point.
#[derive(Clone, Debug)]
pub struct FdScenario {
    pub kind: LossKind,
    pub theta: PolicyParams,
    pub reference: PolicyParams,
    pub objective: ObjectiveConfig,
    pub group: Option<Group>,
    pub selection: Option<Selection>,
    pub instances: Vec<TaskInstance>,
}

/// Default difference step. Balances fourth-order truncation against
/// roundoff for losses of order one.
pub const DEFAULT_FD_STEP: f64 = 5e-4;

const SCENARIO_SCALE: f64 = 0.1;
const STEP_SCALE: f64 = 0.005;
/// Minimum distance in log space between a masked token's log-ratio and
/// `ln(1 ± ε)` in RL scenarios.
pub const KINK_MARGIN: f64 = 0.02;

/// `log π_θ − log π_old` of every masked token of the selection.
fn log_ratios(theta: &PolicyParams, group: &Group, sel: &Selection) -> Result<Vec<f64>, AnalysisError> {
    let mut contexts: Vec<Vec<Token>> = Vec::new();
    let mut wanted = Vec::new();
    for (&i, mask) in sel.members.iter().zip(&sel.masks) {
        let t = &group.trajectories[i];
        for (k, &m) in mask.iter().enumerate() {
            if m == 1 {
                let mut ctx = t.prompt_tokens.clone();
                ctx.extend_from_slice(&t.response_tokens[..k]);
                contexts.push(ctx);
                wanted.push((t.response_tokens[k], t.behavior_logprobs[k]));
            }
        }
    }
    let refs: Vec<&[Token]> = contexts.iter().map(Vec::as_slice).collect();
    let lp = theta.next_token_logprobs(&refs, theta.config().deepest_exit())?;
    Ok(lp.iter().zip(wanted).map(|(row, (tok, old))| row[tok] - old).collect())
}

fn jitter(p: &PolicyParams, seed: u64, scale: f64) -> Result<PolicyParams, AnalysisError> {
    use rand_distr::{Distribution, Normal};
    let mut rng = seeding::rng(&[seed, stream::ANALYSIS, 1]);
    let normal = Normal::new(0.0, scale).map_err(|e| AnalysisError::InvalidInput(e.to_string()))?;
    let tensors = p
        .tensors()
        .iter()
        .map(|t| {
            let data = t.data().iter().map(|v| v + normal.sample(&mut rng)).collect();
            Tensor::new(t.shape().to_vec(), data)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PolicyParams::from_tensors(p.config(), tensors)?)
}

impl FdScenario {
    /// Builds the default scenario for `kind`. The reference is a fresh
    /// init; θ_old is that init perturbed by N(0, 0.1²) (larger than init so
    /// attention gradients are not vanishingly small); θ is θ_old plus
    /// N(0, 0.005²) noise, redrawn until every masked token's log-ratio sits
    /// at least [`KINK_MARGIN`] away from a clip boundary so that the
    /// difference stencil never straddles a kink. The group is one Reverse(4)
    /// prompt with 6 samples and alternating forced rewards; the BPPO pair is
    /// the longest response of each stratum with half-length prefix masks.
    pub fn build(kind: LossKind, policy: &PolicyConfig, seed: u64) -> Result<Self, AnalysisError> {
        let task = TaskSpec::Reverse { length: 4 };
        let reference = PolicyParams::init(policy, seed)?;
        let theta_old = jitter(&reference, seeding::derive(&[seed, 1]), SCENARIO_SCALE)?;
        let objective = ObjectiveConfig::default();
        let mut scenario = FdScenario {
            kind,
            theta: theta_old.clone(),
            reference,
            objective,
            group: None,
            selection: None,
            instances: Vec::new(),
        };
        if kind == LossKind::Warmup {
            scenario.instances = warmup_batch(&task, seed, 0, 4);
            scenario.theta = jitter(&theta_old, seeding::derive(&[seed, 2]), STEP_SCALE)?;
            return Ok(scenario);
        }
        let inst = task
            .generate(seeding::derive(&[seed, stream::ANALYSIS, 2]))
            .map_err(|e| AnalysisError::InvalidInput(e.to_string()))?;
        let settings = RolloutSettings {
            group_size: 6,
            temperature: 1.0,
            max_len: task.max_answer_len(),
        };
        let group = collect_group(&theta_old, &task, &inst.prompt_tokens, 0, settings, seed)?
            .with_rewards(&[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let selection = if kind == LossKind::Grpo {
            Selection::full(&group)
        } else {
            let pick = |r: f64| {
                (0..group.size())
                    .filter(|&i| group.rewards[i] == r)
                    .max_by_key(|&i| (group.trajectories[i].len(), usize::MAX - i))
                    .expect("stratum not empty")
            };
            let (p, n) = (pick(1.0), pick(0.0));
            let spec = scenario.objective.prefix_spec;
            Selection {
                members: vec![p, n],
                masks: vec![
                    make_prefix_mask(group.trajectories[p].len(), spec),
                    make_prefix_mask(group.trajectories[n].len(), spec),
                ],
            }
        };
        let eps = scenario.objective.epsilon;
        let bounds = [(1.0 - eps).ln(), (1.0 + eps).ln()];
        for attempt in 0..100u64 {
            let theta = jitter(&theta_old, seeding::derive(&[seed, 2, attempt]), STEP_SCALE)?;
            let lr = log_ratios(&theta, &group, &selection)?;
            if lr.iter().all(|x| bounds.iter().all(|b| (x - b).abs() >= KINK_MARGIN)) {
                scenario.theta = theta;
                scenario.group = Some(group);
                scenario.selection = Some(selection);
                return Ok(scenario);
            }
        }
        Err(AnalysisError::InvalidInput(format!(
            "no kink-free perturbation found for seed {seed}"
        )))
    }

    pub fn with_prefix(mut self, spec: PrefixSpec) -> Self {
        if let (Some(g), Some(s)) = (&self.group, &mut self.selection) {
            if self.kind == LossKind::Bppo {
                s.masks = s
                    .members
                    .iter()
                    .map(|&i| make_prefix_mask(g.trajectories[i].len(), spec))
                    .collect();
            }
        }
        self.objective.prefix_spec = spec;
        self
    }

    fn eval(&self, params: &PolicyParams, grads: bool) -> Result<(f64, Option<ParamGrads>), AnalysisError> {
        match self.kind {
            LossKind::Warmup => Ok(warmup_loss(params, &self.instances, grads)?),
            LossKind::Grpo | LossKind::Bppo => {
                let g = self.group.as_ref().expect("rl scenario has a group");
                let s = self.selection.as_ref().expect("rl scenario has a selection");
                let out = selection_loss(params, g, s, &self.reference, &self.objective, grads)?;
                Ok((out.loss, out.grads))
            }
        }
    }

    pub fn loss(&self, params: &PolicyParams) -> Result<f64, AnalysisError> {
        let (l, _) = self.eval(params, false)?;
        if !l.is_finite() {
            return Err(AnalysisError::NonFinite("loss".into()));
        }
        Ok(l)
    }

    pub fn gradient(&self) -> Result<ParamGrads, AnalysisError> {
        Ok(self.eval(&self.theta, true)?.1.expect("requested"))
    }

    /// Flat coordinates that reach the full-mask loss but, under this
    /// selection, only through masked-out tokens: position rows past every
    /// prefix input and embedding rows of tokens seen only in masked tails.
    pub fn masked_only_coordinates(&self) -> Vec<usize> {
        let (Some(g), Some(s)) = (&self.group, &self.selection) else {
            return Vec::new();
        };
        masked_only_coordinates(&self.theta, g, s)
    }
}

/// See [`FdScenario::masked_only_coordinates`].
pub fn masked_only_coordinates(params: &PolicyParams, group: &Group, sel: &Selection) -> Vec<usize> {
    let mut prefix_inputs: Vec<Vec<Token>> = Vec::new();
    let mut full_inputs: Vec<Vec<Token>> = Vec::new();
    for (&i, mask) in sel.members.iter().zip(&sel.masks) {
        let t = &group.trajectories[i];
        let n = mask.iter().rposition(|&b| b == 1).map_or(0, |k| k + 1);
        let mut pre = t.prompt_tokens.clone();
        pre.extend_from_slice(&t.response_tokens[..n.saturating_sub(1)]);
        let mut full = t.prompt_tokens.clone();
        full.extend_from_slice(&t.response_tokens[..t.len() - 1]);
        prefix_inputs.push(pre);
        full_inputs.push(full);
    }
    let d = params.config().d_model;
    let pos_offset: usize = params.tensors()[0].len();
    let max_pre = prefix_inputs.iter().map(Vec::len).max().unwrap_or(0);
    let max_full = full_inputs.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    let seen: std::collections::BTreeSet<Token> = prefix_inputs.iter().flatten().copied().collect();
    let tail: std::collections::BTreeSet<Token> = full_inputs
        .iter()
        .flatten()
        .copied()
        .filter(|t| !seen.contains(t))
        .collect();
    for tok in tail {
        out.extend(tok * d..(tok + 1) * d);
    }
    for pos in max_pre..max_full {
        out.extend(pos_offset + pos * d..pos_offset + (pos + 1) * d);
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FdEntry {
    pub coord: usize,
    pub tensor: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskedCheck {
    pub coords: usize,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FdReport {
    pub kind: LossKind,
    pub step: f64,
    pub entries: Vec<FdEntry>,
    pub max_rel_error: f64,
    pub masked: Option<MaskedCheck>,
}

/// Compares the analytic gradient with central differences at `n_coords`
/// coordinates drawn without replacement from `seed`. For BPPO scenarios the
/// masked-only coordinates (up to `n_coords` of them) are checked as well.
pub fn finite_diff_check(
    scenario: &FdScenario,
    n_coords: usize,
    step: f64,
    seed: u64,
) -> Result<FdReport, AnalysisError> {
    if !(step > 0.0) {
        return Err(AnalysisError::InvalidInput(format!("step must be > 0, got {step}")));
    }
    let theta = &scenario.theta;
    let total = theta.param_count();
    let grads = scenario.gradient()?.flatten();
    let flat = theta.flatten();
    let names = theta.names();
    let numeric = |coord: usize| -> Result<f64, AnalysisError> {
        let x = flat[coord];
        let mut err = None;
        let d = central_difference(
            |v| match scenario.loss(&theta.with_coordinate(coord, v)) {
                Ok(l) => l,
                Err(e) => {
                    err.get_or_insert(e);
                    f64::NAN
                }
            },
            x,
            step,
        );
        match err {
            Some(e) => Err(e),
            None => Ok(d),
        }
    };
    let mut rng = seeding::rng(&[seed, stream::ANALYSIS, 3]);
    let mut coords = sample(&mut rng, total, n_coords.min(total)).into_vec();
    coords.sort_unstable();
    let mut entries = Vec::with_capacity(coords.len());
    for coord in coords {
        let a = grads[coord];
        let b = numeric(coord)?;
        let (t, _) = theta.locate(coord).expect("in range");
        entries.push(FdEntry {
            coord,
            tensor: names[t].clone(),
            analytic: a,
            numeric: b,
            rel_error: relative_error(a, b),
        });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    let masked = if scenario.kind == LossKind::Bppo {
        let all = scenario.masked_only_coordinates();
        let mut chosen = all.clone();
        if chosen.len() > n_coords {
            let idx = sample(&mut rng, all.len(), n_coords).into_vec();
            chosen = idx.into_iter().map(|i| all[i]).collect();
        }
        let mut check = MaskedCheck {
            coords: chosen.len(),
            max_abs_analytic: 0.0,
            max_abs_numeric: 0.0,
        };
        for c in chosen {
            check.max_abs_analytic = check.max_abs_analytic.max(grads[c].abs());
            check.max_abs_numeric = check.max_abs_numeric.max(numeric(c)?.abs());
        }
        Some(check)
    } else {
        None
    };
    Ok(FdReport {
        kind: scenario.kind,
        step,
        entries,
        max_rel_error,
        masked,
    })
}
