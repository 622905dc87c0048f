use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::numerics::Tape;
use crate::policy::{BoundParams, PolicyParams, Trajectory};
use crate::rollout::{collect_groups, Group, RolloutSettings};
use crate::tasks::TaskSpec;
use crate::trainer::step_prompts;

/// Flattened `∇θ Â · (1/|o|) Σ_t log π_θ(o_t | q, o_<t)` at the deepest exit:
/// the gradient of the on-policy unclipped surrogate of one response (ρ = 1,
/// full mask, no KL).
pub fn response_gradient(
    params: &PolicyParams,
    trajectory: &Trajectory,
    advantage: f64,
) -> Result<Vec<f64>, AnalysisError> {
    let n = trajectory.len();
    if n == 0 || advantage == 0.0 {
        return Ok(vec![0.0; params.param_count()]);
    }
    let p = trajectory.prompt_tokens.len();
    let mut seq = trajectory.prompt_tokens.clone();
    seq.extend_from_slice(&trajectory.response_tokens[..n - 1]);
    let depth = params.config().deepest_exit();
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, true);
    let hidden = params.backbone(&mut tape, &bound, &[&seq], depth)?;
    let rows: Vec<usize> = (0..n).map(|t| p - 1 + t).collect();
    let h = tape.embedding(hidden.states[depth - 1], &rows)?;
    let logits = params.head_logits(&mut tape, &bound, h, depth)?;
    let lp = tape.log_softmax(logits)?;
    let picked = tape.gather_cols(lp, &trajectory.response_tokens)?;
    let root = tape.dot_const(picked, &vec![advantage / n as f64; n])?;
    Ok(bound.grads(&tape.backward(root)?)?.flatten())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSummary {
    pub intra_positive: Option<f64>,
    pub intra_negative: Option<f64>,
    /// Mean of the defined stratum means, so both strata weigh equally.
    pub intra: Option<f64>,
    /// Mean over all same-stratum pairs; dominated by the larger stratum.
    pub intra_pooled: Option<f64>,
    pub cross: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineMatrix {
    /// `G × G`, row-major. Entries involving an undefined response are NaN
    /// in memory (null once serialized).
    pub matrix: Vec<Vec<f64>>,
    /// `true` for the positive stratum.
    pub positive: Vec<bool>,
    /// Responses whose gradient is exactly zero.
    pub undefined: Vec<bool>,
    pub summary: CosineSummary,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Cosine similarities between the per-response gradients of a group.
/// Strata are split on reward 1 vs everything else.
pub fn gradient_cosine_matrix(params: &PolicyParams, group: &Group) -> Result<CosineMatrix, AnalysisError> {
    let g = group.size();
    let grads = group
        .trajectories
        .iter()
        .zip(&group.advantages)
        .map(|(t, &a)| response_gradient(params, t, a))
        .collect::<Result<Vec<_>, _>>()?;
    let norms: Vec<f64> = grads.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    if norms.iter().any(|n| !n.is_finite()) {
        return Err(AnalysisError::NonFinite("response gradient".into()));
    }
    let undefined: Vec<bool> = norms.iter().map(|&n| n == 0.0).collect();
    let positive: Vec<bool> = group.rewards.iter().map(|&r| r == 1.0).collect();
    let mut matrix = vec![vec![f64::NAN; g]; g];
    let (mut pp, mut nn, mut cross) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..g {
        if undefined[i] {
            continue;
        }
        matrix[i][i] = 1.0;
        for j in i + 1..g {
            if undefined[j] {
                continue;
            }
            let dot: f64 = grads[i].iter().zip(&grads[j]).map(|(a, b)| a * b).sum();
            let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            matrix[i][j] = c;
            matrix[j][i] = c;
            match (positive[i], positive[j]) {
                (true, true) => pp.push(c),
                (false, false) => nn.push(c),
                _ => cross.push(c),
            }
        }
    }
    let pooled: Vec<f64> = pp.iter().chain(&nn).copied().collect();
    let strata: Vec<f64> = [mean(&pp), mean(&nn)].into_iter().flatten().collect();
    Ok(CosineMatrix {
        matrix,
        positive,
        undefined,
        summary: CosineSummary {
            intra_positive: mean(&pp),
            intra_negative: mean(&nn),
            intra: mean(&strata),
            intra_pooled: mean(&pooled),
            cross: mean(&cross),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStudy {
    pub groups: usize,
    pub prompts_drawn: usize,
    pub mean_intra_positive: f64,
    pub mean_intra_negative: f64,
    pub mean_intra: f64,
    pub mean_intra_pooled: f64,
    pub mean_cross: f64,
}

/// Averages the per-group summaries over the first `n_groups` mixed groups
/// sampled from `params` (temperature 1). Gives up after `50 · n_groups`
/// prompts.
pub fn gradient_similarity_study(
    params: &PolicyParams,
    task: &TaskSpec,
    n_groups: usize,
    group_size: usize,
    seed: u64,
) -> Result<SimilarityStudy, AnalysisError> {
    if n_groups == 0 {
        return Err(AnalysisError::InvalidInput("n_groups must be positive".into()));
    }
    let settings = RolloutSettings {
        group_size,
        temperature: 1.0,
        max_len: task.max_answer_len(),
    };
    let batch = 64;
    let mut mixed = Vec::with_capacity(n_groups);
    let mut drawn = 0;
    let mut step = 1;
    while mixed.len() < n_groups {
        if drawn >= 50 * n_groups {
            return Err(AnalysisError::InvalidInput(format!(
                "only {} mixed groups among {drawn} prompts",
                mixed.len()
            )));
        }
        let prompts = step_prompts(task, seed, step, batch);
        let groups = collect_groups(params, task, &prompts, (step - 1) * batch, settings, seed)?;
        drawn += batch;
        step += 1;
        mixed.extend(groups.into_iter().filter(Group::is_mixed));
    }
    mixed.truncate(n_groups);
    let summaries: Vec<CosineSummary> = {
        use rayon::prelude::*;
        mixed
            .par_iter()
            .map(|g| gradient_cosine_matrix(params, g).map(|m| m.summary))
            .collect::<Result<_, _>>()?
    };
    let avg = |f: fn(&CosineSummary) -> Option<f64>| {
        let v: Vec<f64> = summaries.iter().filter_map(f).collect();
        mean(&v).unwrap_or(f64::NAN)
    };
    Ok(SimilarityStudy {
        groups: mixed.len(),
        prompts_drawn: drawn,
        mean_intra_positive: avg(|s| s.intra_positive),
        mean_intra_negative: avg(|s| s.intra_negative),
        mean_intra: avg(|s| s.intra),
        mean_intra_pooled: avg(|s| s.intra_pooled),
        mean_cross: avg(|s| s.cross),
    })
}
