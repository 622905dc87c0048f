//! Diverse prompt-pool selection: prompt embeddings from the policy, average
//! linkage clustering under cosine distance, and farthest-point selection
//! within each cluster.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::policy::{PolicyError, PolicyParams};
use crate::tasks::Token;

#[derive(Debug, thiserror::Error)]
pub enum CurationError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("prompt {0} is empty")]
    EmptyPrompt(usize),
    #[error("prompt {0} has a zero embedding")]
    ZeroEmbedding(usize),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Unit vectors with provenance ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub ids: Vec<usize>,
    pub vectors: Vec<Vec<f64>>,
}

impl EmbeddingSet {
    /// Normalizes every vector; ids are `0..n`.
    pub fn from_vectors(vectors: Vec<Vec<f64>>) -> Result<Self, CurationError> {
        let ids = (0..vectors.len()).collect();
        Self::with_ids(ids, vectors)
    }

    pub fn with_ids(ids: Vec<usize>, vectors: Vec<Vec<f64>>) -> Result<Self, CurationError> {
        if ids.len() != vectors.len() {
            return Err(CurationError::InvalidInput("ids and vectors differ in length".into()));
        }
        let vectors = vectors
            .into_iter()
            .zip(&ids)
            .map(|(v, &id)| normalize(v).ok_or(CurationError::ZeroEmbedding(id)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { ids, vectors })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Rows at `positions`, ids kept.
    pub fn subset(&self, positions: &[usize]) -> Self {
        Self {
            ids: positions.iter().map(|&p| self.ids[p]).collect(),
            vectors: positions.iter().map(|&p| self.vectors[p].clone()).collect(),
        }
    }
}

/// Distances closer than this count as tied. Exact ties in real arithmetic
/// (duplicates, symmetric configurations) otherwise get decided by rounding,
/// which breaks the lowest-id rule and rotation invariance.
pub const TIE_TOLERANCE: f64 = 1e-12;

fn normalize(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1 − cos(a, b)` for unit vectors.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - dot(a, b)
}

/// Mean over positions of the residual stream after the last block (the
/// input of the deepest head), L2-normalized. Ids are pool positions.
pub fn embed_prompts(params: &PolicyParams, prompts: &[Vec<Token>]) -> Result<EmbeddingSet, CurationError> {
    if let Some(i) = prompts.iter().position(Vec::is_empty) {
        return Err(CurationError::EmptyPrompt(i));
    }
    let depth = params.config().deepest_exit();
    let vectors = prompts
        .par_iter()
        .map(|p| {
            let states = params.block_states(p, depth)?;
            let h = &states[depth - 1];
            let mut mean = vec![0.0; h.cols()];
            for r in 0..h.rows() {
                for (m, x) in mean.iter_mut().zip(h.row(r)) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= h.rows() as f64);
            Ok(mean)
        })
        .collect::<Result<Vec<_>, PolicyError>>()?;
    EmbeddingSet::from_vectors(vectors)
}

/// Pairwise cosine distances, row-major.
fn distance_matrix(embs: &EmbeddingSet) -> Vec<Vec<f64>> {
    embs.vectors
        .par_iter()
        .map(|a| embs.vectors.iter().map(|b| cosine_distance(a, b)).collect())
        .collect()
}

/// Agglomerative average-linkage clustering down to `k` clusters. Among
/// equally close pairs, the pair whose (smaller, larger) minimum member ids
/// is lexicographically lowest merges first. Labels are numbered by each
/// cluster's smallest member id.
pub fn hier_cluster(embs: &EmbeddingSet, k: usize) -> Result<Vec<usize>, CurationError> {
    let n = embs.len();
    if k == 0 || k > n {
        return Err(CurationError::InvalidInput(format!("k must be in 1..={n}, got {k}")));
    }
    let d = distance_matrix(embs);
    // Cluster state: members, minimum id, and pairwise distance sums.
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut min_id: Vec<usize> = embs.ids.clone();
    let mut alive = vec![true; n];
    let mut sums = d.clone();
    for _ in 0..n - k {
        let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
        for a in (0..n).filter(|&a| alive[a]) {
            for b in (a + 1..n).filter(|&b| alive[b]) {
                let dist = sums[a][b] / (members[a].len() * members[b].len()) as f64;
                let key = (min_id[a].min(min_id[b]), min_id[a].max(min_id[b]));
                let better = match best {
                    None => true,
                    Some((bd, bk, _, _)) => {
                        dist < bd - TIE_TOLERANCE || ((dist - bd).abs() <= TIE_TOLERANCE && key < bk)
                    }
                };
                if better {
                    best = Some((dist, key, a, b));
                }
            }
        }
        let (_, _, a, b) = best.expect("at least two clusters alive");
        for c in 0..n {
            sums[a][c] += sums[b][c];
            sums[c][a] = sums[a][c];
        }
        let moved = std::mem::take(&mut members[b]);
        members[a].extend(moved);
        min_id[a] = min_id[a].min(min_id[b]);
        alive[b] = false;
    }
    let mut clusters: Vec<usize> = (0..n).filter(|&c| alive[c]).collect();
    clusters.sort_by_key(|&c| min_id[c]);
    let mut labels = vec![0; n];
    for (label, &c) in clusters.iter().enumerate() {
        for &p in &members[c] {
            labels[p] = label;
        }
    }
    Ok(labels)
}

/// Farthest-point greedy under cosine distance. The first pick is farthest
/// from the (normalized) centroid; each later pick maximizes the minimum
/// distance to the picks so far. Ties go to the lowest id. Returns ids in
/// pick order.
pub fn greedy_diverse_select(embs: &EmbeddingSet, m: usize) -> Result<Vec<usize>, CurationError> {
    let n = embs.len();
    if m == 0 || m > n {
        return Err(CurationError::InvalidInput(format!("m must be in 1..={n}, got {m}")));
    }
    let dim = embs.vectors[0].len();
    let mut centroid = vec![0.0; dim];
    for v in &embs.vectors {
        for (c, x) in centroid.iter_mut().zip(v) {
            *c += x;
        }
    }
    // A centroid at the origin leaves every point equally far: all ties.
    let first_dist: Vec<f64> = match normalize(centroid) {
        Some(c) => embs.vectors.iter().map(|v| cosine_distance(v, &c)).collect(),
        None => vec![1.0; n],
    };
    let mut by_id: Vec<usize> = (0..n).collect();
    by_id.sort_by_key(|&i| embs.ids[i]);
    // Scanning in id order, a later point wins only if clearly farther.
    let argmax = |score: &[f64], taken: &[bool]| {
        let mut best: Option<usize> = None;
        for &i in by_id.iter().filter(|&&i| !taken[i]) {
            if best.is_none_or(|b| score[i] > score[b] + TIE_TOLERANCE) {
                best = Some(i);
            }
        }
        best.expect("a point remains")
    };
    let mut taken = vec![false; n];
    let mut order = Vec::with_capacity(m);
    let mut nearest = vec![f64::INFINITY; n];
    let mut pick = argmax(&first_dist, &taken);
    loop {
        taken[pick] = true;
        order.push(pick);
        if order.len() == m {
            break;
        }
        for i in 0..n {
            nearest[i] = nearest[i].min(cosine_distance(&embs.vectors[i], &embs.vectors[pick]));
        }
        pick = argmax(&nearest, &taken);
    }
    Ok(order.into_iter().map(|p| embs.ids[p]).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curated {
    /// Pool positions ordered by (cluster, greedy rank).
    pub selected: Vec<usize>,
    /// Cluster label per pool position.
    pub labels: Vec<usize>,
}

/// Embed → cluster into `k` → pick `min(m, size)` per cluster → union.
pub fn curate(
    pool: &[Vec<Token>],
    k: usize,
    m: usize,
    params: &PolicyParams,
) -> Result<Curated, CurationError> {
    if m == 0 || k.checked_mul(m).is_none_or(|t| t > pool.len()) {
        return Err(CurationError::InvalidInput(format!(
            "need m >= 1 and k*m <= pool size ({} * {} vs {})",
            k,
            m,
            pool.len()
        )));
    }
    let embs = embed_prompts(params, pool)?;
    let labels = hier_cluster(&embs, k)?;
    let mut selected = Vec::new();
    for c in 0..k {
        let positions: Vec<usize> = (0..pool.len()).filter(|&p| labels[p] == c).collect();
        let cluster = embs.subset(&positions);
        selected.extend(greedy_diverse_select(&cluster, m.min(cluster.len()))?);
    }
    Ok(Curated { selected, labels })
}

/// Parses a pool file: one prompt per line, token ids separated by spaces.
/// Blank lines are rejected as empty prompts.
pub fn parse_pool(text: &str) -> Result<Vec<Vec<Token>>, CurationError> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let toks = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<Token>()
                        .map_err(|e| CurationError::InvalidInput(format!("line {}: {t:?}: {e}", i + 1)))
                })
                .collect::<Result<Vec<_>, _>>()?;
            if toks.is_empty() {
                return Err(CurationError::EmptyPrompt(i));
            }
            Ok(toks)
        })
        .collect()
}

pub fn format_pool(prompts: &[&[Token]]) -> String {
    let mut s = String::new();
    for p in prompts {
        let line: Vec<String> = p.iter().map(ToString::to_string).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}
