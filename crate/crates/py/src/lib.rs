//! Python bindings: policy sampling, task helpers, evaluation, the gradient
//! check and the curation primitives.

use std::path::PathBuf;

use bppo_core::analysis::{finite_diff_check, FdScenario, LossKind, DEFAULT_FD_STEP};
use bppo_core::curation::{greedy_diverse_select as greedy, hier_cluster as cluster, EmbeddingSet};
use bppo_core::policy::{load_checkpoint, save_checkpoint, PolicyConfig, PolicyParams};
use bppo_core::tasks::{verify as verify_response, TaskSpec, Token};
use bppo_core::trainer::evaluate as evaluate_greedy;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn task(spec: &str) -> PyResult<TaskSpec> {
    spec.parse().map_err(err)
}

/// Multi-exit decoder policy.
#[pyclass(name = "Policy")]
#[derive(Clone)]
pub struct PyPolicy {
    inner: PolicyParams,
}

#[pymethods]
impl PyPolicy {
    /// Fresh policy with the default architecture.
    #[staticmethod]
    #[pyo3(signature = (seed=0))]
    fn init(seed: u64) -> PyResult<Self> {
        let inner = PolicyParams::init(&PolicyConfig::default(), seed).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn exit_depths(&self) -> Vec<usize> {
        self.inner.config().exit_depths.clone()
    }

    /// Samples one response; returns `(tokens, behavior_logprobs)`.
    #[pyo3(signature = (prompt, temperature=1.0, max_len=8, seed=0, exit_depth=None))]
    fn generate(
        &self,
        prompt: Vec<Token>,
        temperature: f64,
        max_len: usize,
        seed: u64,
        exit_depth: Option<usize>,
    ) -> PyResult<(Vec<Token>, Vec<f64>)> {
        let depth = exit_depth.unwrap_or(self.inner.config().deepest_exit());
        let t = self
            .inner
            .sample_response(&prompt, temperature, max_len, seed, depth)
            .map_err(err)?;
        Ok((t.response_tokens, t.behavior_logprobs))
    }

    #[pyo3(signature = (prefix, next, exit_depth=None))]
    fn token_logprob(&self, prefix: Vec<Token>, next: Token, exit_depth: Option<usize>) -> PyResult<f64> {
        let depth = exit_depth.unwrap_or(self.inner.config().deepest_exit());
        self.inner.token_logprob(&prefix, next, depth).map_err(err)
    }

    /// Residual stream after each of the first `depth` blocks, as nested lists.
    fn block_states(&self, tokens: Vec<Token>, depth: usize) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let states = self.inner.block_states(&tokens, depth).map_err(err)?;
        Ok(states
            .iter()
            .map(|s| {
                let cols = s.shape()[1];
                s.data().chunks(cols).map(<[f64]>::to_vec).collect()
            })
            .collect())
    }
}

/// `(prompt, oracle_response)` for `task` (e.g. "mod_add:10") and `seed`.
#[pyfunction]
fn task_instance(spec: &str, seed: u64) -> PyResult<(Vec<Token>, Vec<Token>)> {
    let inst = task(spec)?.generate(seed).map_err(err)?;
    Ok((inst.prompt_tokens, inst.oracle_response))
}

#[pyfunction]
fn verify(spec: &str, prompt: Vec<Token>, response: Vec<Token>) -> PyResult<f64> {
    Ok(verify_response(&task(spec)?, &prompt, &response))
}

/// Greedy exact-match accuracy at the deepest exit.
#[pyfunction]
#[pyo3(signature = (policy, spec, n=200, seed=0))]
fn evaluate(policy: &PyPolicy, spec: &str, n: usize, seed: u64) -> PyResult<f64> {
    evaluate_greedy(&policy.inner, &task(spec)?, n, seed).map_err(err)
}

/// Analytic vs finite-difference gradient on random coordinates.
#[pyfunction]
#[pyo3(signature = (loss="bppo", coords=200, step=DEFAULT_FD_STEP, seed=0))]
fn fdcheck<'py>(py: Python<'py>, loss: &str, coords: usize, step: f64, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let kind = match loss {
        "warmup" => LossKind::Warmup,
        "grpo" => LossKind::Grpo,
        "bppo" => LossKind::Bppo,
        _ => return Err(err(format!("unknown loss {loss:?} (warmup, grpo, bppo)"))),
    };
    let scenario = FdScenario::build(kind, &PolicyConfig::default(), seed).map_err(err)?;
    let report = finite_diff_check(&scenario, coords, step, seed).map_err(err)?;
    let out = PyDict::new_bound(py);
    out.set_item("coords", report.entries.len())?;
    out.set_item("max_rel_error", report.max_rel_error)?;
    if let Some(m) = &report.masked {
        out.set_item("masked_coords", m.coords)?;
        out.set_item("masked_max_abs_analytic", m.max_abs_analytic)?;
    }
    Ok(out)
}

/// Average-linkage cluster labels under cosine distance.
#[pyfunction]
fn hier_cluster(vectors: Vec<Vec<f64>>, k: usize) -> PyResult<Vec<usize>> {
    let e = EmbeddingSet::from_vectors(vectors).map_err(err)?;
    cluster(&e, k).map_err(err)
}

/// Farthest-point selection of `m` indices, in pick order.
#[pyfunction]
fn greedy_diverse_select(vectors: Vec<Vec<f64>>, m: usize) -> PyResult<Vec<usize>> {
    let e = EmbeddingSet::from_vectors(vectors).map_err(err)?;
    greedy(&e, m).map_err(err)
}

#[pymodule]
fn bppo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(task_instance, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(fdcheck, m)?)?;
    m.add_function(wrap_pyfunction!(hier_cluster, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_diverse_select, m)?)?;
    Ok(())
}
