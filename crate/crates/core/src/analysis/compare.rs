use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::trainer::{read_metrics, read_timings, MetricsRecord, StepTiming, TrainError};

/// The two logs of one run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub metrics: Vec<MetricsRecord>,
    pub timings: Vec<StepTiming>,
}

impl RunLog {
    pub fn load(dir: &Path) -> Result<Self, AnalysisError> {
        let schema = |e: TrainError| match e {
            TrainError::Schema(m) => AnalysisError::Schema(m),
            TrainError::Io(m) => AnalysisError::Io(m),
            other => AnalysisError::Train(other),
        };
        Ok(Self {
            metrics: read_metrics(dir).map_err(schema)?,
            timings: read_timings(dir).map_err(schema)?,
        })
    }

    fn validate(&self, name: &str) -> Result<(), AnalysisError> {
        if self.metrics.is_empty() {
            return Err(AnalysisError::Schema(format!("run {name}: empty metrics log")));
        }
        if self.metrics.len() != self.timings.len() {
            return Err(AnalysisError::Schema(format!(
                "run {name}: {} metrics records but {} timing records",
                self.metrics.len(),
                self.timings.len()
            )));
        }
        for (k, (m, t)) in self.metrics.iter().zip(&self.timings).enumerate() {
            if m.step != k + 1 || t.step != k + 1 {
                return Err(AnalysisError::Schema(format!(
                    "run {name}: record {} has steps {}/{}, expected {}",
                    k + 1,
                    m.step,
                    t.step,
                    k + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub steps: usize,
    /// Step counts differ; only the common prefix was compared.
    pub unequal_steps: bool,
    pub tokens_a: Vec<usize>,
    pub tokens_b: Vec<usize>,
    /// `Σ tokens_a / Σ tokens_b`; `None` when run b logged no tokens.
    pub token_reduction: Option<f64>,
    /// `Σ update_ms_b / Σ update_ms_a`.
    pub update_time_ratio: Option<f64>,
    /// `Σ (sample+update)_b / Σ (sample+update)_a`.
    pub step_time_ratio: Option<f64>,
    pub final_eval_a: Option<f64>,
    pub final_eval_b: Option<f64>,
    pub auc_eval_a: Option<f64>,
    pub auc_eval_b: Option<f64>,
    rows: Vec<CsvRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CsvRow {
    step: usize,
    tokens_a: usize,
    tokens_b: usize,
    sample_ms_a: f64,
    update_ms_a: f64,
    sample_ms_b: f64,
    update_ms_b: f64,
    eval_a: Option<f64>,
    eval_b: Option<f64>,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    if num == den {
        // Also covers 0/0 on identical logs.
        return Some(1.0);
    }
    (den > 0.0).then(|| num / den)
}

/// Trapezoid area under the eval-accuracy curve, divided by the step span.
fn auc(points: &[(usize, f64)]) -> Option<f64> {
    match points {
        [] => None,
        [(_, a)] => Some(*a),
        _ => {
            let span = (points[points.len() - 1].0 - points[0].0) as f64;
            let area: f64 = points
                .windows(2)
                .map(|w| (w[1].0 - w[0].0) as f64 * (w[0].1 + w[1].1) / 2.0)
                .sum();
            Some(area / span)
        }
    }
}

/// Pure function of the two logs: `a` is the baseline, `b` the candidate.
pub fn compare_logs(a: &RunLog, b: &RunLog) -> Result<CostReport, AnalysisError> {
    a.validate("a")?;
    b.validate("b")?;
    let steps = a.metrics.len().min(b.metrics.len());
    let rows: Vec<CsvRow> = (0..steps)
        .map(|k| CsvRow {
            step: k + 1,
            tokens_a: a.metrics[k].grad_token_count,
            tokens_b: b.metrics[k].grad_token_count,
            sample_ms_a: a.timings[k].sample_ms,
            update_ms_a: a.timings[k].update_ms,
            sample_ms_b: b.timings[k].sample_ms,
            update_ms_b: b.timings[k].update_ms,
            eval_a: a.metrics[k].eval_accuracy,
            eval_b: b.metrics[k].eval_accuracy,
        })
        .collect();
    let sum = |f: fn(&CsvRow) -> f64| rows.iter().map(f).sum::<f64>();
    let evals = |f: fn(&CsvRow) -> Option<f64>| -> Vec<(usize, f64)> {
        rows.iter().filter_map(|r| f(r).map(|v| (r.step, v))).collect()
    };
    let (ea, eb) = (evals(|r| r.eval_a), evals(|r| r.eval_b));
    Ok(CostReport {
        steps,
        unequal_steps: a.metrics.len() != b.metrics.len(),
        tokens_a: rows.iter().map(|r| r.tokens_a).collect(),
        tokens_b: rows.iter().map(|r| r.tokens_b).collect(),
        token_reduction: ratio(sum(|r| r.tokens_a as f64), sum(|r| r.tokens_b as f64)),
        update_time_ratio: ratio(sum(|r| r.update_ms_b), sum(|r| r.update_ms_a)),
        step_time_ratio: ratio(
            sum(|r| r.sample_ms_b + r.update_ms_b),
            sum(|r| r.sample_ms_a + r.update_ms_a),
        ),
        final_eval_a: ea.last().map(|p| p.1),
        final_eval_b: eb.last().map(|p| p.1),
        auc_eval_a: auc(&ea),
        auc_eval_b: auc(&eb),
        rows,
    })
}

/// Loads and compares two run directories.
pub fn compare_runs(dir_a: &Path, dir_b: &Path) -> Result<CostReport, AnalysisError> {
    compare_logs(&RunLog::load(dir_a)?, &RunLog::load(dir_b)?)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

impl CostReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let sa: usize = self.tokens_a.iter().sum();
        let sb: usize = self.tokens_b.iter().sum();
        let _ = writeln!(s, "{:<28}{:>14}{:>14}", "metric", "a", "b");
        let _ = writeln!(s, "{:<28}{:>14}{:>14}", "grad tokens (total)", sa, sb);
        let _ = writeln!(s, "{:<28}{:>14}{:>14}", "final eval accuracy", opt(self.final_eval_a), opt(self.final_eval_b));
        let _ = writeln!(s, "{:<28}{:>14}{:>14}", "eval accuracy AUC", opt(self.auc_eval_a), opt(self.auc_eval_b));
        let _ = writeln!(s, "{:<28}{:>14}", "token reduction (a/b)", opt(self.token_reduction));
        let _ = writeln!(s, "{:<28}{:>14}", "update time ratio (b/a)", opt(self.update_time_ratio));
        let _ = writeln!(s, "{:<28}{:>14}", "step time ratio (b/a)", opt(self.step_time_ratio));
        let _ = writeln!(s, "{:<28}{:>14}", "steps compared", self.steps);
        if self.unequal_steps {
            let _ = writeln!(s, "warning: step counts differ; compared the first {} steps", self.steps);
        }
        s
    }

    /// Per-step CSV with the columns documented in the README.
    pub fn write_csv(&self, w: impl std::io::Write) -> Result<(), AnalysisError> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r).map_err(|e| AnalysisError::Io(e.to_string()))?;
        }
        out.flush().map_err(|e| AnalysisError::Io(e.to_string()))
    }
}
