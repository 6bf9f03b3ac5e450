//! Regret and reconstruction metrics, task sampling, and batch benchmarking.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::explain::{cf_opt_feature, cf_opt_latent, verify_with_oracle, ExplanationKind, ExplanationTask, MdmmConfig};
use crate::optlayers::{dot01, OptLayer};
use crate::pipeline::Pipeline;
use crate::vae::Vae;

/// `(cᵀy − cᵀy*) / |cᵀy*|` on minimisation costs, so the value is
/// non-negative for either sense.
pub fn relative_regret(y: &[u8], theta: &[f64], layer: &OptLayer) -> Result<f64> {
    check_dim("regret decision", layer.dim(), y.len())?;
    check_dim("regret costs", layer.dim(), theta.len())?;
    if !layer.is_feasible(y) {
        return Err(Error::Input("regret of an infeasible decision".into()));
    }
    let c = layer.to_min_costs(theta);
    let best = layer.solve_min(&c)?.objective;
    if best == 0.0 {
        return Err(Error::UndefinedMetric("relative regret with zero optimal value".into()));
    }
    Ok((dot01(&c, y) - best) / best.abs())
}

/// `‖x − d(e(x))‖²` with the encoder mean.
pub fn reconstruction_error(vae: &Vae, x: &[f64]) -> Result<f64> {
    let r = vae.reconstruct(x)?;
    Ok(x.iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Relative regret of the pipeline decision at `x` under the costs
/// predicted from its reconstruction.
pub fn decision_focused_recon(vae: &Vae, p: &Pipeline, x: &[f64]) -> Result<f64> {
    check_dim("VAE features vs pipeline", p.n_x(), vae.n_x())?;
    let y = p.decide(x)?.1.y;
    let theta = p.predict(&vae.reconstruct(x)?)?;
    relative_regret(&y, &theta, &p.layer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl MetricReport {
    /// `None` for an empty sample. Quantiles interpolate linearly.
    pub fn from_values(name: &str, values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Some(Self {
            name: name.to_string(),
            n,
            mean,
            std: var.sqrt(),
            min: s[0],
            q25: quantile(&s, 0.25),
            median: quantile(&s, 0.5),
            q75: quantile(&s, 0.75),
            max: s[n - 1],
        })
    }
}

/// Draws `n` tasks from random pairs `(x_i, y_j)` of `data`, with `y_j` the
/// stored solution of row `j`. Pairs whose alternative coincides with the
/// solution of row `i` or with the pipeline decision at `x_i` are redrawn.
pub fn sample_tasks(
    p: &Pipeline,
    data: &Dataset,
    kind: ExplanationKind,
    eps: Option<f64>,
    n: usize,
    seed: u64,
) -> Result<Vec<ExplanationTask>> {
    if data.is_empty() {
        return Err(Error::Input("cannot sample tasks from an empty dataset".into()));
    }
    let data = if data.solutions.is_some() {
        data.clone()
    } else {
        data.clone().with_solutions(&p.layer)?
    };
    let sols = data.solutions.as_ref().expect("filled");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(n);
    let max_draws = 1000 * n.max(1);
    let mut draws = 0;
    while tasks.len() < n {
        draws += 1;
        if draws > max_draws {
            return Err(Error::Input(format!(
                "could only sample {} of {n} non-trivial {kind} tasks",
                tasks.len()
            )));
        }
        let i = rng.random_range(0..data.len());
        let x0 = data.contexts[i].clone();
        if kind == ExplanationKind::Epsilon {
            tasks.push(ExplanationTask::epsilon(p, x0, eps.unwrap_or(1.0))?);
            continue;
        }
        let j = rng.random_range(0..data.len());
        let y_alt = &sols[j];
        if *y_alt == sols[i] || *y_alt == p.decide(&x0)?.1.y {
            continue;
        }
        let t = match kind {
            ExplanationKind::Relative => ExplanationTask::relative(p, x0, y_alt.clone())?,
            _ => ExplanationTask::absolute(p, x0, y_alt.clone())?,
        };
        tasks.push(t);
    }
    Ok(tasks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchSpace {
    Feature,
    Latent,
}

/// One solver configuration in a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchSetting {
    pub label: String,
    pub space: SearchSpace,
    pub cfg: MdmmConfig,
}

/// One CSV row per (setting, task).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub setting: String,
    pub task: usize,
    pub kind: ExplanationKind,
    pub eps: Option<f64>,
    pub space: SearchSpace,
    pub feasible: bool,
    /// Re-verified by the enumeration oracle; empty when the layer is too
    /// large to enumerate.
    pub valid: Option<bool>,
    pub iterations: usize,
    pub loss: Option<f64>,
    /// `‖x_best − x0‖²`.
    pub sq_distance: Option<f64>,
    pub decision_focused_recon: Option<f64>,
    pub error: Option<String>,
}

fn run_one(task: &ExplanationTask, idx: usize, setting: &BenchSetting, p: &Pipeline, vae: Option<&Vae>) -> TaskRow {
    let mut row = TaskRow {
        setting: setting.label.clone(),
        task: idx,
        kind: task.kind,
        eps: task.eps,
        space: setting.space,
        feasible: false,
        valid: None,
        iterations: 0,
        loss: None,
        sq_distance: None,
        decision_focused_recon: None,
        error: None,
    };
    let res = match (setting.space, vae) {
        (SearchSpace::Feature, _) => cf_opt_feature(task, p, &setting.cfg),
        (SearchSpace::Latent, Some(v)) => cf_opt_latent(task, p, v, &setting.cfg),
        (SearchSpace::Latent, None) => Err(Error::Input("latent search requires a VAE".into())),
    };
    match res {
        Err(e) => row.error = Some(e.to_string()),
        Ok(r) => {
            row.feasible = r.feasible;
            row.iterations = r.iterations_run;
            if let Some(x) = &r.x_best {
                row.loss = Some(r.loss_best);
                row.sq_distance = Some(x.iter().zip(&task.x0).map(|(a, b)| (a - b) * (a - b)).sum());
                match verify_with_oracle(task, p, x, crate::explain::DEFAULT_FEAS_TOL) {
                    Ok(ok) => row.valid = Some(ok),
                    Err(Error::Capacity(_)) => {}
                    Err(e) => row.error = Some(e.to_string()),
                }
                if let Some(v) = vae {
                    match decision_focused_recon(v, p, x) {
                        Ok(d) => row.decision_focused_recon = Some(d),
                        Err(e) => row.error = Some(e.to_string()),
                    }
                }
            }
        }
    }
    row
}

/// Runs every setting on every task (in parallel, order preserved).
/// Individual failures are recorded in the row's `error` column.
pub fn batch_explain(
    tasks: &[ExplanationTask],
    settings: &[BenchSetting],
    p: &Pipeline,
    vae: Option<&Vae>,
) -> Vec<TaskRow> {
    let jobs: Vec<(usize, usize)> = (0..settings.len())
        .flat_map(|s| (0..tasks.len()).map(move |t| (s, t)))
        .collect();
    jobs.par_iter()
        .map(|&(s, t)| run_one(&tasks[t], t, &settings[s], p, vae))
        .collect()
}

/// Aggregates for one setting: iterations, feasibility rate, loss, distance,
/// validity rate and decision-focused reconstruction error.
pub fn summarize(rows: &[TaskRow]) -> Vec<MetricReport> {
    let mut out = Vec::new();
    let mut push = |name: &str, v: Vec<f64>| {
        if let Some(r) = MetricReport::from_values(name, &v) {
            out.push(r);
        }
    };
    push("iterations", rows.iter().map(|r| r.iterations as f64).collect());
    push("feasible", rows.iter().map(|r| f64::from(u8::from(r.feasible))).collect());
    push("valid", rows.iter().filter_map(|r| r.valid).map(|v| f64::from(u8::from(v))).collect());
    push("loss", rows.iter().filter_map(|r| r.loss).collect());
    push("sq_distance", rows.iter().filter_map(|r| r.sq_distance).collect());
    push("decision_focused_recon", rows.iter().filter_map(|r| r.decision_focused_recon).collect());
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub setting: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl SummaryRow {
    pub fn new(setting: &str, r: MetricReport) -> Self {
        Self {
            setting: setting.to_string(),
            metric: r.name,
            n: r.n,
            mean: r.mean,
            std: r.std,
            min: r.min,
            q25: r.q25,
            median: r.median,
            q75: r.q75,
            max: r.max,
        }
    }
}

/// Runs the batch and returns raw rows plus per-setting summaries.
pub fn batch_explain_and_report(
    tasks: &[ExplanationTask],
    settings: &[BenchSetting],
    p: &Pipeline,
    vae: Option<&Vae>,
) -> (Vec<TaskRow>, Vec<SummaryRow>) {
    let rows = batch_explain(tasks, settings, p, vae);
    let mut summary = Vec::new();
    for s in settings {
        let mine: Vec<TaskRow> = rows.iter().filter(|r| r.setting == s.label).cloned().collect();
        for report in summarize(&mine) {
            summary.push(SummaryRow::new(&s.label, report));
        }
    }
    (rows, summary)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_task_rows(path: &Path) -> Result<Vec<TaskRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<TaskRow>, _>>()
        .map_err(|e| Error::format(path, e))
}
