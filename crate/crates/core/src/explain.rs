//! Counterfactual explanation search by the modified differential method of
//! multipliers, in feature space or in a VAE latent space.
//!
//! All criteria are evaluated on minimisation costs `c = sign · φ(x)`, so a
//! maximising layer is handled by negating the prediction.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::optlayers::{dot01, enumerate_min};
use crate::pipeline::Pipeline;
use crate::plausibility::{omega, RegularizerSpec};
use crate::vae::Vae;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplanationKind {
    /// `y_alt` at least as good as the current decision.
    Relative,
    /// `y_alt` optimal.
    Absolute,
    /// The current decision has relative regret at least `ε`.
    Epsilon,
}

impl std::fmt::Display for ExplanationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Relative => "relative",
            Self::Absolute => "absolute",
            Self::Epsilon => "epsilon",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationTask {
    pub kind: ExplanationKind,
    pub x0: Vec<f64>,
    pub y_alt: Option<Vec<u8>>,
    pub eps: Option<f64>,
    /// Pipeline decision at `x0`.
    pub y0: Vec<u8>,
}

impl ExplanationTask {
    pub fn relative(p: &Pipeline, x0: Vec<f64>, y_alt: Vec<u8>) -> Result<Self> {
        Self::with_alternative(p, ExplanationKind::Relative, x0, y_alt)
    }

    pub fn absolute(p: &Pipeline, x0: Vec<f64>, y_alt: Vec<u8>) -> Result<Self> {
        Self::with_alternative(p, ExplanationKind::Absolute, x0, y_alt)
    }

    pub fn epsilon(p: &Pipeline, x0: Vec<f64>, eps: f64) -> Result<Self> {
        let y0 = p.decide(&x0)?.1.y;
        let t = Self {
            kind: ExplanationKind::Epsilon,
            x0,
            y_alt: None,
            eps: Some(eps),
            y0,
        };
        t.validate(p)?;
        Ok(t)
    }

    fn with_alternative(p: &Pipeline, kind: ExplanationKind, x0: Vec<f64>, y_alt: Vec<u8>) -> Result<Self> {
        let y0 = p.decide(&x0)?.1.y;
        let t = Self {
            kind,
            x0,
            y_alt: Some(y_alt),
            eps: None,
            y0,
        };
        t.validate(p)?;
        Ok(t)
    }

    pub fn validate(&self, p: &Pipeline) -> Result<()> {
        check_dim("task context", p.n_x(), self.x0.len())?;
        check_dim("task decision", p.n_y(), self.y0.len())?;
        match self.kind {
            ExplanationKind::Relative | ExplanationKind::Absolute => {
                let alt = self
                    .y_alt
                    .as_ref()
                    .ok_or_else(|| Error::Input(format!("{} task needs an alternative decision", self.kind)))?;
                check_dim("alternative decision", p.n_y(), alt.len())?;
                if !p.layer.is_feasible(alt) {
                    return Err(Error::Input("alternative decision is infeasible for the layer".into()));
                }
                if *alt == self.y0 {
                    return Err(Error::Input("alternative decision equals the current decision".into()));
                }
            }
            ExplanationKind::Epsilon => match self.eps {
                Some(e) if e > 0.0 && e.is_finite() => {}
                _ => return Err(Error::Input("epsilon task needs a finite ε > 0".into())),
            },
        }
        Ok(())
    }
}

/// `h(x)` together with the direction `v` in minimisation cost space such
/// that `∇_c h = v` with the layer solution held fixed.
struct Criterion {
    h: f64,
    direction: Vec<f64>,
}

fn criterion(task: &ExplanationTask, p: &Pipeline, x: &[f64]) -> Result<Criterion> {
    let c = p.min_costs(x)?;
    let y0 = &task.y0;
    let diff = |a: &[f64], b: &[u8]| -> Vec<f64> { a.iter().zip(b).map(|(u, &v)| u - f64::from(v)).collect() };
    Ok(match task.kind {
        ExplanationKind::Relative => {
            let alt = task.y_alt.as_ref().expect("validated task");
            let alt_f: Vec<f64> = alt.iter().map(|&v| f64::from(v)).collect();
            Criterion {
                h: dot01(&c, alt) - dot01(&c, y0),
                direction: diff(&alt_f, y0),
            }
        }
        ExplanationKind::Absolute => {
            let alt = task.y_alt.as_ref().expect("validated task");
            let star = p.layer.solve_min(&c)?;
            let alt_f: Vec<f64> = alt.iter().map(|&v| f64::from(v)).collect();
            Criterion {
                h: dot01(&c, alt) - star.objective,
                direction: diff(&alt_f, &star.y),
            }
        }
        ExplanationKind::Epsilon => {
            let eps = task.eps.expect("validated task");
            let star = p.layer.solve_min(&c)?;
            let factor = if star.objective >= 0.0 { 1.0 + eps } else { 1.0 - eps };
            let scaled: Vec<f64> = star.y.iter().map(|&v| factor * f64::from(v)).collect();
            Criterion {
                h: factor * star.objective - dot01(&c, y0),
                direction: diff(&scaled, y0),
            }
        }
    })
}

/// Gradient of `h` through the predictor at `x`.
fn criterion_grad(p: &Pipeline, x: &[f64], crit: &Criterion) -> Result<Vec<f64>> {
    let s = p.sense().sign();
    let upstream: Vec<f64> = crit.direction.iter().map(|d| s * d).collect();
    p.predictor.vjp_input(x, &upstream)
}

/// Explanation criterion at `x`; the task is satisfied iff `h ≤ 0`.
pub fn h_value(task: &ExplanationTask, p: &Pipeline, x: &[f64]) -> Result<f64> {
    task.validate(p)?;
    Ok(criterion(task, p, x)?.h)
}

/// `∇_x h` with the layer solution treated as locally constant.
pub fn grad_h(task: &ExplanationTask, p: &Pipeline, x: &[f64]) -> Result<Vec<f64>> {
    task.validate(p)?;
    let crit = criterion(task, p, x)?;
    criterion_grad(p, x, &crit)
}

/// Re-checks the criterion at `x` with the enumeration oracle, allowing
/// `slack` for rounding.
pub fn verify_with_oracle(task: &ExplanationTask, p: &Pipeline, x: &[f64], slack: f64) -> Result<bool> {
    task.validate(p)?;
    let c = p.min_costs(x)?;
    let best = enumerate_min(&p.layer, &c)?.objective;
    let at_y0 = dot01(&c, &task.y0);
    Ok(match task.kind {
        ExplanationKind::Relative => dot01(&c, task.y_alt.as_ref().expect("validated")) <= at_y0 + slack,
        ExplanationKind::Absolute => dot01(&c, task.y_alt.as_ref().expect("validated")) <= best + slack,
        ExplanationKind::Epsilon => {
            let eps = task.eps.expect("validated");
            let factor = if best >= 0.0 { 1.0 + eps } else { 1.0 - eps };
            factor * best <= at_y0 + slack
        }
    })
}

/// Criterion values up to this level count as satisfied; it matches the
/// slack used when re-verifying with the exact oracle.
pub const DEFAULT_FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proximity {
    /// `‖x0 − x‖²` in feature space.
    Feature,
    /// `‖e(x0) − z‖²` in latent space.
    Latent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdmmConfig {
    pub gamma: f64,
    pub rho: f64,
    pub max_iter: usize,
    pub c_max: usize,
    pub u: f64,
    pub reg: RegularizerSpec,
    pub proximity: Proximity,
    /// An iterate counts as feasible when `h ≤ feas_tol`.
    pub feas_tol: f64,
    pub record_trace: bool,
}

impl Default for MdmmConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            rho: 1.0,
            max_iter: 6000,
            c_max: 10,
            u: 0.9,
            reg: RegularizerSpec::none(),
            proximity: Proximity::Feature,
            feas_tol: DEFAULT_FEAS_TOL,
            record_trace: false,
        }
    }
}

impl MdmmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Input(m.into()));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("step size gamma must be positive");
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad("damping rho must be positive");
        }
        if !(self.u > 0.0 && self.u < 1.0) {
            return bad("update tolerance u must lie in (0, 1)");
        }
        if self.c_max == 0 {
            return bad("c_max must be at least 1");
        }
        if !(self.feas_tol >= 0.0 && self.feas_tol.is_finite()) {
            return bad("feasibility tolerance must be finite and non-negative");
        }
        self.reg.validated().map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub h: f64,
    pub loss: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationResult {
    pub x_best: Option<Vec<f64>>,
    pub z_best: Option<Vec<f64>>,
    /// `+∞` when no feasible iterate was found.
    pub loss_best: f64,
    pub feasible: bool,
    /// Criterion value at `x_best`.
    pub h_best: Option<f64>,
    pub iterations_run: usize,
    pub final_lambda: f64,
    pub improvements: Vec<Improvement>,
    pub trace: Option<Vec<TraceRow>>,
}

/// One evaluation of the energy and everything the loop needs from it.
struct Step {
    h: f64,
    loss: f64,
    energy: f64,
    grad: Vec<f64>,
    x: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

fn feature_step(task: &ExplanationTask, p: &Pipeline, x: &[f64], lambda: f64, rho: f64) -> Result<Step> {
    let crit = criterion(task, p, x)?;
    let gh = criterion_grad(p, x, &crit)?;
    let loss = sq_dist(x, &task.x0);
    let mult = lambda + rho * crit.h;
    let grad = x
        .iter()
        .zip(&task.x0)
        .zip(&gh)
        .map(|((xi, x0), g)| 2.0 * (xi - x0) + mult * g)
        .collect();
    Ok(Step {
        h: crit.h,
        loss,
        energy: loss + lambda * crit.h + 0.5 * rho * crit.h * crit.h,
        grad,
        x: x.to_vec(),
    })
}

struct LatentCtx<'a> {
    task: &'a ExplanationTask,
    p: &'a Pipeline,
    vae: &'a Vae,
    cfg: &'a MdmmConfig,
    /// Encoder mean of `x0`, the latent proximity anchor.
    anchor: Vec<f64>,
}

impl LatentCtx<'_> {
    fn step(&self, z: &[f64], lambda: f64) -> Result<Step> {
        let x = self.vae.decode(z)?;
        let crit = criterion(self.task, self.p, &x)?;
        let gh = criterion_grad(self.p, &x, &crit)?;
        let mult = lambda + self.cfg.rho * crit.h;
        let (reg, g_reg) = omega(z, &self.cfg.reg);

        let mut g_x: Vec<f64> = gh.iter().map(|g| mult * g).collect();
        let prox = match self.cfg.proximity {
            Proximity::Feature => {
                for ((g, xi), x0) in g_x.iter_mut().zip(&x).zip(&self.task.x0) {
                    *g += 2.0 * (xi - x0);
                }
                sq_dist(&x, &self.task.x0)
            }
            Proximity::Latent => sq_dist(z, &self.anchor),
        };
        let mut grad = self.vae.decoder.vjp_input(z, &g_x)?;
        for (k, g) in grad.iter_mut().enumerate() {
            *g += g_reg[k];
            if self.cfg.proximity == Proximity::Latent {
                *g += 2.0 * (z[k] - self.anchor[k]);
            }
        }
        let loss = prox + reg;
        Ok(Step {
            h: crit.h,
            loss,
            energy: loss + lambda * crit.h + 0.5 * self.cfg.rho * crit.h * crit.h,
            grad,
            x,
        })
    }
}

fn check_latent(task: &ExplanationTask, p: &Pipeline, vae: &Vae, cfg: &MdmmConfig) -> Result<()> {
    cfg.validate()?;
    task.validate(p)?;
    check_dim("VAE features vs pipeline", p.n_x(), vae.n_x())
}

/// Latent energy `E(z, λ) = ℓ + Ω + λχ + ρχ²/2` with `χ = h ∘ d`, its
/// gradient in `z`, and its derivative in `λ` (which is `χ`).
pub fn energy(
    z: &[f64],
    lambda: f64,
    task: &ExplanationTask,
    p: &Pipeline,
    vae: &Vae,
    cfg: &MdmmConfig,
) -> Result<(f64, Vec<f64>, f64)> {
    check_latent(task, p, vae, cfg)?;
    check_dim("latent point", vae.n_z, z.len())?;
    let ctx = LatentCtx {
        task,
        p,
        vae,
        cfg,
        anchor: vae.encode_mean(&task.x0)?,
    };
    let s = ctx.step(z, lambda)?;
    Ok((s.energy, s.grad, s.h))
}

/// Feature-space energy `E(x, λ) = ‖x − x0‖² + λh + ρh²/2` and its gradients.
pub fn feature_energy(
    x: &[f64],
    lambda: f64,
    task: &ExplanationTask,
    p: &Pipeline,
    cfg: &MdmmConfig,
) -> Result<(f64, Vec<f64>, f64)> {
    cfg.validate()?;
    task.validate(p)?;
    check_dim("feature point", p.n_x(), x.len())?;
    let s = feature_step(task, p, x, lambda, cfg.rho)?;
    Ok((s.energy, s.grad, s.h))
}

/// Shared MDMM loop over a primal vector `v` (either `x` or `z`).
fn mdmm<F>(start: Vec<f64>, cfg: &MdmmConfig, latent: bool, mut eval: F) -> Result<ExplanationResult>
where
    F: FnMut(&[f64], f64) -> Result<Step>,
{
    let mut v = start;
    let mut lambda = 0.0;
    let mut c = 0usize;
    let mut out = ExplanationResult {
        x_best: None,
        z_best: None,
        loss_best: f64::INFINITY,
        feasible: false,
        h_best: None,
        iterations_run: 0,
        final_lambda: 0.0,
        improvements: Vec::new(),
        trace: cfg.record_trace.then(Vec::new),
    };
    for k in 1..=cfg.max_iter {
        if c == cfg.c_max {
            break;
        }
        let s = eval(&v, lambda)?;
        if !(s.h.is_finite() && s.loss.is_finite()) || s.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("explanation energy"));
        }
        out.iterations_run = k;
        if let Some(t) = out.trace.as_mut() {
            t.push(TraceRow {
                iteration: k,
                h: s.h,
                loss: s.loss,
                lambda,
            });
        }
        if s.h <= cfg.feas_tol {
            if s.loss < cfg.u * out.loss_best {
                out.loss_best = s.loss;
                out.h_best = Some(s.h);
                out.z_best = latent.then(|| v.clone());
                out.x_best = Some(s.x);
                out.improvements.push(Improvement {
                    iteration: k,
                    loss: s.loss,
                });
                c = 0;
            } else {
                c += 1;
            }
        }
        for (vi, g) in v.iter_mut().zip(&s.grad) {
            *vi -= cfg.gamma * g;
        }
        lambda += cfg.gamma * s.h;
    }
    out.final_lambda = lambda;
    out.feasible = out.x_best.is_some();
    Ok(out)
}

/// Searches the latent space of `vae` from the encoder mean of `x0`.
pub fn cf_opt_latent(task: &ExplanationTask, p: &Pipeline, vae: &Vae, cfg: &MdmmConfig) -> Result<ExplanationResult> {
    check_latent(task, p, vae, cfg)?;
    let z0 = vae.encode_mean(&task.x0)?;
    let ctx = LatentCtx {
        task,
        p,
        vae,
        cfg,
        anchor: z0.clone(),
    };
    mdmm(z0, cfg, true, |z, l| ctx.step(z, l))
}

/// Searches the feature space directly from `x0`.
pub fn cf_opt_feature(task: &ExplanationTask, p: &Pipeline, cfg: &MdmmConfig) -> Result<ExplanationResult> {
    cfg.validate()?;
    task.validate(p)?;
    mdmm(task.x0.clone(), cfg, false, |x, l| feature_step(task, p, x, l, cfg.rho))
}
