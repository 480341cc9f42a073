//! Accelerated proximal gradient for the lifted program.
//!
//! Penalty stages minimise `fit + rho * hinge + beta * sum ||w_g||` for an
//! increasing `rho` schedule, each warm-started from the last. A final
//! polish stage replaces the hinge by the exact constraint: its prox is
//! `shrink(P_K(u))`, which is exact because every constraint set is a cone.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convex_model::{pairwise_sum, ConvexModel, ConvexPoint, FeasibilityReport, PointDocument};
use crate::error::{Error, Result};

/// Block soft-thresholding: `(1 - tau / ||u||)_+ u`, zero when `||u|| <= tau`.
pub fn prox_group(u: &[f64], tau: f64) -> Vec<f64> {
    assert!(tau >= 0.0, "tau must be >= 0");
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= tau {
        return vec![0.0; u.len()];
    }
    let c = 1.0 - tau / norm;
    u.iter().map(|v| c * v).collect()
}

fn shrink_in_place(u: &mut [f64], tau: f64) {
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= tau {
        u.iter_mut().for_each(|v| *v = 0.0);
    } else {
        let c = 1.0 - tau / norm;
        u.iter_mut().for_each(|v| *v *= c);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepRule {
    /// `0.95 / L` from a power-iteration estimate
    Fixed,
    /// start from the fixed step and halve whenever a plain step fails to descend
    Backtracking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveConfig {
    pub rho_schedule: Vec<f64>,
    /// iteration cap of each penalty stage
    pub max_iter: usize,
    pub tol_rel: f64,
    pub tol_feas: f64,
    pub step_rule: StepRule,
    /// run the exact-constraint stage after the penalty stages
    pub polish: bool,
    pub polish_max_iter: usize,
    /// polish stops once `gap <= gap_tol * (1 + |primal|)`
    pub gap_tol: f64,
    /// iterations between certificate evaluations in the polish stage
    pub gap_check_every: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            rho_schedule: vec![1.0, 10.0, 100.0, 1000.0],
            max_iter: 300,
            tol_rel: 1e-12,
            tol_feas: 1e-10,
            step_rule: StepRule::Backtracking,
            polish: true,
            polish_max_iter: 20_000,
            gap_tol: 1e-9,
            gap_check_every: 50,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_rel > 0.0 && self.tol_feas > 0.0 && self.gap_tol > 0.0) {
            return Err(Error::InvalidArgument("tolerances must be > 0".into()));
        }
        if self.rho_schedule.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidArgument("rho values must be finite and > 0".into()));
        }
        if self.rho_schedule.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("rho schedule must be strictly increasing".into()));
        }
        if self.gap_check_every == 0 {
            return Err(Error::InvalidArgument("gap_check_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// One accepted iterate. Shared with the SGD trainer, which writes
/// `stage = "sgd"` and one record per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub stage: String,
    pub rho: Option<f64>,
    pub objective: f64,
    /// largest constraint violation; absent for networks
    pub feasibility: Option<f64>,
    pub elapsed_s: f64,
}

pub fn write_trace_jsonl(path: impl AsRef<Path>, records: &[TraceRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Dual lower bound on the optimum of the lifted program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub lower_bound: f64,
    pub primal_value: f64,
    pub gap: f64,
    /// dual point `s * (y - predict)`
    pub scaled_dual: Vec<f64>,
    /// the bound obtained with zero cone multipliers and `s = min(1, ...)`
    pub lower_bound_zero_multipliers: f64,
    /// max constraint violation of the primal point
    pub primal_violation: f64,
}

fn dual_value(v: &Array1<f64>, y: &Array1<f64>) -> f64 {
    let d = v - y;
    -0.5 * d.dot(&d) + 0.5 * y.dot(y)
}

/// Dual lower bound from the residual direction `u = y - predict(p)`.
///
/// The dual constraint of group `g` is `||P_Kg(B_g^T v)|| <= beta`, where
/// `B_g` is the signed block and `K_g` the group's cone; the projection is
/// the optimal choice of cone multipliers. The scale `s` maximises the dual
/// objective along `u` subject to that constraint. The zero-multiplier
/// variant (constraint `||B_g^T v|| <= beta`, `s = min(1, ...)`) is reported
/// alongside.
pub fn certify(model: &ConvexModel, p: &ConvexPoint) -> Result<Certificate> {
    let (primal, rep) = model.objective_constrained(p)?;
    let dual = dual_norms(model, p);
    let y = model.y();
    let max_proj = dual.projected.iter().copied().fold(0.0, f64::max);
    let (lower, scaled) = scaled_bound(model, &dual.u, max_proj);

    let max_plain = dual.plain.iter().copied().fold(0.0, f64::max);
    let s0 = if max_plain > 0.0 { (model.beta() / max_plain).min(1.0) } else { 1.0 };
    let lower0 = dual_value(&(&dual.u * s0), y);

    Ok(Certificate {
        lower_bound: lower,
        primal_value: primal,
        gap: primal - lower,
        scaled_dual: scaled.to_vec(),
        lower_bound_zero_multipliers: lower0,
        primal_violation: rep.max_violation,
    })
}

struct DualNorms {
    /// residual direction `y - predict(p)`
    u: Array1<f64>,
    /// `||P_Kg(B_g^T u)||` per group
    projected: Vec<f64>,
    /// `||B_g^T u||` per group
    plain: Vec<f64>,
}

fn dual_norms(model: &ConvexModel, p: &ConvexPoint) -> DualNorms {
    let u = model.y() - &model.predict_unchecked(p);
    let q = model.cell_correlations(&u);
    let nc = model.num_cells();
    let (projected, plain) = model
        .groups()
        .par_iter()
        .enumerate()
        .map(|(g, id)| {
            let coef = id.side.coefficient();
            let a: Vec<f64> = q.row(g % nc).iter().map(|v| coef * v).collect();
            let plain = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            if plain == 0.0 {
                return (0.0, 0.0);
            }
            let pa = model.project_group(g, &a);
            (pa.iter().map(|v| v * v).sum::<f64>().sqrt(), plain)
        })
        .unzip();
    DualNorms { u, projected, plain }
}

/// Best dual value along `u` when the largest group dual norm is `max_proj`.
fn scaled_bound(model: &ConvexModel, u: &Array1<f64>, max_proj: f64) -> (f64, Array1<f64>) {
    let y = model.y();
    let uu = u.dot(u);
    let s_cap = if max_proj > 0.0 { model.beta() / max_proj } else { f64::INFINITY };
    let s_best = if uu > 0.0 { (u.dot(y) / uu).max(0.0) } else { 0.0 };
    let scaled = u * s_best.min(s_cap);
    (dual_value(&scaled, y), scaled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub rho: Option<f64>,
    pub iterations: usize,
    pub final_objective: f64,
    pub feasibility: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct ConvexSolution {
    pub point: ConvexPoint,
    /// `fit + beta * sum ||w_g||` at the final point
    pub objective: f64,
    pub feasibility: FeasibilityReport,
    pub certificate: Certificate,
    pub trace: Vec<TraceRecord>,
    pub stages: Vec<StageSummary>,
    pub elapsed_s: f64,
}

#[derive(Serialize, Deserialize)]
pub struct SolutionDocument {
    pub objective: f64,
    pub feasibility: FeasibilityReport,
    pub certificate: Certificate,
    pub stages: Vec<StageSummary>,
    pub elapsed_s: f64,
    pub point: PointDocument,
}

impl ConvexSolution {
    pub fn to_document(&self, model: &ConvexModel) -> Result<SolutionDocument> {
        Ok(SolutionDocument {
            objective: self.objective,
            feasibility: self.feasibility,
            certificate: self.certificate.clone(),
            stages: self.stages.clone(),
            elapsed_s: self.elapsed_s,
            point: model.point_to_document(&self.point)?,
        })
    }
}

#[derive(Clone, Copy)]
enum Mode {
    Penalty(f64),
    Exact,
}

impl Mode {
    fn name(self) -> String {
        match self {
            Mode::Penalty(_) => "penalty".into(),
            Mode::Exact => "polish".into(),
        }
    }

    fn rho(self) -> Option<f64> {
        match self {
            Mode::Penalty(r) => Some(r),
            Mode::Exact => None,
        }
    }
}

fn objective(model: &ConvexModel, p: &ConvexPoint, mode: Mode) -> Result<f64> {
    match mode {
        Mode::Penalty(rho) => model.objective_penalized(p, rho),
        Mode::Exact => Ok(model.data_fit(p)? + model.regularizer(p)),
    }
}

/// Gradient step from `y` followed by the mode's prox.
fn prox_step(model: &ConvexModel, y: &ConvexPoint, step: f64, mode: Mode) -> ConvexPoint {
    let rho = match mode {
        Mode::Penalty(r) => r,
        Mode::Exact => 0.0,
    };
    let r = model.predict_unchecked(y) - model.y();
    let grad = model.grad_from_residual(y, &r, rho);
    let mut out = y.combine(1.0, &grad, -step);
    let tau = step * model.beta();
    let d = model.d();
    out.coeffs
        .as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(g, u)| match mode {
            Mode::Penalty(_) => shrink_in_place(u, tau),
            Mode::Exact => {
                // ||P_K(u)|| <= ||u||, so small blocks shrink to zero anyway
                if u.iter().map(|v| v * v).sum::<f64>() <= tau * tau {
                    u.iter_mut().for_each(|v| *v = 0.0);
                    return;
                }
                let pu = model.project_group(g, u);
                u.copy_from_slice(&pu);
                shrink_in_place(u, tau);
            }
        });
    out
}

struct StageOutcome {
    point: ConvexPoint,
    value: f64,
    iterations: usize,
    step: f64,
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    model: &ConvexModel,
    x0: ConvexPoint,
    mode: Mode,
    step0: f64,
    max_iter: usize,
    cfg: &SolveConfig,
    start: &Instant,
    trace: &mut Vec<TraceRecord>,
) -> Result<StageOutcome> {
    let stage = mode.name();
    let rho = mode.rho();
    let mut x = x0;
    let mut fx = objective(model, &x, mode)?;
    if !fx.is_finite() {
        return Err(Error::Diverged { stage, iter: 0 });
    }
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut step = step0;
    let mut halvings = 0;
    let mut accepted = 0;
    let mut iter = 0;
    while iter < max_iter {
        iter += 1;
        let cand = prox_step(model, &y, step, mode);
        let fc = objective(model, &cand, mode)?;
        if !fc.is_finite() || !cand.is_finite() {
            return Err(Error::Diverged { stage, iter });
        }
        if fc > fx {
            if t > 1.0 {
                // adaptive restart: drop momentum and retry from x
                y = x.clone();
                t = 1.0;
                continue;
            }
            if cfg.step_rule == StepRule::Backtracking && halvings < 40 {
                step *= 0.5;
                halvings += 1;
                continue;
            }
            break;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = cand.combine(1.0 + (t - 1.0) / t_next, &x, -(t - 1.0) / t_next);
        t = t_next;
        let decrease = fx - fc;
        x = cand;
        fx = fc;
        accepted += 1;
        let feas = model.feasibility(&x)?.max_violation;
        trace.push(TraceRecord {
            iter: accepted,
            stage: stage.clone(),
            rho,
            objective: fx,
            feasibility: Some(feas),
            elapsed_s: start.elapsed().as_secs_f64(),
        });
        match mode {
            Mode::Penalty(_) => {
                if decrease <= cfg.tol_rel * (1.0 + fx.abs()) {
                    break;
                }
            }
            Mode::Exact => {
                if accepted % cfg.gap_check_every == 0 {
                    let cert = certify(model, &x)?;
                    if cert.gap <= cfg.gap_tol * (1.0 + cert.primal_value.abs()) {
                        break;
                    }
                }
                if decrease == 0.0 {
                    break;
                }
            }
        }
    }
    Ok(StageOutcome {
        point: x,
        value: fx,
        iterations: accepted,
        step,
    })
}

/// Runs the penalty stages, then the exact polish stage, and certifies the
/// result.
pub fn solve(model: &ConvexModel, cfg: &SolveConfig, p0: Option<&ConvexPoint>) -> Result<ConvexSolution> {
    cfg.validate()?;
    let start = Instant::now();
    let mut x = match p0 {
        Some(p) => {
            model.check_point(p)?;
            p.clone()
        }
        None => model.zero_point(),
    };
    let l_fit = model.lipschitz_estimate(30);
    let l_c = model.max_constraint_frob2();
    let mut trace = Vec::new();
    let mut stages = Vec::new();
    trace.push(TraceRecord {
        iter: 0,
        stage: "init".into(),
        rho: None,
        objective: model.data_fit(&x)? + model.regularizer(&x),
        feasibility: Some(model.feasibility(&x)?.max_violation),
        elapsed_s: 0.0,
    });

    for &rho in &cfg.rho_schedule {
        let l = l_fit + rho * l_c;
        if l == 0.0 {
            break;
        }
        let out = run_stage(model, x, Mode::Penalty(rho), 0.95 / l, cfg.max_iter, cfg, &start, &mut trace)?;
        let feas = model.feasibility(&out.point)?.max_violation;
        stages.push(StageSummary {
            stage: "penalty".into(),
            rho: Some(rho),
            iterations: out.iterations,
            final_objective: out.value,
            feasibility: feas,
            step: out.step,
        });
        x = out.point;
        if feas <= cfg.tol_feas {
            break;
        }
    }

    if cfg.polish && l_fit > 0.0 {
        // start the exact stage from a feasible point
        let d = model.d();
        x.coeffs
            .as_slice_mut()
            .expect("standard layout")
            .par_chunks_mut(d)
            .enumerate()
            .for_each(|(g, u)| {
                if u.iter().any(|&v| v != 0.0) {
                    let pu = model.project_group(g, u);
                    u.copy_from_slice(&pu);
                }
            });
        let out = run_stage(model, x, Mode::Exact, 0.95 / l_fit, cfg.polish_max_iter, cfg, &start, &mut trace)?;
        stages.push(StageSummary {
            stage: "polish".into(),
            rho: None,
            iterations: out.iterations,
            final_objective: out.value,
            feasibility: model.feasibility(&out.point)?.max_violation,
            step: out.step,
        });
        x = out.point;
    }

    let (objective, feasibility) = model.objective_constrained(&x)?;
    let certificate = certify(model, &x)?;
    Ok(ConvexSolution {
        point: x,
        objective,
        feasibility,
        certificate,
        trace,
        stages,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

/// Sum of group norms in a fixed order; used by callers that need a
/// reproducible reduction.
pub fn group_norm_sum(p: &ConvexPoint) -> f64 {
    pairwise_sum(&p.group_norms())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prox_closed_forms() {
        assert_eq!(prox_group(&[0.0, 0.0], 3.0), vec![0.0, 0.0]);
        assert_eq!(prox_group(&[2.0, 0.0], 1.0), vec![1.0, 0.0]);
        assert_eq!(prox_group(&[0.9, 0.0], 1.0), vec![0.0, 0.0]);
        // tie maps to zero
        assert_eq!(prox_group(&[0.6, 0.8], 1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        assert!(SolveConfig::default().validate().is_ok());
        let bad = SolveConfig {
            rho_schedule: vec![10.0, 1.0],
            ..SolveConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SolveConfig {
            tol_rel: 0.0,
            ..SolveConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
