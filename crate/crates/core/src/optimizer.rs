//! Full-batch descent on `L̂_λ` with a decreasing weight-decay schedule.
//!
//! Each stage iterates until its gradient tolerance or iteration cap; the
//! point is carried into the next (smaller-λ) stage. Backtracking steps use
//! the Armijo rule with constant `1e-4` and halving. Once the gradient norm
//! drops below `newton_switch`, Levenberg–Marquardt steps finish the stage;
//! directions of curvature `O(λ)` otherwise need `O(1/λ)` gradient iterations.
//! The switch is small enough that the basin has already been chosen by
//! gradient descent: at 3e-3 the endpoints match pure descent. After the final
//! stage converges, a few more Newton steps push the gradient well below its
//! tolerance so that balancedness holds to `O(‖g‖/λ)` at a usable precision.

use nalgebra::{Cholesky, DMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, Evaluation, LoraPoint, LossReport};
use crate::rng::{self, streams};
use crate::synthetic::{LossKind, ProblemInstance};

pub const ARMIJO_C: f64 = 1e-4;
/// Loss growth factor (relative to the initial loss) treated as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e6;
/// Cap on refinement steps after the final stage converges.
pub const POLISH_STEPS: usize = 8;
/// Refinement stops once the gradient norm is this fraction of the final tolerance.
pub const POLISH_FACTOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepRule {
    Fixed,
    Backtracking,
}

impl std::str::FromStr for StepRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(StepRule::Fixed),
            "backtracking" => Ok(StepRule::Backtracking),
            other => Err(Error::InvalidArgument(format!("unknown step rule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaStage {
    pub lambda: f64,
    pub grad_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub rank: usize,
    /// Standard deviation of initial factor entries; `None` means `1e-2/√max(m, n)`.
    pub init_scale: Option<f64>,
    pub step_rule: StepRule,
    pub base_step: f64,
    /// Iteration cap per λ stage.
    pub max_iters: usize,
    /// Tolerance for the single λ = 0 stage used when `lambda_schedule` is empty.
    pub grad_tol: f64,
    pub lambda_schedule: Vec<LambdaStage>,
    pub seeds: Vec<u64>,
    /// Trace subsampling interval (iterations).
    pub record_every: usize,
    /// Gradient norm below which damped Newton steps take over (0 disables them).
    pub newton_switch: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rank: 1,
            init_scale: None,
            step_rule: StepRule::Backtracking,
            base_step: 1.0,
            max_iters: 200_000,
            grad_tol: 1e-8,
            lambda_schedule: default_schedule(),
            seeds: (0..50).collect(),
            record_every: 10,
            newton_switch: 3e-3,
        }
    }
}

pub fn default_schedule() -> Vec<LambdaStage> {
    vec![
        LambdaStage { lambda: 1e-2, grad_tol: 1e-6 },
        LambdaStage { lambda: 1e-3, grad_tol: 1e-7 },
        LambdaStage { lambda: 1e-4, grad_tol: 1e-8 },
    ]
}

pub fn default_init_scale(m: usize, n: usize) -> f64 {
    1e-2 / (m.max(n) as f64).sqrt()
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidArgument("rank must be >= 1".into()));
        }
        if let Some(s) = self.init_scale {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::InvalidArgument(format!("init_scale must be finite and >= 0, got {s}")));
            }
        }
        if !(self.base_step > 0.0) {
            return Err(Error::InvalidArgument("base_step must be positive".into()));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::InvalidArgument("grad_tol must be positive".into()));
        }
        for w in self.lambda_schedule.windows(2) {
            if !(w[1].lambda < w[0].lambda) {
                return Err(Error::InvalidArgument("lambda schedule must be strictly decreasing".into()));
            }
        }
        for s in &self.lambda_schedule {
            if !(s.grad_tol > 0.0) || !(s.lambda >= 0.0) {
                return Err(Error::InvalidArgument("stage tolerances must be positive and λ >= 0".into()));
            }
        }
        if self.record_every == 0 {
            return Err(Error::InvalidArgument("record_every must be >= 1".into()));
        }
        Ok(())
    }

    /// Stages actually run: the schedule, or a single λ = 0 stage at `grad_tol`.
    pub fn stages(&self) -> Vec<LambdaStage> {
        if self.lambda_schedule.is_empty() {
            vec![LambdaStage { lambda: 0.0, grad_tol: self.grad_tol }]
        } else {
            self.lambda_schedule.clone()
        }
    }

    pub fn final_lambda(&self) -> f64 {
        self.stages().last().map(|s| s.lambda).unwrap_or(0.0)
    }

    pub fn final_tol(&self) -> f64 {
        self.stages().last().map(|s| s.grad_tol).unwrap_or(self.grad_tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iter: usize,
    pub stage: usize,
    pub lambda: f64,
    pub loss: f64,
    pub data_loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub point: LoraPoint,
    pub loss: LossReport,
    pub grad_norm: f64,
    pub trace: Vec<TracePoint>,
    pub iterations: usize,
    pub converged: bool,
    /// Index of the last stage entered.
    pub stage_reached: usize,
    pub seed: u64,
    pub diagnostic: Option<String>,
}

/// Factors with i.i.d. `N(0, init_scale²)` entries.
pub fn init_point(m: usize, n: usize, r: usize, init_scale: f64, seed: u64) -> Result<LoraPoint> {
    if !(init_scale >= 0.0) {
        return Err(Error::InvalidArgument(format!("init_scale must be >= 0, got {init_scale}")));
    }
    if r == 0 || r > m.min(n) {
        return Err(Error::InvalidArgument(format!("rank {r} outside 1..={}", m.min(n))));
    }
    let mut rng = rng::stream(seed, streams::INIT);
    let u = rng::normal_matrix(&mut rng, m, r, init_scale);
    let v = rng::normal_matrix(&mut rng, n, r, init_scale);
    LoraPoint::new(u, v, 0.0)
}

struct StageOutcome {
    point: LoraPoint,
    eval: Evaluation,
    converged: bool,
    diagnostic: Option<String>,
}

/// One Levenberg–Marquardt step `−(H + μI)⁻¹g` with trust-region acceptance.
///
/// `damping` carries μ between calls. Returns `None` after repeated rejections.
fn damped_newton_step(
    inst: &ProblemInstance,
    kind: LossKind,
    p: &LoraPoint,
    eval: &Evaluation,
    damping: &mut f64,
) -> Result<Option<(LoraPoint, Evaluation)>> {
    let (m, n, r) = (inst.rows(), inst.cols(), p.rank());
    let h = model::hessian_from_evaluation(inst, p, eval, kind)?;
    let g = LoraPoint { u: eval.grad_u.clone(), v: eval.grad_v.clone(), lambda: 0.0 }.to_vector();
    let scale = h.amax().max(f64::MIN_POSITIVE);
    let floor = 1e-12 * scale;
    let mut mu = *damping;
    let loss0 = eval.loss.total;
    for _ in 0..40 {
        let mut shifted_h = h.clone();
        for i in 0..shifted_h.nrows() {
            shifted_h[(i, i)] += mu;
        }
        let Some(chol) = Cholesky::new(shifted_h) else {
            mu = (mu * 4.0).max(floor);
            continue;
        };
        let step = -chol.solve(&g);
        let predicted = -(g.dot(&step) + 0.5 * step.dot(&(&h * &step)));
        let (du, dv) = model::split_direction(&step, m, n, r);
        let trial = shifted(p, &du, &dv, 1.0);
        let next = model::evaluate(inst, &trial, kind)?;
        let actual = loss0 - next.loss.total;
        // below roundoff the loss cannot rank steps; the gradient norm can
        let resolvable = predicted > 1e-13 * (1.0 + loss0.abs());
        let good = if resolvable {
            actual >= 0.1 * predicted
        } else {
            next.loss.total.is_finite() && next.grad_norm() < eval.grad_norm()
        };
        if good {
            *damping = if mu / 4.0 < floor { 0.0 } else { mu / 4.0 };
            return Ok(Some((trial, next)));
        }
        mu = (mu * 4.0).max(floor.max(1e-6 * scale));
    }
    *damping = 0.0;
    Ok(None)
}

/// Newton steps past the final tolerance, kept only while they shrink the gradient.
///
/// Balancedness at a critical point is only as tight as `‖g‖/λ`, so the last
/// stage is refined well below its stopping tolerance.
fn polish(inst: &ProblemInstance, kind: LossKind, out: &mut StageOutcome, tol: f64) -> Result<usize> {
    let mut damping = 0.0;
    let mut steps = 0;
    while steps < POLISH_STEPS && out.eval.grad_norm() > POLISH_FACTOR * tol {
        match damped_newton_step(inst, kind, &out.point, &out.eval, &mut damping)? {
            Some((trial, next)) if next.grad_norm() < out.eval.grad_norm() => {
                out.point = trial;
                out.eval = next;
                steps += 1;
            }
            _ => break,
        }
    }
    Ok(steps)
}

fn shifted(p: &LoraPoint, dir_u: &DMatrix<f64>, dir_v: &DMatrix<f64>, t: f64) -> LoraPoint {
    p.with_factors(&p.u + dir_u * t, &p.v + dir_v * t)
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    inst: &ProblemInstance,
    kind: LossKind,
    cfg: &TrainConfig,
    stage_idx: usize,
    stage: LambdaStage,
    start: LoraPoint,
    loss_ceiling: f64,
    iter_offset: &mut usize,
    trace: &mut Vec<TracePoint>,
) -> Result<StageOutcome> {
    let mut p = LoraPoint { lambda: stage.lambda, ..start };
    let mut eval = model::evaluate(inst, &p, kind)?;
    let mut step = cfg.base_step;
    let mut newton_cooldown = 0usize;
    let mut damping = 0.0;
    let newton_ok = cfg.newton_switch > 0.0 && model::dense_hessian_fits(inst, p.rank());
    let push = |trace: &mut Vec<TracePoint>, it: usize, e: &Evaluation| {
        trace.push(TracePoint {
            iter: it,
            stage: stage_idx,
            lambda: stage.lambda,
            loss: e.loss.total,
            data_loss: e.loss.data_loss,
            grad_norm: e.grad_norm(),
        });
    };
    for it in 0..cfg.max_iters {
        let gnorm = eval.grad_norm();
        if it % cfg.record_every == 0 {
            push(trace, *iter_offset + it, &eval);
        }
        if gnorm <= stage.grad_tol {
            *iter_offset += it;
            push(trace, *iter_offset, &eval);
            return Ok(StageOutcome { point: p, eval, converged: true, diagnostic: None });
        }
        if !eval.loss.total.is_finite() || eval.loss.total > loss_ceiling {
            *iter_offset += it;
            return Ok(StageOutcome {
                point: p,
                diagnostic: Some(format!(
                    "diverged at iteration {}: loss {:.3e} exceeds {:.0e}x the initial loss",
                    *iter_offset, eval.loss.total, DIVERGENCE_FACTOR
                )),
                eval,
                converged: false,
            });
        }

        if newton_ok && gnorm <= cfg.newton_switch && newton_cooldown == 0 {
            match damped_newton_step(inst, kind, &p, &eval, &mut damping)? {
                Some((trial, next)) => {
                    p = trial;
                    eval = next;
                    continue;
                }
                None => newton_cooldown = 20,
            }
        }
        newton_cooldown = newton_cooldown.saturating_sub(1);

        let (gu, gv) = (eval.grad_u.clone(), eval.grad_v.clone());
        match cfg.step_rule {
            StepRule::Fixed => {
                p = shifted(&p, &gu, &gv, -cfg.base_step);
                eval = model::evaluate(inst, &p, kind)?;
            }
            StepRule::Backtracking => {
                let g2 = gnorm * gnorm;
                let mut t = (step * 2.0).min(cfg.base_step * 1e6);
                let mut accepted = None;
                while t > 1e-30 {
                    let trial = shifted(&p, &gu, &gv, -t);
                    let l = model::loss(inst, &trial, kind)?.total;
                    if l <= eval.loss.total - ARMIJO_C * t * g2 {
                        accepted = Some(trial);
                        break;
                    }
                    t *= 0.5;
                }
                match accepted {
                    Some(trial) => {
                        step = t;
                        p = trial;
                        eval = model::evaluate(inst, &p, kind)?;
                    }
                    None => {
                        *iter_offset += it;
                        push(trace, *iter_offset, &eval);
                        return Ok(StageOutcome {
                            point: p,
                            diagnostic: Some(format!(
                                "line search stalled at gradient norm {gnorm:.3e} (stage tol {:.1e})",
                                stage.grad_tol
                            )),
                            eval,
                            converged: false,
                        });
                    }
                }
            }
        }
    }
    *iter_offset += cfg.max_iters;
    push(trace, *iter_offset, &eval);
    let converged = eval.grad_norm() <= stage.grad_tol;
    let diagnostic = (!converged).then(|| {
        format!(
            "stage {stage_idx} hit the iteration cap {} at gradient norm {:.3e} (tol {:.1e})",
            cfg.max_iters,
            eval.grad_norm(),
            stage.grad_tol
        )
    });
    Ok(StageOutcome { point: p, eval, converged, diagnostic })
}

/// Runs the λ schedule from the seed's initialization.
pub fn train(inst: &ProblemInstance, cfg: &TrainConfig, kind: LossKind, seed: u64) -> Result<RunResult> {
    cfg.validate()?;
    let (m, n) = (inst.rows(), inst.cols());
    if cfg.rank > m.min(n) {
        return Err(Error::InvalidArgument(format!("rank {} exceeds min(m, n) = {}", cfg.rank, m.min(n))));
    }
    let scale = cfg.init_scale.unwrap_or_else(|| default_init_scale(m, n));
    let stages = cfg.stages();
    let mut point = init_point(m, n, cfg.rank, scale, seed)?;
    point.lambda = stages[0].lambda;
    let init_eval = model::evaluate(inst, &point, kind)?;
    if cfg.max_iters == 0 {
        return Ok(RunResult {
            grad_norm: init_eval.grad_norm(),
            loss: init_eval.loss,
            point,
            trace: Vec::new(),
            iterations: 0,
            converged: false,
            stage_reached: 0,
            seed,
            diagnostic: Some("max_iters = 0: returning the initialization".into()),
        });
    }
    let ceiling = DIVERGENCE_FACTOR * init_eval.loss.total.abs().max(f64::MIN_POSITIVE);
    let mut trace = Vec::new();
    let mut iterations = 0usize;
    let mut outcome = None;
    for (idx, stage) in stages.iter().enumerate() {
        let out = run_stage(inst, kind, cfg, idx, *stage, point.clone(), ceiling, &mut iterations, &mut trace)?;
        point = out.point.clone();
        let failed = out.diagnostic.as_deref().is_some_and(|d| d.starts_with("diverged"));
        outcome = Some((idx, out));
        if failed {
            break;
        }
    }
    let (stage_reached, mut out) = outcome.expect("at least one stage");
    let last = stage_reached + 1 == stages.len();
    let converged = last && out.converged;
    if converged && cfg.newton_switch > 0.0 && model::dense_hessian_fits(inst, cfg.rank) {
        let steps = polish(inst, kind, &mut out, stages[stage_reached].grad_tol)?;
        if steps > 0 {
            iterations += steps;
            trace.push(TracePoint {
                iter: iterations,
                stage: stage_reached,
                lambda: stages[stage_reached].lambda,
                loss: out.eval.loss.total,
                data_loss: out.eval.loss.data_loss,
                grad_norm: out.eval.grad_norm(),
            });
        }
    }
    let diagnostic = match (&out.diagnostic, last) {
        (Some(d), _) => Some(d.clone()),
        (None, false) => Some("stopped before the final stage".into()),
        (None, true) => None,
    };
    Ok(RunResult {
        grad_norm: out.eval.grad_norm(),
        loss: out.eval.loss,
        point: out.point,
        trace,
        iterations,
        converged,
        stage_reached,
        seed,
        diagnostic,
    })
}

/// One run per seed in `cfg.seeds`, returned in seed order.
pub fn multi_seed(inst: &ProblemInstance, cfg: &TrainConfig, kind: LossKind) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidArgument("seed list is empty".into()));
    }
    cfg.seeds
        .par_iter()
        .map(|&seed| train(inst, cfg, kind, seed))
        .collect()
}

/// Lowest final data loss over a set of runs.
pub fn best_data_loss(runs: &[RunResult]) -> Option<f64> {
    runs.iter().map(|r| r.loss.data_loss).min_by(|a, b| a.total_cmp(b))
}
