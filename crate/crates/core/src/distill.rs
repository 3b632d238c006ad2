//! Stage two: a one-step student `x̂₁ᵗ = x₀ + v_φ(x₀, t)` whose implied
//! intermediate states `x̂_t = x₀ + t·v_φ(x₀, t)` follow the teacher's PF-ODE.
//!
//! With `s = t + dt` and `k` the teacher slope at `(x̂_t, t)`, the objectives are
//!
//! * trajectory: `‖v_φ(s) − SG[v_φ(t) + (dt/s)(k − v_φ(t))]‖²`
//! * PINN:       `‖(s/dt)(v_φ(s) − v_φ(t)) + v_φ(t) − SG[k]‖²`
//! * BOOT:       `(1/λ²)‖x_φ(s) − SG[x_φ(t) + λ(x_θ − x_φ(t))]‖²` with
//!   `x_φ = x₀ + v_φ`, `x_θ = x̂_t + (1−t)k`, `λ = 1 − t(1−s)/(s(1−t))`
//!
//! plus `λ_align·‖(1−t)(v_φ(t) − v_θ(x̂_t, t))‖²` and
//! `λ_BC·‖v_φ(x₀, 0) − v_θ(x₀, 0)‖²`. All norms are means over batch and
//! elements. The teacher is a constant: it is evaluated outside the tape, so
//! `x̂_t` carries no gradient into it.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::time::Instant;

use crate::autodiff::{Graph, Var};
use crate::degradation::DegradationSpec;
use crate::error::{Error, Result};
use crate::flow::{check_t_range, condition_batch, sample_time, Conditioned, DataSource, FlowConfig};
use crate::model::{ArchSpec, ParamSet, ParamVars, VelocityModel};
use crate::optim::{ema_update, OptimizerState, ParamGrads};
use crate::random::{seeded, SeededRng};
use crate::solvers::{teacher_slope_with, SolverKind, VelocityField};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillVariant {
    Trajectory,
    Pinn,
    Boot,
}

impl DistillVariant {
    pub fn name(self) -> &'static str {
        match self {
            DistillVariant::Trajectory => "trajectory",
            DistillVariant::Pinn => "pinn",
            DistillVariant::Boot => "boot",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "trajectory" => DistillVariant::Trajectory,
            "pinn" => DistillVariant::Pinn,
            "boot" => DistillVariant::Boot,
            other => {
                return Err(Error::Config(format!(
                    "unknown distillation variant {other:?} (expected trajectory, pinn or boot)"
                )))
            }
        })
    }
}

impl fmt::Display for DistillVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub dt: f64,
    pub lambda_align: f64,
    pub lambda_bc: f64,
    pub variant: DistillVariant,
    /// Scheme whose one-step slope is the teacher target.
    pub slope: SolverKind,
    /// Must match the teacher's stage-one settings.
    pub sigma_p: f64,
    pub degradation: Option<DegradationSpec>,
    pub t_min: f64,
    pub t_max: f64,
    pub batch: usize,
    pub iterations: usize,
    pub lr: f64,
    pub warmup: u64,
    pub ema_ratio: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    /// dt = 0.05, Midpoint slope, λ_align = 0.01, λ_BC = 0.1, trajectory loss.
    fn default() -> Self {
        Self::for_flow(&FlowConfig::default())
    }
}

impl DistillConfig {
    /// Defaults with the perturbation, degradation and time range of a teacher run.
    pub fn for_flow(flow: &FlowConfig) -> Self {
        Self {
            dt: 0.05,
            lambda_align: 0.01,
            lambda_bc: 0.1,
            variant: DistillVariant::Trajectory,
            slope: SolverKind::Midpoint,
            sigma_p: flow.sigma_p,
            degradation: flow.degradation,
            t_min: flow.t_min,
            t_max: flow.t_max,
            batch: flow.batch,
            iterations: 10_000,
            lr: flow.lr,
            warmup: flow.warmup,
            ema_ratio: flow.ema_ratio,
            seed: flow.seed,
        }
    }

    /// Upper end of the `t` draw, clamped so that `t + dt <= 1`.
    pub fn effective_t_max(&self) -> f64 {
        self.t_max.min(1.0 - self.dt)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt < 1.0) {
            return Err(Error::Config(format!("dt = {} must lie in (0, 1)", self.dt)));
        }
        for (name, v) in [("lambda_align", self.lambda_align), ("lambda_bc", self.lambda_bc)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if self.slope == SolverKind::Rk45 {
            return Err(Error::Config("teacher slope must be euler, midpoint, heun or ralston".into()));
        }
        if !(0.0..=1.0).contains(&self.sigma_p) {
            return Err(Error::Config(format!("perturbation std {} outside [0, 1]", self.sigma_p)));
        }
        if let Some(d) = &self.degradation {
            d.validate()?;
        }
        check_t_range(self.t_min, self.t_max)?;
        if self.t_min >= self.effective_t_max() {
            return Err(Error::Config(format!(
                "t_min = {} leaves no room below 1 - dt = {}",
                self.t_min,
                1.0 - self.dt
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema_ratio) {
            return Err(Error::Config(format!("EMA ratio {} outside [0, 1)", self.ema_ratio)));
        }
        Ok(())
    }
}

/// `x̂₁ᵗ = x₀ + v(x₀, t)`.
pub fn student_one_step(student: &dyn VelocityField, x0: &Tensor, cond: &Tensor, t: f64) -> Result<Tensor> {
    check_unit(t)?;
    x0.add(&student.velocity(x0, cond, &vec![t; x0.batch()])?)
}

/// `x̂_t = x₀ + t·v(x₀, t)`.
pub fn student_intermediate(student: &dyn VelocityField, x0: &Tensor, cond: &Tensor, t: f64) -> Result<Tensor> {
    check_unit(t)?;
    x0.axpy(t, &student.velocity(x0, cond, &vec![t; x0.batch()])?)
}

fn check_unit(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Range(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// `λ = 1 − t(1−s)/(s(1−t))` with `s = t + dt`, which simplifies to `dt/(s(1−t))`.
pub fn boot_lambda(t: f64, dt: f64) -> Result<f64> {
    let s = t + dt;
    if !(t < 1.0 && s <= 1.0 + 1e-12) {
        return Err(Error::Range(format!("BOOT weight needs t < 1 and t + dt <= 1 (t = {t}, dt = {dt})")));
    }
    let lambda = 1.0 - t * (1.0 - s) / (s * (1.0 - t));
    if lambda == 0.0 || !lambda.is_finite() {
        return Err(Error::Config(format!("degenerate BOOT weight at t = {t}, dt = {dt}")));
    }
    Ok(lambda)
}

fn check_step(t: &[f64], dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("dt = {dt} must be positive")));
    }
    t.iter()
        .map(|&ti| {
            let s = ti + dt;
            if s > 1.0 + 1e-12 {
                Err(Error::Range(format!("s = t + dt = {s} exceeds 1")))
            } else {
                Ok(s)
            }
        })
        .collect()
}

fn mean_square(g: &mut Graph, r: Var) -> Var {
    let sq = g.square(r);
    g.mean(sq)
}

/// Records the distillation term. `v_t` is the live student velocity at `t`,
/// `v_t_sg` its stop-gradient copy, `v_s` the live velocity at `s = t + dt`
/// and `k` the teacher slope.
pub fn record_distill_loss(
    g: &mut Graph,
    variant: DistillVariant,
    v_t: Var,
    v_t_sg: Var,
    v_s: Var,
    k: Var,
    t: &[f64],
    dt: f64,
) -> Result<Var> {
    let s = check_step(t, dt)?;
    match variant {
        DistillVariant::Trajectory | DistillVariant::Boot => {
            let w: Vec<f64> = s.iter().map(|si| dt / si).collect();
            let keep: Vec<f64> = w.iter().map(|wi| 1.0 - wi).collect();
            let a = g.scale_rows(v_t_sg, &keep)?;
            let b = g.scale_rows(k, &w)?;
            let target = g.add(a, b)?;
            let r = g.sub(v_s, target)?;
            let r = if variant == DistillVariant::Boot {
                let inv: Vec<f64> = t.iter().map(|&ti| boot_lambda(ti, dt).map(|l| 1.0 / l)).collect::<Result<_>>()?;
                g.scale_rows(r, &inv)?
            } else {
                r
            };
            Ok(mean_square(g, r))
        }
        DistillVariant::Pinn => {
            let ratio: Vec<f64> = s.iter().map(|si| si / dt).collect();
            let d = g.sub(v_s, v_t)?;
            let d = g.scale_rows(d, &ratio)?;
            let d = g.add(d, v_t)?;
            let r = g.sub(d, k)?;
            Ok(mean_square(g, r))
        }
    }
}

/// Records `‖(1−t)(v_φ(t) − v_θ)‖²`.
pub fn record_align_loss(g: &mut Graph, v_phi: Var, v_theta: Var, t: &[f64]) -> Result<Var> {
    let w: Vec<f64> = t.iter().map(|ti| 1.0 - ti).collect();
    let d = g.sub(v_phi, v_theta)?;
    let r = g.scale_rows(d, &w)?;
    Ok(mean_square(g, r))
}

/// Records `‖v_φ(x₀, 0) − v_θ(x₀, 0)‖²`.
pub fn record_boundary_loss(g: &mut Graph, v_phi0: Var, v_theta0: Var) -> Result<Var> {
    let r = g.sub(v_phi0, v_theta0)?;
    Ok(mean_square(g, r))
}

/// Distillation loss from plain velocity tensors.
pub fn distill_loss(
    variant: DistillVariant,
    v_t: &Tensor,
    v_s: &Tensor,
    k: &Tensor,
    t: &[f64],
    dt: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let vt = g.constant(v_t.clone());
    let vs = g.constant(v_s.clone());
    let kv = g.constant(k.clone());
    let l = record_distill_loss(&mut g, variant, vt, vt, vs, kv, t, dt)?;
    Ok(g.value(l).item())
}

pub fn align_loss(v_phi: &Tensor, v_theta: &Tensor, t: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(v_phi.clone());
    let b = g.constant(v_theta.clone());
    let l = record_align_loss(&mut g, a, b, t)?;
    Ok(g.value(l).item())
}

pub fn boundary_loss(v_phi0: &Tensor, v_theta0: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(v_phi0.clone());
    let b = g.constant(v_theta0.clone());
    let l = record_boundary_loss(&mut g, a, b)?;
    Ok(g.value(l).item())
}

/// Values of the three terms and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillTerms {
    pub distill: f64,
    pub align: f64,
    pub bc: f64,
    pub total: f64,
}

/// `L_distill + λ_align·L_align + λ_BC·L_BC`.
pub fn total_loss(distill: f64, align: f64, bc: f64, cfg: &DistillConfig) -> f64 {
    distill + cfg.lambda_align * align + cfg.lambda_bc * bc
}

/// Source points, conditions and per-item times for one student batch.
#[derive(Debug, Clone)]
pub struct StudentBatch {
    pub x0: Tensor,
    pub cond: Tensor,
    pub t: Vec<f64>,
}

/// Draws conditions, fresh `ε` and `t ~ U[t_min, min(t_max, 1 − dt)]`.
pub fn draw_student_batch(x1: &Tensor, cfg: &DistillConfig, rng: &mut SeededRng) -> Result<StudentBatch> {
    if x1.batch() == 0 {
        return Err(Error::Usage("empty batch".into()));
    }
    let Conditioned { x0, cond } = condition_batch(x1, cfg.degradation.as_ref(), cfg.sigma_p, rng)?;
    let t_max = cfg.effective_t_max();
    let t = (0..x1.batch()).map(|_| sample_time(rng, cfg.t_min, t_max)).collect();
    Ok(StudentBatch { x0, cond, t })
}

/// Graph handles of the recorded terms.
#[derive(Debug, Clone, Copy)]
pub struct TermVars {
    pub distill: Var,
    pub align: Var,
    pub bc: Var,
    pub total: Var,
}

/// Records the full objective for the student parameters `live`.
///
/// Every stop-gradient bracket (the `v_φ(t)` inside the trajectory and BOOT
/// targets, and the `x̂_t` handed to the teacher) is evaluated with `bracket`
/// when given, otherwise with a detached copy of the live evaluation.
pub fn record_objective(
    g: &mut Graph,
    arch: &ArchSpec,
    live: &ParamVars,
    bracket: Option<&ParamVars>,
    teacher: &dyn VelocityField,
    batch: &StudentBatch,
    cfg: &DistillConfig,
) -> Result<TermVars> {
    let StudentBatch { x0, cond, t } = batch;
    let s = check_step(t, cfg.dt)?;
    let x0v = g.constant(x0.clone());
    let cv = g.constant(cond.clone());
    let v_t = arch.forward(g, live, x0v, cv, t)?;
    let v_s = arch.forward(g, live, x0v, cv, &s)?;
    let v_t_sg = match bracket {
        None => g.detach(v_t),
        Some(b) => {
            let v = arch.forward(g, b, x0v, cv, t)?;
            g.detach(v)
        }
    };

    let x_t = x0.add(&g.value(v_t_sg).scale_rows(t)?)?;
    let k1 = teacher.velocity(&x_t, cond, t)?;
    let k = teacher_slope_with(teacher, &x_t, cond, t, cfg.dt, cfg.slope, &k1)?;
    let kv = g.constant(k);
    let distill = record_distill_loss(g, cfg.variant, v_t, v_t_sg, v_s, kv, t, cfg.dt)?;

    let k1v = g.constant(k1);
    let align = record_align_loss(g, v_t, k1v, t)?;

    let zeros = vec![0.0; x0.batch()];
    let v0 = arch.forward(g, live, x0v, cv, &zeros)?;
    let teacher0 = g.constant(teacher.velocity(x0, cond, &zeros)?);
    let bc = record_boundary_loss(g, v0, teacher0)?;

    let a = g.scale(align, cfg.lambda_align);
    let b = g.scale(bc, cfg.lambda_bc);
    let total = g.add(distill, a)?;
    let total = g.add(total, b)?;
    Ok(TermVars { distill, align, bc, total })
}

/// Objective value and gradients with respect to the student's live parameters.
///
/// With `sg_override`, the stop-gradient brackets use those parameters
/// instead, which makes the objective an ordinary function of the live
/// weights that finite differences can check.
pub fn distill_objective(
    student: &VelocityModel,
    teacher: &dyn VelocityField,
    batch: &StudentBatch,
    cfg: &DistillConfig,
    sg_override: Option<&ParamSet>,
) -> Result<(DistillTerms, ParamGrads)> {
    let mut g = Graph::new();
    let live = student.params().register(&mut g);
    let bracket = sg_override.map(|p| p.constants(&mut g));
    let vars = record_objective(&mut g, student.arch(), &live, bracket.as_ref(), teacher, batch, cfg)?;
    let grads = g.backward(vars.total)?;
    let terms = DistillTerms {
        distill: g.value(vars.distill).item(),
        align: g.value(vars.align).item(),
        bc: g.value(vars.bc).item(),
        total: g.value(vars.total).item(),
    };
    Ok((terms, g.param_grads(&grads)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillTraceRow {
    pub iteration: usize,
    pub distill: f64,
    pub align: f64,
    pub bc: f64,
    pub total: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug)]
pub struct DistillRun {
    pub student: VelocityModel,
    pub trace: Vec<DistillTraceRow>,
    pub aborted: Option<Error>,
}

/// Student initialized from the teacher's EMA weights.
pub fn init_student(teacher: &VelocityModel) -> Result<VelocityModel> {
    VelocityModel::from_parts(teacher.arch().clone(), teacher.ema().clone(), teacher.ema().clone(), false)
}

/// Trains a student initialized from `teacher`.
pub fn distill_train(teacher: &VelocityModel, source: &mut dyn DataSource, cfg: &DistillConfig) -> Result<DistillRun> {
    distill_train_from(init_student(teacher)?, teacher, source, cfg)
}

/// Continues training `student` against `teacher`.
pub fn distill_train_from(
    mut student: VelocityModel,
    teacher: &VelocityModel,
    source: &mut dyn DataSource,
    cfg: &DistillConfig,
) -> Result<DistillRun> {
    cfg.validate()?;
    student.check_mutable("distill_train")?;
    if student.arch() != teacher.arch() {
        return Err(Error::Config("student and teacher architectures differ".into()));
    }
    let expected_cond = if cfg.degradation.is_some() { student.arch().channels } else { 0 };
    if student.arch().cond_channels != expected_cond {
        return Err(Error::Config(format!(
            "model has {} condition channels, configuration needs {expected_cond}",
            student.arch().cond_channels
        )));
    }
    let mut rng = seeded(cfg.seed);
    let mut opt = OptimizerState::new(student.params(), cfg.lr, cfg.warmup)?;
    let mut trace = Vec::with_capacity(cfg.iterations);
    let start = Instant::now();
    for it in 0..cfg.iterations {
        let x1 = source.draw(cfg.batch, &mut rng)?;
        let batch = draw_student_batch(&x1, cfg, &mut rng)?;
        let (terms, grads) = distill_objective(&student, teacher, &batch, cfg, None)?;
        if !terms.total.is_finite() {
            let err = Error::TrainingAborted { iteration: it, reason: format!("loss is {}", terms.total) };
            return Ok(DistillRun { student, trace, aborted: Some(err) });
        }
        let lr = match student.apply_adam(&mut opt, &grads) {
            Ok(lr) => lr,
            Err(e @ Error::NonFinite(_)) => {
                let err = Error::TrainingAborted { iteration: it, reason: e.to_string() };
                return Ok(DistillRun { student, trace, aborted: Some(err) });
            }
            Err(e) => return Err(e),
        };
        ema_update(&mut student, cfg.ema_ratio)?;
        trace.push(DistillTraceRow {
            iteration: it,
            distill: terms.distill,
            align: terms.align,
            bc: terms.bc,
            total: terms.total,
            lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if (it + 1) % 1000 == 0 {
            log::info!("distill iteration {} total {:.6}", it + 1, terms.total);
        }
    }
    Ok(DistillRun { student, trace, aborted: None })
}

/// Trace as CSV: `iteration,distill,align,bc,total,lr,wall_ms`.
pub fn distill_trace_csv(rows: &[DistillTraceRow]) -> String {
    let mut s = String::from("iteration,distill,align,bc,total,lr,wall_ms\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:e},{:e},{:e},{:e},{:e},{:.3}",
            r.iteration, r.distill, r.align, r.bc, r.total, r.lr, r.wall_ms
        );
    }
    s
}

pub fn write_distill_trace_csv(path: &Path, rows: &[DistillTraceRow]) -> Result<()> {
    std::fs::write(path, distill_trace_csv(rows))?;
    Ok(())
}
