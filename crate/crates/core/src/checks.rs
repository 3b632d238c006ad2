//! Self-test batteries behind `flowsr check`.
//!
//! Each battery returns one [`CheckItem`] per quantity it measures; a suite
//! passes when every item does.

use std::cell::Cell;
use std::fmt;

use crate::autodiff::Graph;
use crate::degradation::{downsample, lift, transpose_upsample, DegradationSpec};
use crate::distill::{distill_loss, record_objective, DistillConfig, DistillVariant, StudentBatch, TermVars};
use crate::error::{Error, Result};
use crate::flow::{perturb, record_flow_loss, Discrepancy, FlowBatch};
use crate::model::{ArchSpec, ParamSet, VelocityModel};
use crate::oracles::{linear_ode_solution, GaussianFlowSpec, ValidationSettings};
use crate::random::{randn, seeded};
use crate::solvers::{solve, teacher_slope, FnField, SolverKind, SolverSpec};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Grad,
    Adjoint,
    SolverOrder,
    Oracle,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Grad, Suite::Adjoint, Suite::SolverOrder, Suite::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Grad => "grad",
            Suite::Adjoint => "adjoint",
            Suite::SolverOrder => "solver-order",
            Suite::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown check suite {s:?} (grad, adjoint, solver-order, oracle)")))
    }
}

/// One measured quantity and whether it met its criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckItem {
    pub name: String,
    pub value: f64,
    pub criterion: String,
    pub pass: bool,
}

impl CheckItem {
    fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self { name: name.into(), value, criterion: format!("<= {bound:.1e}"), pass: value <= bound }
    }

    fn within(name: impl Into<String>, value: f64, target: f64, tol: f64) -> Self {
        Self {
            name: name.into(),
            value,
            criterion: format!("{target} ± {tol}"),
            pass: (value - target).abs() <= tol,
        }
    }
}

impl fmt::Display for CheckItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{tag} {} value={:.6e} want {}", self.name, self.value, self.criterion)
    }
}

pub fn run_suite(suite: Suite) -> Result<Vec<CheckItem>> {
    match suite {
        Suite::Grad => grad_battery(GRAD_SEED),
        Suite::Adjoint => adjoint_battery(ADJOINT_SEED),
        Suite::SolverOrder => solver_order_battery(),
        Suite::Oracle => oracle_battery(&ValidationSettings::default()),
    }
}

const GRAD_SEED: u64 = 11;
const ADJOINT_SEED: u64 = 12;

/// Largest accepted relative error between analytic and central-difference gradients.
pub const GRAD_TOL: f64 = 1e-5;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Gradients below this magnitude are compared absolutely.
pub const FD_FLOOR: f64 = 1e-4;

/// `|a − b| / max(|a|, |b|, FD_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

/// Largest relative error between `grads` and central differences of `f`
/// over every scalar of `params`.
pub fn fd_max_error(
    params: &ParamSet,
    grads: &std::collections::BTreeMap<String, Tensor>,
    f: &dyn Fn(&ParamSet) -> Result<f64>,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (name, t) in params.iter() {
        let g = grads.get(name).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for i in 0..t.numel() {
            let mut probe = params.clone();
            let mut bumped = t.clone();
            bumped.data_mut()[i] += FD_STEP;
            probe.set(name, bumped.clone())?;
            let up = f(&probe)?;
            bumped.data_mut()[i] -= 2.0 * FD_STEP;
            probe.set(name, bumped)?;
            let down = f(&probe)?;
            let fd = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(g.data()[i], fd));
        }
    }
    Ok(worst)
}

fn grad_models(seed: u64) -> Result<Vec<(&'static str, VelocityModel, VelocityModel)>> {
    let archs = [
        ("mlp", ArchSpec::mlp(2, 2, vec![6, 5], 4)),
        ("conv", ArchSpec::conv(1, 1, 4, 2, vec![3, 2], 4)),
    ];
    archs
        .into_iter()
        .enumerate()
        .map(|(i, (name, arch))| {
            let student = VelocityModel::init(arch.clone(), seed + 2 * i as u64)?;
            let mut teacher = VelocityModel::init(arch, seed + 2 * i as u64 + 1)?;
            teacher.freeze();
            Ok((name, student, teacher))
        })
        .collect()
}

fn flow_batch(arch: &ArchSpec, n: usize, seed: u64) -> FlowBatch {
    let mut rng = seeded(seed);
    let [c, h, w] = arch.sample_shape();
    FlowBatch {
        x0: randn(&[n, c, h, w], &mut rng),
        x1: randn(&[n, c, h, w], &mut rng),
        cond: randn(&[n, arch.cond_channels, h, w], &mut rng),
        t: (0..n).map(|_| rng.random_range(0.05..0.95)).collect(),
    }
}

/// Student batch with `t + dt` kept inside `[0, 1]`.
fn student_batch(arch: &ArchSpec, n: usize, dt: f64, seed: u64) -> StudentBatch {
    let mut rng = seeded(seed);
    let [c, h, w] = arch.sample_shape();
    StudentBatch {
        x0: randn(&[n, c, h, w], &mut rng),
        cond: randn(&[n, arch.cond_channels, h, w], &mut rng),
        t: (0..n).map(|_| rng.random_range(0.05..0.95 - dt)).collect(),
    }
}

type Pick = fn(&TermVars) -> crate::autodiff::Var;

/// Every training loss on small random MLP and conv models against central
/// differences. The distillation stop-gradient brackets are pinned to the
/// unperturbed student weights so the objective is an ordinary function.
pub fn grad_battery(seed: u64) -> Result<Vec<CheckItem>> {
    let mut items = Vec::new();
    for (arch_name, student, teacher) in grad_models(seed)? {
        let arch = student.arch().clone();
        let fb = flow_batch(&arch, 3, seed ^ 0xf10);
        for disc in [Discrepancy::L1, Discrepancy::L2] {
            let f = |p: &ParamSet| -> Result<f64> {
                let mut g = Graph::new();
                let pv = p.constants(&mut g);
                let l = record_flow_loss(&mut g, &arch, &pv, &fb, disc)?;
                Ok(g.value(l).item())
            };
            let mut g = Graph::new();
            let pv = student.params().register(&mut g);
            let l = record_flow_loss(&mut g, &arch, &pv, &fb, disc)?;
            let grads = g.param_grads(&g.backward(l)?);
            let err = fd_max_error(student.params(), &grads, &f)?;
            items.push(CheckItem::at_most(format!("grad/{arch_name}/flow-{}", disc.name()), err, GRAD_TOL));
        }

        let sb = student_batch(&arch, 3, 0.1, seed ^ 0xd15);
        let sg = student.params().clone();
        let picks: [(&str, Pick); 4] = [
            ("distill", |v| v.distill),
            ("align", |v| v.align),
            ("bc", |v| v.bc),
            ("total", |v| v.total),
        ];
        for variant in [DistillVariant::Trajectory, DistillVariant::Pinn, DistillVariant::Boot] {
            let cfg = DistillConfig { dt: 0.1, variant, ..DistillConfig::default() };
            for (term, pick) in picks {
                // align and bc do not depend on the variant
                if variant != DistillVariant::Trajectory && matches!(term, "align" | "bc") {
                    continue;
                }
                let f = |p: &ParamSet| -> Result<f64> {
                    let mut g = Graph::new();
                    let live = p.constants(&mut g);
                    let br = sg.constants(&mut g);
                    let v = record_objective(&mut g, &arch, &live, Some(&br), &teacher, &sb, &cfg)?;
                    Ok(g.value(pick(&v)).item())
                };
                let mut g = Graph::new();
                let live = student.params().register(&mut g);
                let br = sg.constants(&mut g);
                let v = record_objective(&mut g, &arch, &live, Some(&br), &teacher, &sb, &cfg)?;
                let grads = g.param_grads(&g.backward(pick(&v))?);
                let err = fd_max_error(student.params(), &grads, &f)?;
                let label = if matches!(term, "align" | "bc") {
                    format!("grad/{arch_name}/{term}")
                } else {
                    format!("grad/{arch_name}/{term}-{}", variant.name())
                };
                items.push(CheckItem::at_most(label, err, GRAD_TOL));
            }
        }
    }
    Ok(items)
}

/// Relative mismatch of `⟨A x, y⟩` and `⟨x, Aᵀ y⟩`.
fn adjoint_gap(ax_y: f64, x_aty: f64) -> f64 {
    (ax_y - x_aty).abs() / ax_y.abs().max(x_aty.abs()).max(1.0)
}

/// Adjoint pairs of the linear operators, the lift right-inverse and the
/// second moment of the noise augmentation.
pub fn adjoint_battery(seed: u64) -> Result<Vec<CheckItem>> {
    let mut rng = seeded(seed);
    let mut items = Vec::new();
    for scale in [2, 4] {
        let spec = DegradationSpec::new(scale, 0.0)?;
        let x = randn(&[3, 2, 16, 16], &mut rng);
        let y = randn(&[3, 2, 16 / scale, 16 / scale], &mut rng);
        let lhs = downsample(&x, &spec)?.dot(&y)?;
        let rhs = x.dot(&transpose_upsample(&y, &spec)?)?;
        items.push(CheckItem::at_most(format!("adjoint/downsample-s{scale}"), adjoint_gap(lhs, rhs), 1e-10));
        let back = downsample(&lift(&y, &spec)?, &spec)?;
        items.push(CheckItem::at_most(format!("adjoint/lift-inverse-s{scale}"), back.max_abs_diff(&y)?, 1e-12));
    }

    for (stride, pad, k) in [(1, 1, 3), (2, 0, 2)] {
        let x = randn(&[2, 3, 8, 8], &mut rng);
        let w = randn(&[4, 3, k, k], &mut rng);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w));
        let ax = g.conv2d(xv, wv, stride, pad)?;
        let y = randn(g.value(ax).shape(), &mut rng);
        let yv = g.constant(y.clone());
        let aty = g.conv_transpose2d(yv, wv, stride, pad)?;
        let gap = adjoint_gap(g.value(ax).dot(&y)?, x.dot(g.value(aty))?);
        items.push(CheckItem::at_most(format!("adjoint/conv-k{k}-s{stride}"), gap, 1e-10));
    }

    let a = randn(&[5, 7], &mut rng);
    let x = randn(&[7, 3], &mut rng);
    let y = randn(&[5, 3], &mut rng);
    let mut g = Graph::new();
    let (av, xv) = (g.constant(a.clone()), g.constant(x.clone()));
    let ax = g.matmul(av, xv)?;
    let lhs = g.value(ax).dot(&y)?;
    let at = Tensor::from_fn(&[7, 5], |i| a.data()[(i % 5) * 7 + i / 5]);
    let (atv, yv) = (g.constant(at), g.constant(y));
    let aty = g.matmul(atv, yv)?;
    items.push(CheckItem::at_most("adjoint/matmul", adjoint_gap(lhs, x.dot(g.value(aty))?), 1e-10));

    let sigma_p = 0.5;
    let n = 100_000;
    let x_lr = randn(&[n, 1, 1, 1], &mut rng);
    let eps = randn(&[n, 1, 1, 1], &mut rng);
    let m_lr = x_lr.sq_norm() / n as f64;
    let m0 = perturb(&x_lr, sigma_p, &eps)?.sq_norm() / n as f64;
    items.push(CheckItem::at_most("adjoint/vp-second-moment", (m0 / m_lr - 1.0).abs(), 0.02));
    Ok(items)
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Step sizes `2⁻³ … 2⁻⁸` of the order fits.
pub const ORDER_STEPS: [usize; 6] = [8, 16, 32, 64, 128, 256];

/// Convergence orders on `dx/dt = x`, RK45 endpoint accuracy and NFE counts.
pub fn solver_order_battery() -> Result<Vec<CheckItem>> {
    let calls = Cell::new(0usize);
    let field = FnField(|x: &Tensor, _t: &[f64]| {
        calls.set(calls.get() + 1);
        x.clone()
    });
    let x0 = Tensor::full(&[1, 1, 1, 1], 1.0);
    let cond = Tensor::zeros(&[1, 0, 1, 1]);
    let e = std::f64::consts::E;
    let mut items = Vec::new();
    let mut nfe_ok = true;
    for (kind, order, tol) in [
        (SolverKind::Euler, 1.0, 0.1),
        (SolverKind::Midpoint, 2.0, 0.15),
        (SolverKind::Heun, 2.0, 0.15),
        (SolverKind::Ralston, 2.0, 0.15),
    ] {
        let mut hs = Vec::new();
        let mut errs = Vec::new();
        for steps in ORDER_STEPS {
            calls.set(0);
            let out = solve(&field, &x0, &cond, (0.0, 1.0), &SolverSpec::fixed(kind, steps))?;
            nfe_ok &= out.nfe == calls.get() && out.nfe == steps * kind.evals_per_step();
            hs.push(1.0 / steps as f64);
            errs.push((out.x.item() - e).abs());
        }
        items.push(CheckItem::within(format!("solver-order/{kind}"), loglog_slope(&hs, &errs), order, tol));
    }
    for tol in [1e-3, 1e-6] {
        calls.set(0);
        let out = solve(&field, &x0, &cond, (0.0, 1.0), &SolverSpec::rk45(tol))?;
        nfe_ok &= out.nfe == calls.get() && out.nfe == 1 + 6 * (out.accepted + out.rejected);
        items.push(CheckItem::at_most(format!("solver-order/rk45-tol{tol:e}"), (out.x.item() - e).abs(), 10.0 * tol));
    }
    items.push(CheckItem {
        name: "solver-order/nfe-accounting".into(),
        value: if nfe_ok { 0.0 } else { 1.0 },
        criterion: "exact".into(),
        pass: nfe_ok,
    });
    Ok(items)
}

/// Draws pushed through the closed-form flow by the transport check.
pub const TRANSPORT_SAMPLES: usize = 100_000;

/// Closed-form Gaussian velocity against Monte Carlo, and the endpoint
/// variance of samples integrated along the closed-form field.
pub fn oracle_battery(settings: &ValidationSettings) -> Result<Vec<CheckItem>> {
    let mut items = Vec::new();
    for (s0, s1) in [(1.0, 1.0), (1.0, 0.5), (0.5, 2.0)] {
        let spec = GaussianFlowSpec::new(s0, s1, 1)?;
        let lenient = ValidationSettings { max_z: f64::INFINITY, ..*settings };
        let flow = spec.validated_with(&lenient)?;
        let worst = flow.validation().iter().map(|p| p.z()).fold(0.0, f64::max);
        items.push(CheckItem::at_most(format!("oracle/mc-z-s{s0}-{s1}"), worst, settings.max_z));
        let mut rng = seeded(settings.seed ^ 0x7a);
        let n = TRANSPORT_SAMPLES;
        let x0 = randn(&[n, 1, 1, 1], &mut rng).scale(s0);
        let out = solve(&flow, &x0, &Tensor::zeros(&[n, 0, 1, 1]), (0.0, 1.0), &SolverSpec::rk45(1e-6))?;
        let var = out.x.sq_norm() / n as f64;
        items.push(CheckItem::at_most(format!("oracle/transport-s{s0}-{s1}"), (var / (s1 * s1) - 1.0).abs(), 0.03));
    }
    Ok(items)
}

/// Student times of [`ideal_student_loss`]. Mid-range values keep `s = t + dt`
/// close to `t` across the step sizes, so the `1/s` factor of the residual
/// barely bends the fitted slope.
pub const IDEAL_TIMES: [f64; 4] = [0.4, 0.5, 0.6, 0.7];
/// Source points of [`ideal_student_loss`].
pub const IDEAL_SOURCES: [f64; 5] = [-1.5, -0.5, 0.25, 1.0, 2.0];

/// Trajectory distillation loss of the student that reproduces the exact
/// flow of `dx/dt = a(t)·x`, i.e. `v(x₀, t) = (Φ_t(x₀) − x₀)/t`, against the
/// teacher slope `kind` of the same field.
pub fn ideal_student_loss(a: &dyn Fn(f64) -> f64, kind: SolverKind, dt: f64) -> Result<f64> {
    let n = IDEAL_TIMES.len() * IDEAL_SOURCES.len();
    let student = |x0: f64, t: f64| -> Result<f64> { Ok((linear_ode_solution(a, x0, t)? - x0) / t) };
    let (mut vt, mut vs, mut xt, mut times) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &t in &IDEAL_TIMES {
        for &x0 in &IDEAL_SOURCES {
            let v = student(x0, t)?;
            vt.push(v);
            vs.push(student(x0, t + dt)?);
            xt.push(x0 + t * v);
            times.push(t);
        }
    }
    let shape = vec![n, 1, 1, 1];
    let field = FnField(|x: &Tensor, t: &[f64]| {
        let coef: Vec<f64> = t.iter().map(|&u| a(u)).collect();
        x.scale_rows(&coef).expect("one time per row")
    });
    let xt = Tensor::new(shape.clone(), xt)?;
    let k = teacher_slope(&field, &xt, &Tensor::zeros(&[n, 0, 1, 1]), &times, dt, kind)?;
    let vt = Tensor::new(shape.clone(), vt)?;
    let vs = Tensor::new(shape, vs)?;
    distill_loss(DistillVariant::Trajectory, &vt, &vs, &k, &times, dt)
}
