//! Integration of `dx/dt = v(x, cond, t)`.
//!
//! Fixed-step schemes take uniform steps; the RK2 family is parameterized by
//! the position `c` of its second stage (Midpoint `c = 1/2`, Heun `c = 1`,
//! Ralston `c = 2/3`) with weights `(1 − 1/(2c), 1/(2c))`. `Rk45` is the
//! Dormand–Prince 5(4) pair with FSAL and a PI step-size controller; one
//! solve costs `1 + 6·(accepted + rejected)` velocity evaluations.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::VelocityModel;
use crate::random::{seeded, SeededRng};
use crate::tensor::Tensor;

/// A velocity field evaluated on a batch, with one time per batch item.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, cond: &Tensor, t: &[f64]) -> Result<Tensor>;
}

/// Models are sampled with their EMA weights.
impl VelocityField for VelocityModel {
    fn velocity(&self, x: &Tensor, cond: &Tensor, t: &[f64]) -> Result<Tensor> {
        self.forward_ema(x, cond, t)
    }
}

impl<T: VelocityField + ?Sized> VelocityField for &T {
    fn velocity(&self, x: &Tensor, cond: &Tensor, t: &[f64]) -> Result<Tensor> {
        (**self).velocity(x, cond, t)
    }
}

/// Wraps a closure `(x, t) -> v` that ignores the condition.
pub struct FnField<F>(pub F);

impl<F> VelocityField for FnField<F>
where
    F: Fn(&Tensor, &[f64]) -> Tensor,
{
    fn velocity(&self, x: &Tensor, _cond: &Tensor, t: &[f64]) -> Result<Tensor> {
        Ok((self.0)(x, t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Euler,
    Midpoint,
    Heun,
    Ralston,
    Rk45,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Euler => "euler",
            SolverKind::Midpoint => "midpoint",
            SolverKind::Heun => "heun",
            SolverKind::Ralston => "ralston",
            SolverKind::Rk45 => "rk45",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "euler" => SolverKind::Euler,
            "midpoint" => SolverKind::Midpoint,
            "heun" => SolverKind::Heun,
            "ralston" => SolverKind::Ralston,
            "rk45" => SolverKind::Rk45,
            other => return Err(Error::Config(format!("unknown solver {other:?}"))),
        })
    }

    /// Second-stage position of an RK2 scheme.
    fn rk2_node(self) -> Option<f64> {
        match self {
            SolverKind::Midpoint => Some(0.5),
            SolverKind::Heun => Some(1.0),
            SolverKind::Ralston => Some(2.0 / 3.0),
            _ => None,
        }
    }

    /// Velocity evaluations per fixed step.
    pub fn evals_per_step(self) -> usize {
        match self {
            SolverKind::Euler => 1,
            SolverKind::Midpoint | SolverKind::Heun | SolverKind::Ralston => 2,
            SolverKind::Rk45 => 6,
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSpec {
    pub kind: SolverKind,
    /// Uniform steps for the fixed-step kinds.
    pub steps: usize,
    pub atol: f64,
    pub rtol: f64,
    /// Record every `record_stride`-th step in the trajectory (endpoints always kept).
    pub record_stride: usize,
}

/// Adaptive controller constants.
pub const SAFETY: f64 = 0.9;
pub const MIN_FACTOR: f64 = 0.2;
pub const MAX_FACTOR: f64 = 5.0;
pub const MIN_STEP: f64 = 1e-10;
const PI_BETA: f64 = 0.04;
const PI_ALPHA: f64 = 0.2 - 0.75 * PI_BETA;

impl SolverSpec {
    pub fn fixed(kind: SolverKind, steps: usize) -> Self {
        Self { kind, steps, atol: 0.0, rtol: 0.0, record_stride: 1 }
    }

    /// Dormand–Prince with `atol = rtol = tol`.
    pub fn rk45(tol: f64) -> Self {
        Self { kind: SolverKind::Rk45, steps: 0, atol: tol, rtol: tol, record_stride: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            SolverKind::Rk45 => {
                if !(self.atol > 0.0 && self.rtol >= 0.0 && self.atol.is_finite() && self.rtol.is_finite()) {
                    return Err(Error::Config(format!("RK45 tolerances must be positive (atol {}, rtol {})", self.atol, self.rtol)));
                }
            }
            _ if self.steps == 0 => return Err(Error::Config("fixed-step solver needs steps >= 1".into())),
            _ => {}
        }
        if self.record_stride == 0 {
            return Err(Error::Config("record stride must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for SolverSpec {
    /// RK45 at the 1e-3 tolerance used for sampling.
    fn default() -> Self {
        Self::rk45(1e-3)
    }
}

/// Recorded `(t, x_t)` pairs, `t` strictly increasing.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub points: Vec<(f64, Tensor)>,
    pub nfe: usize,
}

#[derive(Debug, Clone)]
pub struct SolveOutput {
    pub x: Tensor,
    pub trajectory: Trajectory,
    pub nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
}

fn eval(field: &dyn VelocityField, x: &Tensor, cond: &Tensor, t: f64, nfe: &mut usize) -> Result<Tensor> {
    *nfe += 1;
    let v = field.velocity(x, cond, &vec![t; x.batch()])?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("velocity at t = {t}")));
    }
    Ok(v)
}

/// Effective slope `k` of one step of size `dt` from `(x, t)`, one time per
/// batch item, so that the step is `x + dt·k`.
pub fn teacher_slope(
    field: &dyn VelocityField,
    x: &Tensor,
    cond: &Tensor,
    t: &[f64],
    dt: f64,
    kind: SolverKind,
) -> Result<Tensor> {
    check_slope_args(t, dt, kind)?;
    let k1 = field.velocity(x, cond, t)?;
    teacher_slope_with(field, x, cond, t, dt, kind, &k1)
}

fn check_slope_args(t: &[f64], dt: f64, kind: SolverKind) -> Result<()> {
    if kind == SolverKind::Rk45 {
        return Err(Error::Config("teacher slope supports euler, midpoint, heun, ralston".into()));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("step {dt} must be positive")));
    }
    if let Some(&bad) = t.iter().find(|&&ti| ti + dt > 1.0 + 1e-12) {
        return Err(Error::Range(format!("t + dt = {} exceeds 1", bad + dt)));
    }
    Ok(())
}

/// [`teacher_slope`] reusing a first stage `k1 = v(x, t)` computed by the caller.
pub fn teacher_slope_with(
    field: &dyn VelocityField,
    x: &Tensor,
    cond: &Tensor,
    t: &[f64],
    dt: f64,
    kind: SolverKind,
    k1: &Tensor,
) -> Result<Tensor> {
    check_slope_args(t, dt, kind)?;
    let Some(c) = kind.rk2_node() else {
        return Ok(k1.clone());
    };
    let x2 = x.axpy(c * dt, k1)?;
    let t2: Vec<f64> = t.iter().map(|&ti| (ti + c * dt).min(1.0)).collect();
    let k2 = field.velocity(&x2, cond, &t2)?;
    let w2 = 1.0 / (2.0 * c);
    k1.zip_map(&k2, |a, b| (1.0 - w2) * a + w2 * b)
}

/// `x̂₁ = x_t + (1 − t)·v`.
pub fn estimate_final(x_t: &Tensor, t: f64, v: &Tensor) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Range(format!("time {t} outside [0, 1]")));
    }
    x_t.axpy(1.0 - t, v)
}

/// Per-item version of [`estimate_final`].
pub fn estimate_final_rows(x_t: &Tensor, t: &[f64], v: &Tensor) -> Result<Tensor> {
    let w: Vec<f64> = t.iter().map(|ti| 1.0 - ti).collect();
    x_t.add(&v.scale_rows(&w)?)
}

/// Integrates from `x0` at `span.0` to `span.1` (`span.0 <= span.1`).
pub fn solve(
    field: &dyn VelocityField,
    x0: &Tensor,
    cond: &Tensor,
    span: (f64, f64),
    spec: &SolverSpec,
) -> Result<SolveOutput> {
    spec.validate()?;
    let (t0, t1) = span;
    if !(t0 <= t1 && t0.is_finite() && t1.is_finite()) {
        return Err(Error::Range(format!("invalid time span [{t0}, {t1}]")));
    }
    if !x0.is_finite() {
        return Err(Error::NonFinite("initial state".into()));
    }
    if t0 == t1 {
        return Ok(SolveOutput {
            x: x0.clone(),
            trajectory: Trajectory { points: vec![(t0, x0.clone())], nfe: 0 },
            nfe: 0,
            accepted: 0,
            rejected: 0,
        });
    }
    match spec.kind {
        SolverKind::Rk45 => solve_rk45(field, x0, cond, t0, t1, spec),
        kind => solve_fixed(field, x0, cond, t0, t1, kind, spec),
    }
}

fn solve_fixed(
    field: &dyn VelocityField,
    x0: &Tensor,
    cond: &Tensor,
    t0: f64,
    t1: f64,
    kind: SolverKind,
    spec: &SolverSpec,
) -> Result<SolveOutput> {
    let n = spec.steps;
    let h = (t1 - t0) / n as f64;
    let mut nfe = 0;
    let mut x = x0.clone();
    let mut points = vec![(t0, x.clone())];
    for i in 0..n {
        let t = t0 + i as f64 * h;
        let k1 = eval(field, &x, cond, t, &mut nfe)?;
        x = match kind.rk2_node() {
            None => x.axpy(h, &k1)?,
            Some(c) => {
                let x2 = x.axpy(c * h, &k1)?;
                let k2 = eval(field, &x2, cond, (t + c * h).min(t1), &mut nfe)?;
                let w2 = 1.0 / (2.0 * c);
                let slope = k1.zip_map(&k2, |a, b| (1.0 - w2) * a + w2 * b)?;
                x.axpy(h, &slope)?
            }
        };
        let t_next = if i + 1 == n { t1 } else { t0 + (i + 1) as f64 * h };
        if (i + 1) % spec.record_stride == 0 || i + 1 == n {
            points.push((t_next, x.clone()));
        }
    }
    Ok(SolveOutput { x, trajectory: Trajectory { points, nfe }, nfe, accepted: n, rejected: 0 })
}

// Dormand–Prince 5(4) tableau.
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

fn weighted_rms(v: &[f64], y0: &[f64], y1: &[f64], atol: f64, rtol: f64) -> f64 {
    let n = v.len().max(1);
    let s: f64 = v
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| {
            let sc = atol + rtol * a.abs().max(b.abs());
            (e / sc) * (e / sc)
        })
        .sum();
    (s / n as f64).sqrt()
}

fn solve_rk45(
    field: &dyn VelocityField,
    x0: &Tensor,
    cond: &Tensor,
    t0: f64,
    t1: f64,
    spec: &SolverSpec,
) -> Result<SolveOutput> {
    let (atol, rtol) = (spec.atol, spec.rtol);
    let mut nfe = 0;
    let mut x = x0.clone();
    let mut t = t0;
    let mut k1 = eval(field, &x, cond, t, &mut nfe)?;

    let d0 = weighted_rms(x.data(), x.data(), x.data(), atol, rtol);
    let d1 = weighted_rms(k1.data(), x.data(), x.data(), atol, rtol);
    let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-3 } else { 0.01 * d0 / d1 };
    h = h.clamp(1e-6, t1 - t0);

    let mut err_prev: f64 = 1e-4;
    let (mut accepted, mut rejected, mut steps) = (0, 0, 0);
    let mut points = vec![(t, x.clone())];
    let mut stages: Vec<Tensor> = Vec::with_capacity(7);

    while t < t1 {
        if h < MIN_STEP {
            return Err(Error::Stiffness { t, min_step: MIN_STEP });
        }
        let last = t + h >= t1;
        if last {
            h = t1 - t;
        }
        stages.clear();
        stages.push(k1.clone());
        for s in 1..7 {
            let mut xs = x.clone();
            for (j, kj) in stages.iter().enumerate() {
                let a = DP_A[s][j];
                if a != 0.0 {
                    for (o, k) in xs.data_mut().iter_mut().zip(kj.data()) {
                        *o += h * a * k;
                    }
                }
            }
            let ts = if s >= 5 { t + h } else { t + DP_C[s] * h };
            let k = eval(field, &xs, cond, ts.min(t1), &mut nfe)?;
            stages.push(k);
        }
        // stage 7 is evaluated at the fifth-order solution (FSAL)
        let mut x_new = x.clone();
        let mut err = vec![0.0; x.numel()];
        for (j, kj) in stages.iter().enumerate() {
            let (b5, e) = (DP_B5[j], DP_B5[j] - DP_B4[j]);
            for ((o, ev), k) in x_new.data_mut().iter_mut().zip(err.iter_mut()).zip(kj.data()) {
                *o += h * b5 * k;
                *ev += h * e * k;
            }
        }
        let err_norm = weighted_rms(&err, x.data(), x_new.data(), atol, rtol);
        if err_norm <= 1.0 {
            accepted += 1;
            steps += 1;
            t = if last { t1 } else { t + h };
            x = x_new;
            k1 = stages.pop().expect("seven stages");
            if steps % spec.record_stride == 0 || t >= t1 {
                points.push((t, x.clone()));
            }
            let e = err_norm.max(1e-10);
            let factor = (SAFETY * e.powf(-PI_ALPHA) * err_prev.powf(PI_BETA)).clamp(MIN_FACTOR, MAX_FACTOR);
            err_prev = e;
            h *= factor;
        } else {
            rejected += 1;
            let factor = (SAFETY * err_norm.powf(-0.2)).clamp(MIN_FACTOR, 1.0);
            h *= factor;
        }
    }
    Ok(SolveOutput { x, trajectory: Trajectory { points, nfe }, nfe, accepted, rejected })
}

/// Solves every batch item on its own and reports per-item NFE.
pub fn solve_each(
    field: &dyn VelocityField,
    x0: &Tensor,
    cond: &Tensor,
    span: (f64, f64),
    spec: &SolverSpec,
) -> Result<(Tensor, Vec<usize>)> {
    let mut outs = Vec::with_capacity(x0.batch());
    let mut nfes = Vec::with_capacity(x0.batch());
    for i in 0..x0.batch() {
        let o = solve(field, &x0.select(i), &cond.select(i), span, spec)?;
        outs.push(o.x);
        nfes.push(o.nfe);
    }
    Ok((Tensor::stack(&outs)?, nfes))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NfeStats {
    pub mean: f64,
    pub max: usize,
}

impl NfeStats {
    pub fn from_counts(counts: &[usize]) -> Self {
        let mean = counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64;
        Self { mean, max: counts.iter().copied().max().unwrap_or(0) }
    }
}

/// Draws `(x₀, x₁, cond)` couplings.
pub trait CouplingSampler {
    fn sample(&mut self, n: usize, rng: &mut SeededRng) -> Result<(Tensor, Tensor, Tensor)>;
}

/// `S(v) = ∫₀¹ E‖v(x_t, t) − (x₁ − x₀)‖² dt`: midpoint rule on `k` uniform
/// times, expectation over `n` couplings drawn once from `seed`.
pub fn straightness(
    field: &dyn VelocityField,
    sampler: &mut dyn CouplingSampler,
    k: usize,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if k == 0 || n == 0 {
        return Err(Error::Usage("straightness needs k >= 1 and n >= 1".into()));
    }
    const CHUNK: usize = 4096;
    let mut rng = seeded(seed);
    let mut total = 0.0;
    let mut done = 0;
    while done < n {
        let m = CHUNK.min(n - done);
        let (x0, x1, cond) = sampler.sample(m, &mut rng)?;
        let chord = x1.sub(&x0)?;
        for j in 0..k {
            let t = (j as f64 + 0.5) / k as f64;
            let xt = crate::flow::interpolate(&x0, &x1, t)?;
            let v = field.velocity(&xt, &cond, &vec![t; m])?;
            total += v.sub(&chord)?.sq_norm();
        }
        done += m;
    }
    Ok(total / (n as f64 * k as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear() -> FnField<impl Fn(&Tensor, &[f64]) -> Tensor> {
        FnField(|x: &Tensor, _t: &[f64]| x.clone())
    }

    fn one() -> (Tensor, Tensor) {
        (Tensor::full(&[1, 1, 1, 1], 1.0), Tensor::zeros(&[1, 0, 1, 1]))
    }

    #[test]
    fn euler_and_midpoint_by_hand() {
        let (x0, c) = one();
        let e = solve(&linear(), &x0, &c, (0.0, 0.1), &SolverSpec::fixed(SolverKind::Euler, 1)).unwrap();
        assert!((e.x.item() - 1.1).abs() < 1e-15);
        assert_eq!(e.nfe, 1);
        let m = solve(&linear(), &x0, &c, (0.0, 0.1), &SolverSpec::fixed(SolverKind::Midpoint, 1)).unwrap();
        assert!((m.x.item() - 1.105).abs() < 1e-15);
        assert!((m.x.item() - 0.1f64.exp()).abs() < 2e-4);
        assert_eq!(m.nfe, 2);
    }

    #[test]
    fn rk45_exponential() {
        let (x0, c) = one();
        let o = solve(&linear(), &x0, &c, (0.0, 1.0), &SolverSpec::rk45(1e-6)).unwrap();
        assert!((o.x.item() - std::f64::consts::E).abs() <= 1e-5);
        assert_eq!(o.nfe, 1 + 6 * (o.accepted + o.rejected));
        let ts: Vec<f64> = o.trajectory.points.iter().map(|p| p.0).collect();
        assert!(ts.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*ts.last().unwrap(), 1.0);
    }

    #[test]
    fn stiff_field_hits_step_floor() {
        let blowup = FnField(|x: &Tensor, _t: &[f64]| x.map(|v| 1e14 * v * v.abs()));
        let (x0, c) = one();
        let r = solve(&blowup, &x0, &c, (0.0, 1.0), &SolverSpec::rk45(1e-8));
        assert!(matches!(r, Err(Error::Stiffness { .. }) | Err(Error::NonFinite(_))), "{r:?}");
    }

    #[test]
    fn slopes_by_hand() {
        let x = Tensor::full(&[1, 1, 1, 1], 1.0);
        let c = Tensor::zeros(&[1, 0, 1, 1]);
        let konst = FnField(|x: &Tensor, _t: &[f64]| Tensor::full(x.shape(), 0.3));
        for kind in [SolverKind::Euler, SolverKind::Midpoint, SolverKind::Heun, SolverKind::Ralston] {
            assert_eq!(teacher_slope(&konst, &x, &c, &[0.4], 0.1, kind).unwrap().item(), 0.3);
        }
        let dt = 0.1;
        let mid = teacher_slope(&linear(), &x, &c, &[0.2], dt, SolverKind::Midpoint).unwrap();
        assert!((mid.item() - (1.0 + dt / 2.0)).abs() < 1e-15);

        // v(x, t) = t: both RK2 variants integrate it exactly, slope t + dt/2
        let time = FnField(|x: &Tensor, t: &[f64]| Tensor::full(x.shape(), t[0]));
        let t = 0.3;
        for kind in [SolverKind::Heun, SolverKind::Ralston, SolverKind::Midpoint] {
            let k = teacher_slope(&time, &x, &c, &[t], dt, kind).unwrap().item();
            assert!((k - (t + dt / 2.0)).abs() < 1e-15, "{kind}");
        }
        // v(x, t) = t² separates them: dt²/4, dt²/2, dt²/3 beyond t² + t·dt
        let quad = FnField(|x: &Tensor, t: &[f64]| Tensor::full(x.shape(), t[0] * t[0]));
        let base = t * t + t * dt;
        let cases = [
            (SolverKind::Midpoint, dt * dt / 4.0),
            (SolverKind::Heun, dt * dt / 2.0),
            (SolverKind::Ralston, dt * dt / 3.0),
        ];
        for (kind, extra) in cases {
            let k = teacher_slope(&quad, &x, &c, &[t], dt, kind).unwrap().item();
            assert!((k - base - extra).abs() < 1e-15, "{kind}: {k}");
        }
        assert!(matches!(
            teacher_slope(&linear(), &x, &c, &[0.97], 0.05, SolverKind::Euler),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn estimate_final_cases() {
        let x = Tensor::full(&[1], 0.5);
        let v = Tensor::full(&[1], 1.0);
        assert_eq!(estimate_final(&x, 0.5, &v).unwrap().item(), 1.0);
        assert_eq!(estimate_final(&x, 1.0, &v).unwrap(), x);
    }

    #[test]
    fn invalid_specs() {
        assert!(SolverSpec::fixed(SolverKind::Euler, 0).validate().is_err());
        assert!(SolverSpec::rk45(0.0).validate().is_err());
        assert_eq!(SolverKind::parse("heun").unwrap(), SolverKind::Heun);
        assert!(SolverKind::parse("rk4").is_err());
    }

    struct Identity;
    impl CouplingSampler for Identity {
        fn sample(&mut self, n: usize, rng: &mut SeededRng) -> Result<(Tensor, Tensor, Tensor)> {
            let x = crate::random::randn(&[n, 1, 1, 1], rng);
            Ok((x.clone(), x, Tensor::zeros(&[n, 0, 1, 1])))
        }
    }

    #[test]
    fn straight_identity_coupling() {
        let zero = FnField(|x: &Tensor, _t: &[f64]| Tensor::zeros(x.shape()));
        assert_eq!(straightness(&zero, &mut Identity, 8, 100, 1).unwrap(), 0.0);
    }
}
