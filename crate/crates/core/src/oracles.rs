//! Ground truths for independent zero-mean Gaussian endpoints.
//!
//! With `x₀ ~ N(0, σ₀²)`, `x₁ ~ N(0, σ₁²)` independent per coordinate and
//! `x_t = (1−t)x₀ + t·x₁`, the marginal velocity `E[x₁ − x₀ | x_t = x]` is
//! linear, `a(t)·x` with
//!
//! `a(t) = (t·σ₁² − (1−t)·σ₀²) / ((1−t)²·σ₀² + t²·σ₁²)`.
//!
//! The closed form is only reachable through [`GaussianFlowSpec::validated`],
//! which first compares it with a Nadaraya–Watson estimate on sampled
//! couplings and refuses to hand it out if the two disagree.

use crate::error::{Error, Result};
use crate::random::{normal, seeded, SeededRng};
use crate::solvers::{CouplingSampler, VelocityField};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianFlowSpec {
    pub sigma0: f64,
    pub sigma1: f64,
    pub dim: usize,
}

/// Knobs of the Monte-Carlo cross-check behind [`GaussianFlowSpec::validated`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationSettings {
    pub samples: usize,
    /// Kernel bandwidth as a fraction of the marginal std at `t`.
    pub bandwidth: f64,
    pub times: [f64; 3],
    /// Grid points spread over `±2` marginal stds.
    pub grid: usize,
    /// Largest accepted `|analytic − MC| / standard error` at any grid point.
    /// The default 4 keeps the family-wise false-alarm rate of the 63
    /// comparisons below 0.5%.
    pub max_z: f64,
    pub seed: u64,
}

impl Default for ValidationSettings {
    fn default() -> Self {
        Self { samples: 400_000, bandwidth: 0.03, times: [0.1, 0.5, 0.9], grid: 21, max_z: 4.0, seed: 0x5eed }
    }
}

/// One grid point of the cross-check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationPoint {
    pub t: f64,
    pub x: f64,
    pub analytic: f64,
    pub mc: McEstimate,
}

impl ValidationPoint {
    pub fn z(&self) -> f64 {
        (self.analytic - self.mc.value).abs() / self.mc.std_err
    }
}

impl GaussianFlowSpec {
    pub fn new(sigma0: f64, sigma1: f64, dim: usize) -> Result<Self> {
        let spec = Self { sigma0, sigma1, dim };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 > 0.0 && self.sigma1 > 0.0 && self.sigma0.is_finite() && self.sigma1.is_finite()) {
            return Err(Error::Config(format!(
                "endpoint stds must be positive (got {}, {})",
                self.sigma0, self.sigma1
            )));
        }
        if self.dim == 0 {
            return Err(Error::Config("dimension must be >= 1".into()));
        }
        Ok(())
    }

    /// Std of `x_t`.
    pub fn marginal_std(&self, t: f64) -> f64 {
        ((1.0 - t).powi(2) * self.sigma0.powi(2) + (t * self.sigma1).powi(2)).sqrt()
    }

    fn coefficient(&self, t: f64) -> f64 {
        let (v0, v1) = (self.sigma0 * self.sigma0, self.sigma1 * self.sigma1);
        (t * v1 - (1.0 - t) * v0) / ((1.0 - t).powi(2) * v0 + t * t * v1)
    }

    /// Draws one scalar coupling `(x₀, x₁)`.
    pub fn sample_pair(&self, rng: &mut SeededRng) -> (f64, f64) {
        let a = self.sigma0 * normal(rng);
        let b = self.sigma1 * normal(rng);
        (a, b)
    }

    /// Compares the closed form with [`mc_velocity_grid`] on a grid and
    /// returns the field only if every point agrees within `max_z` standard errors.
    pub fn validated_with(&self, settings: &ValidationSettings) -> Result<GaussianFlow> {
        self.validate()?;
        let mut rng = seeded(settings.seed);
        let mut points = Vec::new();
        for &t in &settings.times {
            let std = self.marginal_std(t);
            let xs: Vec<f64> = (0..settings.grid)
                .map(|i| -2.0 * std + 4.0 * std * i as f64 / (settings.grid.max(2) - 1) as f64)
                .collect();
            let mut sampler = |r: &mut SeededRng| self.sample_pair(r);
            let est = mc_velocity_grid(&xs, t, &mut sampler, settings.samples, settings.bandwidth * std, &mut rng)?;
            for (x, mc) in xs.into_iter().zip(est) {
                points.push(ValidationPoint { t, x, analytic: self.coefficient(t) * x, mc });
            }
        }
        if let Some(bad) = points.iter().find(|p| !(p.z() <= settings.max_z)) {
            return Err(Error::Oracle(format!(
                "analytic velocity {:.6} and Monte-Carlo {:.6} ± {:.6} disagree at t = {}, x = {:.4}",
                bad.analytic, bad.mc.value, bad.mc.std_err, bad.t, bad.x
            )));
        }
        Ok(GaussianFlow { spec: *self, points })
    }

    pub fn validated(&self) -> Result<GaussianFlow> {
        self.validated_with(&ValidationSettings::default())
    }
}

/// The closed-form Gaussian velocity after a passing cross-check.
#[derive(Debug, Clone)]
pub struct GaussianFlow {
    spec: GaussianFlowSpec,
    points: Vec<ValidationPoint>,
}

impl GaussianFlow {
    pub fn spec(&self) -> &GaussianFlowSpec {
        &self.spec
    }

    /// Grid comparisons recorded by the cross-check.
    pub fn validation(&self) -> &[ValidationPoint] {
        &self.points
    }

    pub fn coefficient(&self, t: f64) -> f64 {
        self.spec.coefficient(t)
    }

    /// `a(t)·x`.
    pub fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Range(format!("time {t} outside [0, 1]")));
        }
        Ok(x.scale(self.coefficient(t)))
    }

    /// `Var(x₁ − x₀ | x_t)`, the floor of the L2 flow-matching loss at `t`.
    pub fn conditional_variance(&self, t: f64) -> f64 {
        let (v0, v1) = (self.spec.sigma0.powi(2), self.spec.sigma1.powi(2));
        let var_t = (1.0 - t).powi(2) * v0 + t * t * v1;
        let cov = t * v1 - (1.0 - t) * v0;
        v0 + v1 - cov * cov / var_t
    }

    /// Exact flow map `x₀ ↦ x₀·exp(∫₀ᵗ a)`.
    pub fn flow_map(&self, x0: f64, t: f64) -> Result<f64> {
        linear_ode_solution(&|u| self.coefficient(u), x0, t)
    }
}

impl VelocityField for GaussianFlow {
    fn velocity(&self, x: &Tensor, _cond: &Tensor, t: &[f64]) -> Result<Tensor> {
        let w: Vec<f64> = t.iter().map(|&ti| self.coefficient(ti)).collect();
        x.scale_rows(&w)
    }
}

/// Draws `[n, dim, 1, 1]` couplings from the Gaussian endpoints.
impl CouplingSampler for GaussianFlowSpec {
    fn sample(&mut self, n: usize, rng: &mut SeededRng) -> Result<(Tensor, Tensor, Tensor)> {
        let d = self.dim;
        let mut x0 = Tensor::zeros(&[n, d, 1, 1]);
        let mut x1 = Tensor::zeros(&[n, d, 1, 1]);
        for (a, b) in x0.data_mut().iter_mut().zip(x1.data_mut().iter_mut()) {
            let (p, q) = self.sample_pair(rng);
            *a = p;
            *b = q;
        }
        Ok((x0, x1, Tensor::zeros(&[n, 0, 1, 1])))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_err: f64,
    /// Kish effective sample size `(Σw)²/Σw²`.
    pub ess: f64,
}

/// Fewest effective samples accepted by [`mc_velocity`].
pub const MIN_ESS: f64 = 30.0;
/// Fewest couplings accepted by [`mc_velocity`].
pub const MIN_SAMPLES: usize = 10_000;

/// Nadaraya–Watson estimate of `E[x₁ − x₀ | x_t = x]` with a Gaussian kernel
/// of width `bandwidth`, over `n` couplings drawn from `sampler`.
pub fn mc_velocity(
    x: f64,
    t: f64,
    sampler: &mut dyn FnMut(&mut SeededRng) -> (f64, f64),
    n: usize,
    bandwidth: f64,
    rng: &mut SeededRng,
) -> Result<McEstimate> {
    Ok(mc_velocity_grid(&[x], t, sampler, n, bandwidth, rng)?[0])
}

/// [`mc_velocity`] at several points sharing one set of couplings.
pub fn mc_velocity_grid(
    xs: &[f64],
    t: f64,
    sampler: &mut dyn FnMut(&mut SeededRng) -> (f64, f64),
    n: usize,
    bandwidth: f64,
    rng: &mut SeededRng,
) -> Result<Vec<McEstimate>> {
    if n < MIN_SAMPLES {
        return Err(Error::Usage(format!("Monte-Carlo velocity needs at least {MIN_SAMPLES} samples, got {n}")));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::Config(format!("bandwidth {bandwidth} must be positive")));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Range(format!("time {t} outside [0, 1]")));
    }
    let pairs: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            let (a, b) = sampler(rng);
            ((1.0 - t) * a + t * b, b - a)
        })
        .collect();
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    xs.iter()
        .map(|&x| {
            let (mut sw, mut sw2, mut swd) = (0.0, 0.0, 0.0);
            for &(xt, d) in &pairs {
                let w = (-(xt - x) * (xt - x) * inv).exp();
                sw += w;
                sw2 += w * w;
                swd += w * d;
            }
            if sw == 0.0 {
                return Err(Error::Oracle(format!("no coupling within reach of x = {x} at t = {t}")));
            }
            let ess = sw * sw / sw2;
            if ess < MIN_ESS {
                return Err(Error::Oracle(format!("effective sample size {ess:.1} below {MIN_ESS} at x = {x}, t = {t}")));
            }
            let value = swd / sw;
            let mut var = 0.0;
            for &(xt, d) in &pairs {
                let w = (-(xt - x) * (xt - x) * inv).exp();
                var += w * w * (d - value) * (d - value);
            }
            Ok(McEstimate { value, std_err: var.sqrt() / sw, ess })
        })
        .collect()
}

/// Tolerance of [`integrate`].
pub const QUAD_TOL: f64 = 1e-12;
const QUAD_MAX_DEPTH: u32 = 48;

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute accuracy `tol`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let v = simpson(f, a, b, fa, fm, fb, whole, tol, QUAD_MAX_DEPTH)?;
    if !v.is_finite() {
        return Err(Error::Oracle(format!("integrand not finite on [{a}, {b}]")));
    }
    Ok(v)
}

#[allow(clippy::too_many_arguments)]
fn simpson(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(Error::Oracle(format!("quadrature did not converge on [{a}, {b}]")));
    }
    Ok(simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)?
        + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)?)
}

/// Exact solution `x₀·exp(∫₀ᵗ a(u) du)` of `dx/dt = a(t)·x`.
pub fn linear_ode_solution(a: &dyn Fn(f64) -> f64, x0: f64, t: f64) -> Result<f64> {
    Ok(x0 * integrate(a, 0.0, t, QUAD_TOL)?.exp())
}

/// Draws `x₁ = scale·x₀` couplings with `x₀ ~ N(0, 1)`.
pub fn scaled_coupling(scale: f64) -> impl FnMut(&mut SeededRng) -> (f64, f64) {
    move |rng: &mut SeededRng| {
        let a = normal(rng);
        (a, scale * a)
    }
}
