//! Stage one: noise-augmented conditional rectified flow.
//!
//! For a clean sample `x₁` the LR condition is `x_LR = lift(H(x₁) + n)`, the
//! source point is the VP perturbation `x₀ = √(1−σ_p²)·x_LR + σ_p·ε`, and the
//! network regresses `x₁ − x₀` from `(x_t, x_LR, t)` with
//! `x_t = (1−t)·x₀ + t·x₁` and `t ~ U[t_min, t_max]` drawn per batch item.
//!
//! Without a degradation the condition has zero channels and `x_LR ≡ 0`, so
//! `x₀ = σ_p·ε`: an unconditional flow from `N(0, σ_p²)` to the data.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::degradation::{build_lr_condition_with, DegradationSpec};
use crate::error::{Error, Result};
use crate::model::{ArchSpec, ParamVars, VelocityModel};
use crate::optim::{ema_update, OptimizerState, ParamGrads};
use crate::random::{randn, seeded, SeededRng};
use crate::solvers::CouplingSampler;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Discrepancy {
    L1,
    L2,
}

impl Discrepancy {
    pub fn name(self) -> &'static str {
        match self {
            Discrepancy::L1 => "l1",
            Discrepancy::L2 => "l2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            other => Err(Error::Config(format!("unknown discrepancy {other:?} (expected l1 or l2)"))),
        }
    }

    /// Records the mean discrepancy of `residual` over batch and elements.
    pub fn record(self, g: &mut Graph, residual: Var) -> Var {
        let e = match self {
            Discrepancy::L1 => g.abs(residual),
            Discrepancy::L2 => g.square(residual),
        };
        g.mean(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub sigma_p: f64,
    /// `None` trains an unconditional flow from `N(0, σ_p²)`.
    pub degradation: Option<DegradationSpec>,
    pub discrepancy: Discrepancy,
    pub t_min: f64,
    pub t_max: f64,
    pub batch: usize,
    pub iterations: usize,
    pub lr: f64,
    pub warmup: u64,
    pub ema_ratio: f64,
    pub seed: u64,
}

impl Default for FlowConfig {
    /// Clean 4× SR defaults: σ_p = 0.1, ℓ1, t ∈ [0.01, 0.99], Adam 1e-4 with
    /// 1k warmup steps, EMA 0.9999.
    fn default() -> Self {
        Self {
            sigma_p: 0.1,
            degradation: Some(DegradationSpec { scale: 4, kernel: Default::default(), sigma_n: 0.0 }),
            discrepancy: Discrepancy::L1,
            t_min: 0.01,
            t_max: 0.99,
            batch: 32,
            iterations: 300_000,
            lr: 1e-4,
            warmup: 1000,
            ema_ratio: 0.9999,
            seed: 0,
        }
    }
}

impl FlowConfig {
    /// Noisy-SR defaults (σ_n = 0.05, σ_p = 0.5).
    pub fn noisy() -> Self {
        Self {
            sigma_p: 0.5,
            degradation: Some(DegradationSpec { scale: 4, kernel: Default::default(), sigma_n: 0.05 }),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_sigma_p(self.sigma_p)?;
        if let Some(d) = &self.degradation {
            d.validate()?;
        }
        check_t_range(self.t_min, self.t_max)?;
        if self.batch == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema_ratio) {
            return Err(Error::Config(format!("EMA ratio {} outside [0, 1)", self.ema_ratio)));
        }
        Ok(())
    }
}

pub(crate) fn check_t_range(t_min: f64, t_max: f64) -> Result<()> {
    if !(0.0 <= t_min && t_min < t_max && t_max <= 1.0) {
        return Err(Error::Config(format!("time range [{t_min}, {t_max}] must satisfy 0 <= t_min < t_max <= 1")));
    }
    Ok(())
}

fn check_sigma_p(sigma_p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&sigma_p) {
        return Err(Error::Config(format!("perturbation std {sigma_p} outside [0, 1]")));
    }
    Ok(())
}

/// VP perturbation `√(1−σ_p²)·x_LR + σ_p·ε`.
pub fn perturb(x_lr: &Tensor, sigma_p: f64, eps: &Tensor) -> Result<Tensor> {
    check_sigma_p(sigma_p)?;
    let keep = (1.0 - sigma_p * sigma_p).sqrt();
    x_lr.zip_map(eps, |x, e| keep * x + sigma_p * e)
}

/// `(1−t)·x₀ + t·x₁`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    x0.zip_map(x1, |a, b| (1.0 - t) * a + t * b)
}

/// [`interpolate`] with one `t` per batch item.
pub fn interpolate_rows(x0: &Tensor, x1: &Tensor, t: &[f64]) -> Result<Tensor> {
    x0.check_same_shape(x1)?;
    if t.len() != x0.batch() {
        return Err(Error::Dimension(format!("{} times for batch of {}", t.len(), x0.batch())));
    }
    let n = x0.item_len();
    let mut out = x0.clone();
    for (i, &ti) in t.iter().enumerate() {
        for (o, b) in out.row_mut(i).iter_mut().zip(&x1.data()[i * n..(i + 1) * n]) {
            *o = (1.0 - ti) * *o + ti * b;
        }
    }
    Ok(out)
}

/// `t ~ U[t_min, t_max]`.
pub fn sample_time(rng: &mut SeededRng, t_min: f64, t_max: f64) -> f64 {
    rng.random_range(t_min..=t_max)
}

/// LR condition and perturbed source for a batch of clean samples.
#[derive(Debug, Clone)]
pub struct Conditioned {
    pub x0: Tensor,
    pub cond: Tensor,
}

/// Builds `(x₀, x_LR)` for `x1`. Noise draws: measurement noise, then ε.
pub fn condition_batch(
    x1: &Tensor,
    degradation: Option<&DegradationSpec>,
    sigma_p: f64,
    rng: &mut SeededRng,
) -> Result<Conditioned> {
    if x1.rank() != 4 {
        return Err(Error::Dimension(format!("expected [B, C, H, W] samples, got {:?}", x1.shape())));
    }
    let (x_lr, cond) = match degradation {
        Some(d) => {
            let c = build_lr_condition_with(x1, d, rng)?;
            (c.clone(), c)
        }
        None => {
            let s = x1.shape();
            (Tensor::zeros(s), Tensor::zeros(&[s[0], 0, s[2], s[3]]))
        }
    };
    let eps = randn(x1.shape(), rng);
    let x0 = perturb(&x_lr, sigma_p, &eps)?;
    Ok(Conditioned { x0, cond })
}

/// One training batch of couplings.
#[derive(Debug, Clone)]
pub struct FlowBatch {
    pub x0: Tensor,
    pub x1: Tensor,
    pub cond: Tensor,
    pub t: Vec<f64>,
}

pub fn draw_flow_batch(x1: &Tensor, cfg: &FlowConfig, rng: &mut SeededRng) -> Result<FlowBatch> {
    if x1.batch() == 0 {
        return Err(Error::Usage("empty batch".into()));
    }
    let Conditioned { x0, cond } = condition_batch(x1, cfg.degradation.as_ref(), cfg.sigma_p, rng)?;
    let t = (0..x1.batch()).map(|_| sample_time(rng, cfg.t_min, cfg.t_max)).collect();
    Ok(FlowBatch { x0, x1: x1.clone(), cond, t })
}

/// Records `mean 𝔻(v(x_t, x_LR, t), x₁ − x₀)`.
pub fn record_flow_loss(
    g: &mut Graph,
    arch: &ArchSpec,
    params: &ParamVars,
    batch: &FlowBatch,
    discrepancy: Discrepancy,
) -> Result<Var> {
    let xt = interpolate_rows(&batch.x0, &batch.x1, &batch.t)?;
    let target = batch.x1.sub(&batch.x0)?;
    let xt = g.constant(xt);
    let cond = g.constant(batch.cond.clone());
    let v = arch.forward(g, params, xt, cond, &batch.t)?;
    let target = g.constant(target);
    let r = g.sub(v, target)?;
    Ok(discrepancy.record(g, r))
}

/// Flow-matching loss of the live parameters on `x1` and its gradients.
pub fn flow_matching_loss(model: &VelocityModel, x1: &Tensor, cfg: &FlowConfig, seed: u64) -> Result<(f64, ParamGrads)> {
    let batch = draw_flow_batch(x1, cfg, &mut seeded(seed))?;
    let mut g = Graph::new();
    let p = model.params().register(&mut g);
    let loss = record_flow_loss(&mut g, model.arch(), &p, &batch, cfg.discrepancy)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), g.param_grads(&grads)))
}

/// Something that yields batches of clean samples `[B, C, H, W]`.
pub trait DataSource {
    fn draw(&mut self, n: usize, rng: &mut SeededRng) -> Result<Tensor>;
}

/// Uniform draws with replacement from a fixed set of samples.
#[derive(Debug, Clone)]
pub struct TensorPool {
    samples: Tensor,
}

impl TensorPool {
    pub fn new(samples: Tensor) -> Result<Self> {
        if samples.rank() != 4 || samples.batch() == 0 {
            return Err(Error::Usage(format!("dataset must be a nonempty [N, C, H, W] tensor, got {:?}", samples.shape())));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }
}

impl DataSource for TensorPool {
    fn draw(&mut self, n: usize, rng: &mut SeededRng) -> Result<Tensor> {
        let len = self.samples.batch();
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..len)).collect();
        Ok(self.samples.gather(&idx))
    }
}

/// Fresh `N(0, std²)` samples of a fixed shape.
#[derive(Debug, Clone)]
pub struct GaussianSource {
    pub std: f64,
    pub shape: [usize; 3],
}

impl DataSource for GaussianSource {
    fn draw(&mut self, n: usize, rng: &mut SeededRng) -> Result<Tensor> {
        let [c, h, w] = self.shape;
        Ok(randn(&[n, c, h, w], rng).scale(self.std))
    }
}

/// Couplings `(x₀, x₁, cond)` drawn the way training draws them.
#[derive(Debug, Clone)]
pub struct FlowCoupling<S> {
    pub source: S,
    pub degradation: Option<DegradationSpec>,
    pub sigma_p: f64,
}

impl<S: DataSource> CouplingSampler for FlowCoupling<S> {
    fn sample(&mut self, n: usize, rng: &mut SeededRng) -> Result<(Tensor, Tensor, Tensor)> {
        let x1 = self.source.draw(n, rng)?;
        let Conditioned { x0, cond } = condition_batch(&x1, self.degradation.as_ref(), self.sigma_p, rng)?;
        Ok((x0, x1, cond))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug)]
pub struct TrainRun {
    /// Trained model, or the last good state if training aborted.
    pub model: VelocityModel,
    pub trace: Vec<TraceRow>,
    /// Diagnostic if training stopped on a non-finite loss or gradient.
    pub aborted: Option<Error>,
}

/// Runs `cfg.iterations` Adam steps on the flow-matching loss, updating the
/// EMA after each step.
pub fn train_teacher(mut model: VelocityModel, source: &mut dyn DataSource, cfg: &FlowConfig) -> Result<TrainRun> {
    cfg.validate()?;
    model.check_mutable("train_teacher")?;
    let expected_cond = if cfg.degradation.is_some() { model.arch().channels } else { 0 };
    if model.arch().cond_channels != expected_cond {
        return Err(Error::Config(format!(
            "model has {} condition channels, configuration needs {expected_cond}",
            model.arch().cond_channels
        )));
    }
    let mut rng = seeded(cfg.seed);
    let mut opt = OptimizerState::new(model.params(), cfg.lr, cfg.warmup)?;
    let mut trace = Vec::with_capacity(cfg.iterations);
    let start = Instant::now();
    for it in 0..cfg.iterations {
        let x1 = source.draw(cfg.batch, &mut rng)?;
        let batch = draw_flow_batch(&x1, cfg, &mut rng)?;
        let mut g = Graph::new();
        let p = model.params().register(&mut g);
        let loss = record_flow_loss(&mut g, model.arch(), &p, &batch, cfg.discrepancy)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            let err = Error::TrainingAborted { iteration: it, reason: format!("loss is {value}") };
            return Ok(TrainRun { model, trace, aborted: Some(err) });
        }
        let grads = g.param_grads(&g.backward(loss)?);
        // Adam validates every gradient before touching the weights.
        let lr = match model.apply_adam(&mut opt, &grads) {
            Ok(lr) => lr,
            Err(e @ Error::NonFinite(_)) => {
                let err = Error::TrainingAborted { iteration: it, reason: e.to_string() };
                return Ok(TrainRun { model, trace, aborted: Some(err) });
            }
            Err(e) => return Err(e),
        };
        ema_update(&mut model, cfg.ema_ratio)?;
        trace.push(TraceRow { iteration: it, loss: value, lr, wall_ms: start.elapsed().as_secs_f64() * 1e3 });
        if (it + 1) % 1000 == 0 {
            log::info!("teacher iteration {} loss {value:.6}", it + 1);
        }
    }
    Ok(TrainRun { model, trace, aborted: None })
}

/// Loss trace as CSV: `iteration,loss,lr,wall_ms`.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("iteration,loss,lr,wall_ms\n");
    for r in rows {
        let _ = writeln!(s, "{},{:e},{:e},{:.3}", r.iteration, r.loss, r.lr, r.wall_ms);
    }
    s
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    std::fs::write(path, trace_csv(rows))?;
    Ok(())
}

/// Trailing moving average with window `w`.
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    if w == 0 || values.len() < w {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len() - w + 1);
    let mut acc: f64 = values[..w].iter().sum();
    out.push(acc / w as f64);
    for i in w..values.len() {
        acc += values[i] - values[i - w];
        out.push(acc / w as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchSpec;

    #[test]
    fn perturb_cases() {
        let x = Tensor::new(vec![3], vec![1.0, -0.5, 0.2]).unwrap();
        let e = Tensor::new(vec![3], vec![0.5, 0.1, -2.0]).unwrap();
        assert_eq!(perturb(&x, 0.0, &e).unwrap(), x);
        assert_eq!(perturb(&x, 1.0, &e).unwrap(), e);
        let one = Tensor::new(vec![1], vec![1.0]).unwrap();
        let half = Tensor::new(vec![1], vec![0.5]).unwrap();
        assert!((perturb(&one, 0.6, &half).unwrap().item() - 1.1).abs() < 1e-15);
        assert!(matches!(perturb(&x, 1.2, &e), Err(Error::Config(_))));
    }

    #[test]
    fn interpolate_cases() {
        let a = Tensor::new(vec![1], vec![0.0]).unwrap();
        let b = Tensor::new(vec![1], vec![2.0]).unwrap();
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
        assert_eq!(interpolate(&a, &b, 0.25).unwrap().item(), 0.5);
        assert_eq!(interpolate(&b, &b, 0.37).unwrap(), b);
    }

    #[test]
    fn time_samples_are_uniform_and_reproducible() {
        let mut rng = seeded(5);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_time(&mut rng, 0.01, 0.99)).collect();
        assert!(draws.iter().all(|&t| (0.01..=0.99).contains(&t)));
        let mean = draws.iter().sum::<f64>() / n as f64;
        let tol = 3.0 * 0.98 / (12.0 * n as f64).sqrt();
        assert!((mean - 0.5).abs() <= tol, "mean {mean}");
        let mut again = seeded(5);
        assert!((0..100).all(|i| sample_time(&mut again, 0.01, 0.99) == draws[i]));
    }

    fn unconditional(discrepancy: Discrepancy) -> FlowConfig {
        FlowConfig { degradation: None, sigma_p: 1.0, discrepancy, ..FlowConfig::default() }
    }

    #[test]
    fn zero_model_l2_loss_is_mean_square_target() {
        let mut m = VelocityModel::init(ArchSpec::mlp(2, 0, vec![8], 4), 1).unwrap();
        m.zero_output_layer().unwrap();
        let x1 = randn(&[16, 2, 1, 1], &mut seeded(2));
        let cfg = unconditional(Discrepancy::L2);
        let (loss, _) = flow_matching_loss(&m, &x1, &cfg, 4).unwrap();
        let b = draw_flow_batch(&x1, &cfg, &mut seeded(4)).unwrap();
        let want = b.x1.sub(&b.x0).unwrap().sq_norm() / b.x1.numel() as f64;
        assert!((loss - want).abs() < 1e-14);
    }

    #[test]
    fn l1_of_constant_residual() {
        let mut g = Graph::new();
        let r = g.constant(Tensor::full(&[4, 3], -0.7));
        let l = Discrepancy::L1.record(&mut g, r);
        assert!((g.value(l).item() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_is_usage_error() {
        let m = VelocityModel::init(ArchSpec::mlp(2, 0, vec![8], 4), 1).unwrap();
        let x1 = Tensor::zeros(&[0, 2, 1, 1]);
        assert!(matches!(
            flow_matching_loss(&m, &x1, &unconditional(Discrepancy::L1), 0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn vp_second_moment_preserved() {
        // E[x_LR²] = 1 (Rademacher), σ_p = 0.5
        let mut rng = seeded(17);
        let n = 100_000;
        let x_lr = Tensor::from_fn(&[n], |_| if rng.random::<bool>() { 1.0 } else { -1.0 });
        let eps = randn(&[n], &mut rng);
        let x0 = perturb(&x_lr, 0.5, &eps).unwrap();
        let m2 = x0.sq_norm() / n as f64;
        assert!((m2 - 1.0).abs() < 0.02, "second moment {m2}");
    }
}
