//! The measurement model.
//!
//! `H` averages each `s×s` block; `Hᵀ` spreads an LR pixel back over its block
//! with weight `1/s²`; `lift = s²·Hᵀ` replicates it. `lift` is the
//! pseudo-inverse of `H`, so `H(lift(y)) = y` and `lift∘H` is a projection.
//! The LR condition is `lift(H(x₁) + n)` with `n ~ N(0, σ_n²)`.
//!
//! All operators act on the last two axes of a tensor of rank ≥ 2.

use crate::error::{Error, Result};
use crate::random::{normal, seeded, SeededRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Kernel {
    #[default]
    BlockMean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradationSpec {
    pub scale: usize,
    pub kernel: Kernel,
    pub sigma_n: f64,
}

impl DegradationSpec {
    pub fn new(scale: usize, sigma_n: f64) -> Result<Self> {
        let spec = Self { scale, kernel: Kernel::BlockMean, sigma_n };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 {
            return Err(Error::Config("scale factor must be >= 1".into()));
        }
        if !(self.sigma_n.is_finite() && self.sigma_n >= 0.0) {
            return Err(Error::Config(format!("measurement noise std {} must be finite and >= 0", self.sigma_n)));
        }
        Ok(())
    }
}

fn spatial(t: &Tensor) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::Dimension(format!("image tensor needs rank >= 2, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = s[..s.len() - 2].iter().product();
    Ok((planes, h, w))
}

fn with_spatial(t: &Tensor, h: usize, w: usize) -> Vec<usize> {
    let mut s = t.shape().to_vec();
    let n = s.len();
    s[n - 2] = h;
    s[n - 1] = w;
    s
}

/// Block-mean downsampling by `spec.scale`.
pub fn downsample(x: &Tensor, spec: &DegradationSpec) -> Result<Tensor> {
    spec.validate()?;
    let s = spec.scale;
    let (planes, h, w) = spatial(x)?;
    if h % s != 0 || w % s != 0 {
        return Err(Error::Dimension(format!("{h}x{w} image not divisible by scale {s}")));
    }
    let (lh, lw) = (h / s, w / s);
    let inv = 1.0 / (s * s) as f64;
    let src = x.data();
    let mut out = vec![0.0; planes * lh * lw];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                out[(p * lh + i / s) * lw + j / s] += src[(p * h + i) * w + j];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(Tensor::from_parts(with_spatial(x, lh, lw), out))
}

fn spread(y: &Tensor, spec: &DegradationSpec, weight: f64) -> Result<Tensor> {
    spec.validate()?;
    let s = spec.scale;
    let (planes, lh, lw) = spatial(y)?;
    let (h, w) = (lh * s, lw * s);
    let src = y.data();
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                out[(p * h + i) * w + j] = weight * src[(p * lh + i / s) * lw + j / s];
            }
        }
    }
    Ok(Tensor::from_parts(with_spatial(y, h, w), out))
}

/// Exact adjoint of [`downsample`]: each LR value spread as `y/s²` over its block.
pub fn transpose_upsample(y: &Tensor, spec: &DegradationSpec) -> Result<Tensor> {
    spread(y, spec, 1.0 / (spec.scale * spec.scale) as f64)
}

/// Nearest-neighbour replication (`s²·Hᵀ`), a right inverse of [`downsample`].
pub fn lift(y: &Tensor, spec: &DegradationSpec) -> Result<Tensor> {
    spread(y, spec, 1.0)
}

/// `lift(H(x₁) + n)` with measurement noise drawn from `rng`.
pub fn build_lr_condition_with(x1: &Tensor, spec: &DegradationSpec, rng: &mut SeededRng) -> Result<Tensor> {
    let mut lr = downsample(x1, spec)?;
    if spec.sigma_n > 0.0 {
        for v in lr.data_mut() {
            *v += spec.sigma_n * normal(rng);
        }
    }
    lift(&lr, spec)
}

/// [`build_lr_condition_with`] on a fresh stream seeded by `seed`.
pub fn build_lr_condition(x1: &Tensor, spec: &DegradationSpec, seed: u64) -> Result<Tensor> {
    build_lr_condition_with(x1, spec, &mut seeded(seed))
}
