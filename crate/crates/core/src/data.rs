//! Synthetic datasets.
//!
//! `toy2d-gmm`: points from an equal-weight Gaussian mixture with components
//! evenly spaced on a circle, stored as `[N, 2, 1, 1]`.
//!
//! `tiny-textures`: `[N, 1, S, S]` images, each a sum of random anisotropic
//! Gaussian blobs plus one sinusoid with integer frequency, clipped to `[−1, 1]`.

use std::f64::consts::PI;
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::random::{normal, seeded, SeededRng};
use crate::tensor::Tensor;

pub const TOY_RADIUS: f64 = 0.75;
pub const TOY_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Toy2d,
    Textures,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Toy2d => "toy2d-gmm",
            DatasetKind::Textures => "tiny-textures",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "toy2d-gmm" | "toy2d" => Ok(DatasetKind::Toy2d),
            "tiny-textures" | "textures" => Ok(DatasetKind::Textures),
            other => Err(Error::Config(format!("unknown dataset kind {other:?}"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub count: usize,
    /// Texture side length (ignored for toy2d).
    pub side: usize,
    /// SR scale the textures must support.
    pub scale: usize,
    /// Mixture components (toy2d).
    pub components: usize,
    /// Gaussian blobs per image (textures).
    pub blobs: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn toy2d(count: usize, seed: u64) -> Self {
        Self { kind: DatasetKind::Toy2d, count, side: 1, scale: 1, components: 8, blobs: 0, seed }
    }

    /// 32×32 textures for 4× SR.
    pub fn textures(count: usize, seed: u64) -> Self {
        Self { kind: DatasetKind::Textures, count, side: 32, scale: 4, components: 0, blobs: 3, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("dataset count must be >= 1".into()));
        }
        match self.kind {
            DatasetKind::Toy2d if self.components == 0 => {
                Err(Error::Config("mixture needs at least one component".into()))
            }
            DatasetKind::Textures if self.side < 4 => Err(Error::Config(format!("texture side {} below 4", self.side))),
            DatasetKind::Textures if self.scale == 0 || self.side % self.scale != 0 => Err(Error::Dimension(format!(
                "texture side {} not divisible by scale {}",
                self.side, self.scale
            ))),
            _ => Ok(()),
        }
    }

    /// Shape of one sample `[C, H, W]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        match self.kind {
            DatasetKind::Toy2d => [2, 1, 1],
            DatasetKind::Textures => [1, self.side, self.side],
        }
    }

    pub fn generate(&self) -> Result<Tensor> {
        self.validate()?;
        match self.kind {
            DatasetKind::Toy2d => gen_toy2d(self.count, self.components, self.seed),
            DatasetKind::Textures => Ok(gen_tiny_textures(self, self.seed)?.0),
        }
    }
}

/// Centre of mixture component `j` of `k`.
pub fn toy_center(j: usize, k: usize) -> (f64, f64) {
    let a = 2.0 * PI * j as f64 / k as f64;
    (TOY_RADIUS * a.cos(), TOY_RADIUS * a.sin())
}

/// `count` mixture samples as `[count, 2, 1, 1]`.
pub fn gen_toy2d(count: usize, components: usize, seed: u64) -> Result<Tensor> {
    if count == 0 {
        return Err(Error::Config("dataset count must be >= 1".into()));
    }
    if components == 0 {
        return Err(Error::Config("mixture needs at least one component".into()));
    }
    let mut rng = seeded(seed);
    let mut data = Vec::with_capacity(2 * count);
    for _ in 0..count {
        let (cx, cy) = toy_center(rng.random_range(0..components), components);
        data.push(cx + TOY_STD * normal(&mut rng));
        data.push(cy + TOY_STD * normal(&mut rng));
    }
    Tensor::new(vec![count, 2, 1, 1], data)
}

/// Parameters of the sinusoid in one texture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sinusoid {
    /// Cycles per image along columns and rows.
    pub fx: i64,
    pub fy: i64,
    pub amplitude: f64,
    pub phase: f64,
}

fn texture(side: usize, blobs: usize, rng: &mut SeededRng) -> (Vec<f64>, Sinusoid) {
    let s = side as f64;
    let fmax = (side / 4).max(1) as i64;
    let (fx, fy) = loop {
        let fx = rng.random_range(0..=fmax);
        let fy = rng.random_range(-fmax..=fmax);
        if fx != 0 || fy > 0 {
            break (fx, fy);
        }
    };
    let sin = Sinusoid { fx, fy, amplitude: rng.random_range(0.3..0.6), phase: rng.random_range(0.0..2.0 * PI) };
    let mut img = vec![0.0; side * side];
    for (idx, v) in img.iter_mut().enumerate() {
        let (i, j) = ((idx / side) as f64, (idx % side) as f64);
        *v = sin.amplitude * (2.0 * PI * (fx as f64 * j + fy as f64 * i) / s + sin.phase).sin();
    }
    for _ in 0..blobs {
        let amp = rng.random_range(-0.8..0.8);
        let (ci, cj) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let major = rng.random_range(s / 16.0..s / 4.0);
        let minor = rng.random_range(s / 16.0..=major);
        let angle = rng.random_range(0.0..PI);
        let (ca, sa) = (angle.cos(), angle.sin());
        for (idx, v) in img.iter_mut().enumerate() {
            let (di, dj) = ((idx / side) as f64 - ci, (idx % side) as f64 - cj);
            let u = ca * dj + sa * di;
            let w = -sa * dj + ca * di;
            *v += amp * (-0.5 * (u * u / (major * major) + w * w / (minor * minor))).exp();
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    (img, sin)
}

/// Textures `[count, 1, side, side]` and the sinusoid of each image.
pub fn gen_tiny_textures(spec: &DatasetSpec, seed: u64) -> Result<(Tensor, Vec<Sinusoid>)> {
    let spec = DatasetSpec { kind: DatasetKind::Textures, ..spec.clone() };
    spec.validate()?;
    let mut rng = seeded(seed);
    let mut data = Vec::with_capacity(spec.count * spec.side * spec.side);
    let mut sines = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let (img, sin) = texture(spec.side, spec.blobs, &mut rng);
        data.extend(img);
        sines.push(sin);
    }
    Ok((Tensor::new(vec![spec.count, 1, spec.side, spec.side], data)?, sines))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_is_deterministic_and_centered() {
        let a = gen_toy2d(20_000, 8, 3).unwrap();
        assert_eq!(a, gen_toy2d(20_000, 8, 3).unwrap());
        assert_ne!(a, gen_toy2d(20_000, 8, 4).unwrap());
        // per-coordinate variance of the mixture: R²/2 + σ²
        let sd = (TOY_RADIUS * TOY_RADIUS / 2.0 + TOY_STD * TOY_STD).sqrt();
        let n = a.batch() as f64;
        for c in 0..2 {
            let m: f64 = (0..a.batch()).map(|i| a.row(i)[c]).sum::<f64>() / n;
            assert!(m.abs() <= 3.0 * sd / n.sqrt(), "coordinate {c} mean {m}");
        }
        assert!(gen_toy2d(0, 8, 1).is_err());
        assert!(gen_toy2d(5, 0, 1).is_err());
    }

    #[test]
    fn textures_are_clipped_and_seeded() {
        let spec = DatasetSpec::textures(8, 1);
        let (a, _) = gen_tiny_textures(&spec, 1).unwrap();
        assert_eq!(a.shape(), &[8, 1, 32, 32]);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_ne!(a, gen_tiny_textures(&spec, 2).unwrap().0);
        assert_ne!(a.select(0), a.select(1));
        let odd = DatasetSpec { side: 30, ..spec };
        assert!(matches!(odd.generate(), Err(Error::Dimension(_))));
    }

    #[test]
    fn sinusoid_frequency_is_the_spectral_peak() {
        let spec = DatasetSpec { blobs: 0, ..DatasetSpec::textures(6, 0) };
        let (imgs, sines) = gen_tiny_textures(&spec, 9).unwrap();
        let n = spec.side;
        for (k, sin) in sines.iter().enumerate() {
            let img = imgs.row(k);
            let mut best = (0.0, 0i64, 0i64);
            for u in 0..n as i64 {
                for v in 0..n as i64 {
                    if u == 0 && v == 0 {
                        continue;
                    }
                    let (mut re, mut im) = (0.0, 0.0);
                    for (idx, &p) in img.iter().enumerate() {
                        let (i, j) = ((idx / n) as f64, (idx % n) as f64);
                        let ang = -2.0 * PI * (u as f64 * j + v as f64 * i) / n as f64;
                        re += p * ang.cos();
                        im += p * ang.sin();
                    }
                    let mag = re * re + im * im;
                    if mag > best.0 {
                        best = (mag, u, v);
                    }
                }
            }
            let m = n as i64;
            let want = [(sin.fx.rem_euclid(m), sin.fy.rem_euclid(m)), ((-sin.fx).rem_euclid(m), (-sin.fy).rem_euclid(m))];
            assert!(want.contains(&(best.1, best.2)), "image {k}: peak {:?}, sinusoid {sin:?}", (best.1, best.2));
        }
    }
}
