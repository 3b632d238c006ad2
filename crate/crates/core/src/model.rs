//! Velocity networks `v(x, cond, t)`.
//!
//! Two backbones share one interface. The MLP flattens `x` and the condition
//! and concatenates the sinusoidal time embedding onto the input of every
//! hidden layer. The conv net concatenates `x` and the condition along the
//! channel axis, patchifies with a strided conv, runs 3×3 convs at the coarse
//! resolution and maps back with a strided transposed conv. Its time embedding
//! enters every hidden layer through a learned per-channel projection, which
//! is what concatenating the embedding as constant channels amounts to. The
//! conv output also gets a time-gated per-channel skip `α(t)⊙x + β(t)⊙cond`
//! (the `cond` term only when it has as many channels as `x`), so the
//! near-identity parts of the velocity do not have to pass through the
//! patchified bottleneck.
//!
//! Initialization: weights ~ U(−1/√fan_in, 1/√fan_in), biases zero, parameters
//! drawn in name order from a ChaCha8 stream seeded with the model seed.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Highest angular frequency of the time embedding.
pub const TIME_FREQ_MAX: f64 = 30.0;
/// Ratio between the highest and lowest embedding frequency.
pub const TIME_FREQ_BASE: f64 = 1.0e4;

/// Sinusoidal embedding `[sin(ω_k t) .. , cos(ω_k t) ..]` with
/// `ω_k = TIME_FREQ_MAX · TIME_FREQ_BASE^(−k / (d/2))`, `k = 0 .. d/2`.
pub fn time_embedding(t: f64, dim: usize) -> Result<Tensor> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!("time embedding dimension {dim} must be even")));
    }
    check_time(t)?;
    let mut out = vec![0.0; dim];
    embed_into(t, &mut out);
    Ok(Tensor::from_parts(vec![dim], out))
}

/// Frequencies used by [`time_embedding`].
pub fn time_frequencies(dim: usize) -> Vec<f64> {
    let half = dim / 2;
    (0..half)
        .map(|k| TIME_FREQ_MAX * TIME_FREQ_BASE.powf(-(k as f64) / half as f64))
        .collect()
}

fn embed_into(t: f64, out: &mut [f64]) {
    let half = out.len() / 2;
    for (k, w) in time_frequencies(out.len()).into_iter().enumerate() {
        out[k] = (w * t).sin();
        out[half + k] = (w * t).cos();
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Range(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Named parameter tensors with deterministic (sorted) iteration order.
#[derive(Clone, PartialEq, Default)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl fmt::Debug for ParamSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map().entries(self.tensors.iter().map(|(k, v)| (k, v.shape()))).finish()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Replaces a tensor, refusing to change its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if slot.shape() != t.shape() {
            return Err(Error::Dimension(format!(
                "parameter {name} has shape {:?}, refusing {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        *slot = t;
        Ok(())
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Same names and shapes.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    /// Registers every tensor as a trainable parameter of `g`.
    pub fn register(&self, g: &mut Graph) -> ParamVars {
        ParamVars(self.tensors.iter().map(|(n, t)| (n.clone(), g.param(n, t.clone()))).collect())
    }

    /// Adds every tensor to `g` as a constant.
    pub fn constants(&self, g: &mut Graph) -> ParamVars {
        ParamVars(self.tensors.iter().map(|(n, t)| (n.clone(), g.constant(t.clone()))).collect())
    }

    /// Registers every tensor as a trainable parameter under `prefix` + name.
    pub fn register_prefixed(&self, g: &mut Graph, prefix: &str) -> ParamVars {
        ParamVars(
            self.tensors
                .iter()
                .map(|(n, t)| (n.clone(), g.param(&format!("{prefix}{n}"), t.clone())))
                .collect(),
        )
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self { tensors: iter.into_iter().collect() }
    }
}

/// Graph handles for a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct ParamVars(BTreeMap<String, Var>);

impl ParamVars {
    fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backbone {
    Mlp,
    /// Strided conv / 3×3 conv / strided transposed conv with the given patch size.
    Conv { patch: usize },
}

/// Layer descriptors of a velocity network. Activation is always SiLU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub backbone: Backbone,
    /// Channels of `x` (and of the output velocity).
    pub channels: usize,
    /// Channels of the condition concatenated to `x`.
    pub cond_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Hidden widths (MLP units or conv channels).
    pub widths: Vec<usize>,
    pub time_dim: usize,
}

impl ArchSpec {
    pub fn mlp(channels: usize, cond_channels: usize, widths: Vec<usize>, time_dim: usize) -> Self {
        Self { backbone: Backbone::Mlp, channels, cond_channels, height: 1, width: 1, widths, time_dim }
    }

    pub fn conv(
        channels: usize,
        cond_channels: usize,
        side: usize,
        patch: usize,
        widths: Vec<usize>,
        time_dim: usize,
    ) -> Self {
        Self {
            backbone: Backbone::Conv { patch },
            channels,
            cond_channels,
            height: side,
            width: side,
            widths,
            time_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("sample shape must be positive".into()));
        }
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!("hidden widths must be positive, got {:?}", self.widths)));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config(format!("time dimension {} must be even and positive", self.time_dim)));
        }
        if let Backbone::Conv { patch } = self.backbone {
            if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
                return Err(Error::Config(format!(
                    "patch {patch} must divide {}x{}",
                    self.height, self.width
                )));
            }
        }
        Ok(())
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn cond_len(&self) -> usize {
        self.cond_channels * self.height * self.width
    }

    /// Names and shapes of every parameter, with the fan-in used for init.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let d_t = self.time_dim;
        let mut out = Vec::new();
        match self.backbone {
            Backbone::Mlp => {
                let mut fan_in = self.sample_len() + self.cond_len();
                for (i, &w) in self.widths.iter().enumerate() {
                    let inp = fan_in + d_t;
                    out.push((format!("mlp.{i}.weight"), vec![inp, w], inp));
                    out.push((format!("mlp.{i}.bias"), vec![w], inp));
                    fan_in = w;
                }
                out.push(("mlp.out.weight".into(), vec![fan_in, self.sample_len()], fan_in));
                out.push(("mlp.out.bias".into(), vec![self.sample_len()], fan_in));
            }
            Backbone::Conv { patch } => {
                let cin = self.channels + self.cond_channels;
                let w0 = self.widths[0];
                let fan = cin * patch * patch + d_t;
                out.push(("conv.0.weight".into(), vec![w0, cin, patch, patch], fan));
                out.push(("conv.0.bias".into(), vec![w0], fan));
                out.push(("conv.0.time".into(), vec![d_t, w0], fan));
                for i in 1..self.widths.len() {
                    let (a, b) = (self.widths[i - 1], self.widths[i]);
                    let fan = a * 9 + d_t;
                    out.push((format!("conv.{i}.weight"), vec![b, a, 3, 3], fan));
                    out.push((format!("conv.{i}.bias"), vec![b], fan));
                    out.push((format!("conv.{i}.time"), vec![d_t, b], fan));
                }
                let last = *self.widths.last().unwrap();
                out.push(("conv.out.weight".into(), vec![last, self.channels, patch, patch], last));
                out.push(("conv.out.bias".into(), vec![self.channels], last));
                out.push(("conv.out.skip_x".into(), vec![d_t, self.channels], d_t));
                if self.cond_channels == self.channels {
                    out.push(("conv.out.skip_cond".into(), vec![d_t, self.channels], d_t));
                }
            }
        }
        out
    }

    /// Records `v(x, cond, t)` on `g`. `x` is `[B, C, H, W]`, `cond` is
    /// `[B, Cc, H, W]`, `t` holds one time per batch item.
    pub fn forward(&self, g: &mut Graph, p: &ParamVars, x: Var, cond: Var, t: &[f64]) -> Result<Var> {
        let xs = g.value(x).shape().to_vec();
        let cs = g.value(cond).shape().to_vec();
        let [c, h, w] = self.sample_shape();
        if xs.len() != 4 || xs[1..] != [c, h, w] {
            return Err(Error::Dimension(format!("x has shape {xs:?}, model expects [B, {c}, {h}, {w}]")));
        }
        let batch = xs[0];
        if cs != [batch, self.cond_channels, h, w] {
            return Err(Error::Dimension(format!(
                "condition has shape {cs:?}, model expects [{batch}, {}, {h}, {w}]",
                self.cond_channels
            )));
        }
        if t.len() != batch {
            return Err(Error::Dimension(format!("{} times for batch of {batch}", t.len())));
        }
        let mut emb = vec![0.0; batch * self.time_dim];
        for (i, &ti) in t.iter().enumerate() {
            check_time(ti)?;
            embed_into(ti, &mut emb[i * self.time_dim..(i + 1) * self.time_dim]);
        }
        let emb = g.constant(Tensor::from_parts(vec![batch, self.time_dim], emb));

        match self.backbone {
            Backbone::Mlp => {
                let xf = g.reshape(x, &[batch, self.sample_len()])?;
                let mut hidden = if self.cond_channels > 0 {
                    let cf = g.reshape(cond, &[batch, self.cond_len()])?;
                    g.concat(&[xf, cf])?
                } else {
                    xf
                };
                for i in 0..self.widths.len() {
                    let inp = g.concat(&[hidden, emb])?;
                    let z = g.matmul(inp, p.get(&format!("mlp.{i}.weight"))?)?;
                    let z = g.add_bias(z, p.get(&format!("mlp.{i}.bias"))?)?;
                    hidden = g.silu(z);
                }
                let o = g.matmul(hidden, p.get("mlp.out.weight")?)?;
                let o = g.add_bias(o, p.get("mlp.out.bias")?)?;
                g.reshape(o, &[batch, c, h, w])
            }
            Backbone::Conv { patch } => {
                let mut hcur = if self.cond_channels > 0 { g.concat(&[x, cond])? } else { x };
                for i in 0..self.widths.len() {
                    let (stride, pad) = if i == 0 { (patch, 0) } else { (1, 1) };
                    let z = g.conv2d(hcur, p.get(&format!("conv.{i}.weight"))?, stride, pad)?;
                    let z = g.add_bias(z, p.get(&format!("conv.{i}.bias"))?)?;
                    let tb = g.matmul(emb, p.get(&format!("conv.{i}.time"))?)?;
                    let z = g.add_channel_bias(z, tb)?;
                    hcur = g.silu(z);
                }
                let o = g.conv_transpose2d(hcur, p.get("conv.out.weight")?, patch, 0)?;
                let o = g.add_bias(o, p.get("conv.out.bias")?)?;
                let alpha = g.matmul(emb, p.get("conv.out.skip_x")?)?;
                let sx = g.scale_channels(x, alpha)?;
                let mut o = g.add(o, sx)?;
                if self.cond_channels == self.channels {
                    let beta = g.matmul(emb, p.get("conv.out.skip_cond")?)?;
                    let sc = g.scale_channels(cond, beta)?;
                    o = g.add(o, sc)?;
                }
                Ok(o)
            }
        }
    }
}

/// Draws a parameter set for `arch` from `seed`.
pub fn init_params(arch: &ArchSpec, seed: u64) -> Result<ParamSet> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layout = arch.param_layout();
    layout.sort_by(|a, b| a.0.cmp(&b.0));
    let mut ps = ParamSet::new();
    for (name, shape, fan_in) in layout {
        let t = if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound))
        };
        ps.insert(&name, t)?;
    }
    Ok(ps)
}

/// A velocity network with its EMA shadow copy.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    arch: ArchSpec,
    params: ParamSet,
    ema: ParamSet,
    frozen: bool,
}

impl VelocityModel {
    pub fn init(arch: ArchSpec, seed: u64) -> Result<Self> {
        let params = init_params(&arch, seed)?;
        Ok(Self { arch, ema: params.clone(), params, frozen: false })
    }

    /// Assembles a model from stored tensors, checking them against `arch`.
    pub fn from_parts(arch: ArchSpec, params: ParamSet, ema: ParamSet, frozen: bool) -> Result<Self> {
        arch.validate()?;
        let expected: ParamSet = arch
            .param_layout()
            .into_iter()
            .map(|(n, s, _)| (n, Tensor::zeros(&s)))
            .collect();
        if !expected.same_layout(&params) || !expected.same_layout(&ema) {
            return Err(Error::Config("parameter tensors do not match the architecture".into()));
        }
        Ok(Self { arch, params, ema, frozen })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn ema(&self) -> &ParamSet {
        &self.ema
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub(crate) fn check_mutable(&self, what: &str) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen(format!("{what} on a frozen model")));
        }
        Ok(())
    }

    pub(crate) fn params_mut(&mut self, what: &str) -> Result<&mut ParamSet> {
        self.check_mutable(what)?;
        Ok(&mut self.params)
    }

    pub(crate) fn ema_and_params_mut(&mut self, what: &str) -> Result<(&mut ParamSet, &ParamSet)> {
        self.check_mutable(what)?;
        Ok((&mut self.ema, &self.params))
    }

    /// Overwrites both live and EMA weights, e.g. to initialize a student from a teacher.
    pub fn load_weights(&mut self, weights: &ParamSet) -> Result<()> {
        self.check_mutable("load_weights")?;
        if !self.params.same_layout(weights) {
            return Err(Error::Config("weights do not match the architecture".into()));
        }
        self.params = weights.clone();
        self.ema = weights.clone();
        Ok(())
    }

    /// Evaluates the velocity with an explicit parameter set, without recording gradients.
    pub fn forward_with(&self, params: &ParamSet, x: &Tensor, cond: &Tensor, t: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = params.constants(&mut g);
        let xv = g.constant(x.clone());
        let cv = g.constant(cond.clone());
        let out = self.arch.forward(&mut g, &p, xv, cv, t)?;
        Ok(g.value(out).clone())
    }

    /// Velocity under the live parameters.
    pub fn forward(&self, x: &Tensor, cond: &Tensor, t: &[f64]) -> Result<Tensor> {
        self.forward_with(&self.params, x, cond, t)
    }

    /// Velocity under the EMA parameters (used for sampling and evaluation).
    pub fn forward_ema(&self, x: &Tensor, cond: &Tensor, t: &[f64]) -> Result<Tensor> {
        self.forward_with(&self.ema, x, cond, t)
    }

    /// Zeroes the output layer so the velocity is identically zero.
    pub fn zero_output_layer(&mut self) -> Result<()> {
        self.check_mutable("zero_output_layer")?;
        let names: Vec<String> = self
            .params
            .names()
            .filter(|n| n.starts_with("mlp.out.") || n.starts_with("conv.out."))
            .cloned()
            .collect();
        for n in names {
            let shape = self.params.get(&n).unwrap().shape().to_vec();
            self.params.set(&n, Tensor::zeros(&shape))?;
            self.ema.set(&n, Tensor::zeros(&shape))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn toy_arch() -> ArchSpec {
        ArchSpec::mlp(2, 2, vec![16, 16], 8)
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = VelocityModel::init(toy_arch(), 7).unwrap();
        let b = VelocityModel::init(toy_arch(), 7).unwrap();
        let c = VelocityModel::init(toy_arch(), 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        assert_eq!(a.params(), a.ema());
        assert_eq!(a.params().get("mlp.out.weight").unwrap().shape()[1], 2);
    }

    #[test]
    fn zero_width_is_config_error() {
        let arch = ArchSpec::mlp(2, 2, vec![16, 0], 8);
        assert!(matches!(VelocityModel::init(arch, 1), Err(Error::Config(_))));
        let odd = ArchSpec::mlp(2, 2, vec![16], 7);
        assert!(matches!(VelocityModel::init(odd, 1), Err(Error::Config(_))));
    }

    #[test]
    fn embedding_values() {
        let e = time_embedding(0.0, 8).unwrap();
        assert_eq!(e.numel(), 8);
        assert!(e.data()[..4].iter().all(|&v| v == 0.0));
        assert!(e.data()[4..].iter().all(|&v| v == 1.0));
        assert!(matches!(time_embedding(0.5, 7), Err(Error::Config(_))));
        // Lipschitz bound from |d/dt sin(ωt)| <= ω
        let d = 16;
        let wmax = time_frequencies(d).into_iter().fold(0.0, f64::max);
        for &t in &[0.0, 0.3, 0.77, 0.999] {
            let a = time_embedding(t, d).unwrap();
            let b = time_embedding(t + 1e-6, d).unwrap();
            let dist = a.sub(&b).unwrap().sq_norm().sqrt();
            assert!(dist <= wmax * 1e-6 * (d as f64).sqrt());
        }
    }

    #[test]
    fn forward_shapes_and_purity() {
        for arch in [toy_arch(), ArchSpec::conv(1, 1, 8, 4, vec![4, 4], 4)] {
            let m = VelocityModel::init(arch.clone(), 3).unwrap();
            let [c, h, w] = arch.sample_shape();
            let x = randn(&[3, c, h, w], 1);
            let cond = randn(&[3, arch.cond_channels, h, w], 2);
            let t = [0.1, 0.5, 0.9];
            let v1 = m.forward(&x, &cond, &t).unwrap();
            let v2 = m.forward(&x, &cond, &t).unwrap();
            assert_eq!(v1.shape(), x.shape());
            assert_eq!(v1, v2);
            let bad = randn(&[3, c + 1, h, w], 4);
            assert!(matches!(m.forward(&bad, &cond, &t), Err(Error::Dimension(_))));
        }
    }

    #[test]
    fn zero_final_layer_gives_zero_velocity() {
        let mut m = VelocityModel::init(ArchSpec::conv(1, 1, 8, 2, vec![3, 3], 4), 5).unwrap();
        m.zero_output_layer().unwrap();
        let x = randn(&[2, 1, 8, 8], 9);
        let cond = randn(&[2, 1, 8, 8], 10);
        let v = m.forward(&x, &cond, &[0.2, 0.8]).unwrap();
        assert!(v.data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn frozen_model_rejects_mutation() {
        let mut m = VelocityModel::init(toy_arch(), 1).unwrap();
        m.freeze();
        assert!(matches!(m.zero_output_layer(), Err(Error::Frozen(_))));
        let w = m.params().clone();
        assert!(matches!(m.load_weights(&w), Err(Error::Frozen(_))));
    }
}
