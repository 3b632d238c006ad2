//! Plain-text `key = value` configuration with `[section]` headers.
//!
//! Parsing is strict: malformed lines, duplicate keys and (after a reader has
//! taken what it knows) leftover keys are all errors. Lines starting with `#`
//! are comments. Keys before the first header belong to the unnamed section.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{DatasetKind, DatasetSpec};
use crate::degradation::DegradationSpec;
use crate::distill::{DistillConfig, DistillVariant};
use crate::error::{Error, Result};
use crate::flow::{Discrepancy, FlowConfig};
use crate::model::{ArchSpec, Backbone};
use crate::solvers::SolverKind;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigDoc {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

impl ConfigDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Self::new();
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = i + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .map(str::trim)
                    .filter(|n| valid_name(n))
                    .ok_or_else(|| Error::Config(format!("line {lineno}: malformed section header {line:?}")))?;
                if doc.sections.contains_key(name) {
                    return Err(Error::Config(format!("line {lineno}: duplicate section [{name}]")));
                }
                doc.sections.insert(name.to_string(), BTreeMap::new());
                current = name.to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {lineno}: expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if !valid_name(k) {
                return Err(Error::Config(format!("line {lineno}: invalid key {k:?}")));
            }
            let sec = doc.sections.entry(current.clone()).or_default();
            if sec.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {lineno}: duplicate key {k:?}")));
            }
        }
        Ok(doc)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl ToString) {
        self.sections.entry(section.to_string()).or_default().insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    /// Removes and returns a value.
    pub fn take(&mut self, section: &str, key: &str) -> Option<String> {
        self.sections.get_mut(section)?.remove(key)
    }

    pub fn take_required(&mut self, section: &str, key: &str) -> Result<String> {
        self.take(section, key).ok_or_else(|| Error::Config(format!("missing key {}", qualified(section, key))))
    }

    /// Removes and parses a value, falling back to `default`.
    pub fn take_or<T: FromStr>(&mut self, section: &str, key: &str, default: T) -> Result<T> {
        match self.take(section, key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {v:?} for {}", qualified(section, key)))),
        }
    }

    /// Errors if any key has not been taken.
    pub fn finish(&self) -> Result<()> {
        let left: Vec<String> = self
            .sections
            .iter()
            .flat_map(|(s, m)| m.keys().map(move |k| qualified(s, k)))
            .collect();
        if left.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", left.join(", "))))
        }
    }

    /// Canonical text: sections and keys in sorted order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, map) in &self.sections {
            if !name.is_empty() {
                if !s.is_empty() {
                    s.push('\n');
                }
                let _ = writeln!(s, "[{name}]");
            }
            for (k, v) in map {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        s
    }

    /// Copies every key of `other` into `self`.
    pub fn merge(&mut self, other: &ConfigDoc) {
        for (sec, map) in &other.sections {
            for (k, v) in map {
                self.set(sec, k, v);
            }
        }
    }
}

fn qualified(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("invalid integer list {s:?}"))))
        .collect()
}

fn list_text(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Writes a full architecture under `[arch]`.
pub fn write_arch(doc: &mut ConfigDoc, arch: &ArchSpec) {
    let s = "arch";
    match arch.backbone {
        Backbone::Mlp => doc.set(s, "backbone", "mlp"),
        Backbone::Conv { patch } => {
            doc.set(s, "backbone", "conv");
            doc.set(s, "patch", patch);
        }
    }
    doc.set(s, "channels", arch.channels);
    doc.set(s, "cond_channels", arch.cond_channels);
    doc.set(s, "height", arch.height);
    doc.set(s, "width", arch.width);
    doc.set(s, "widths", list_text(&arch.widths));
    doc.set(s, "time_dim", arch.time_dim);
}

/// Reads a full architecture from `[arch]`.
pub fn take_arch(doc: &mut ConfigDoc) -> Result<ArchSpec> {
    let s = "arch";
    let backbone = match doc.take_required(s, "backbone")?.as_str() {
        "mlp" => Backbone::Mlp,
        "conv" => Backbone::Conv { patch: doc.take_or(s, "patch", 4)? },
        other => return Err(Error::Config(format!("unknown backbone {other:?}"))),
    };
    let arch = ArchSpec {
        backbone,
        channels: doc.take_or(s, "channels", 0)?,
        cond_channels: doc.take_or(s, "cond_channels", 0)?,
        height: doc.take_or(s, "height", 0)?,
        width: doc.take_or(s, "width", 0)?,
        widths: parse_list(&doc.take_required(s, "widths")?)?,
        time_dim: doc.take_or(s, "time_dim", 16)?,
    };
    arch.validate()?;
    Ok(arch)
}

/// Network choices of a run; the sample shape comes from the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchChoice {
    pub backbone: Backbone,
    pub widths: Vec<usize>,
    pub time_dim: usize,
    pub init_seed: u64,
}

impl ArchChoice {
    pub fn build(&self, sample_shape: [usize; 3], conditional: bool) -> Result<ArchSpec> {
        let [c, h, w] = sample_shape;
        let arch = ArchSpec {
            backbone: self.backbone,
            channels: c,
            cond_channels: if conditional { c } else { 0 },
            height: h,
            width: w,
            widths: self.widths.clone(),
            time_dim: self.time_dim,
        };
        arch.validate()?;
        Ok(arch)
    }
}

fn take_arch_choice(doc: &mut ConfigDoc) -> Result<ArchChoice> {
    let s = "arch";
    let backbone = match doc.take_or(s, "backbone", "mlp".to_string())?.as_str() {
        "mlp" => Backbone::Mlp,
        "conv" => Backbone::Conv { patch: doc.take_or(s, "patch", 4)? },
        other => return Err(Error::Config(format!("unknown backbone {other:?}"))),
    };
    Ok(ArchChoice {
        backbone,
        widths: parse_list(&doc.take_or(s, "widths", "64,64".to_string())?)?,
        time_dim: doc.take_or(s, "time_dim", 16)?,
        init_seed: doc.take_or(s, "seed", 0)?,
    })
}

/// Writes a flow configuration under `[flow]`.
pub fn write_flow(doc: &mut ConfigDoc, f: &FlowConfig) {
    let s = "flow";
    doc.set(s, "sigma_p", f.sigma_p);
    match &f.degradation {
        Some(d) => {
            doc.set(s, "condition", "lr");
            doc.set(s, "scale", d.scale);
            doc.set(s, "sigma_n", d.sigma_n);
        }
        None => doc.set(s, "condition", "none"),
    }
    doc.set(s, "discrepancy", f.discrepancy.name());
    doc.set(s, "t_min", f.t_min);
    doc.set(s, "t_max", f.t_max);
    doc.set(s, "batch", f.batch);
    doc.set(s, "iterations", f.iterations);
    doc.set(s, "lr", f.lr);
    doc.set(s, "warmup", f.warmup);
    doc.set(s, "ema", f.ema_ratio);
    doc.set(s, "seed", f.seed);
}

/// Reads `[flow]`, defaulting missing keys to [`FlowConfig::default`].
pub fn take_flow(doc: &mut ConfigDoc) -> Result<FlowConfig> {
    let s = "flow";
    let d = FlowConfig::default();
    let sigma_p = doc.take_or(s, "sigma_p", d.sigma_p)?;
    let degradation = match doc.take_or(s, "condition", "lr".to_string())?.as_str() {
        "lr" => Some(DegradationSpec::new(doc.take_or(s, "scale", 4)?, doc.take_or(s, "sigma_n", 0.0)?)?),
        "none" => None,
        other => return Err(Error::Config(format!("condition must be lr or none, got {other:?}"))),
    };
    let cfg = FlowConfig {
        sigma_p,
        degradation,
        discrepancy: Discrepancy::parse(&doc.take_or(s, "discrepancy", d.discrepancy.name().to_string())?)?,
        t_min: doc.take_or(s, "t_min", d.t_min)?,
        t_max: doc.take_or(s, "t_max", d.t_max)?,
        batch: doc.take_or(s, "batch", d.batch)?,
        iterations: doc.take_or(s, "iterations", d.iterations)?,
        lr: doc.take_or(s, "lr", d.lr)?,
        warmup: doc.take_or(s, "warmup", d.warmup)?,
        ema_ratio: doc.take_or(s, "ema", d.ema_ratio)?,
        seed: doc.take_or(s, "seed", d.seed)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Writes the distillation settings under `[distill]`; conditioning lives in `[flow]`.
pub fn write_distill(doc: &mut ConfigDoc, c: &DistillConfig) {
    let s = "distill";
    doc.set(s, "dt", c.dt);
    doc.set(s, "lambda_align", c.lambda_align);
    doc.set(s, "lambda_bc", c.lambda_bc);
    doc.set(s, "variant", c.variant.name());
    doc.set(s, "slope", c.slope.name());
    doc.set(s, "t_min", c.t_min);
    doc.set(s, "t_max", c.t_max);
    doc.set(s, "batch", c.batch);
    doc.set(s, "iterations", c.iterations);
    doc.set(s, "lr", c.lr);
    doc.set(s, "warmup", c.warmup);
    doc.set(s, "ema", c.ema_ratio);
    doc.set(s, "seed", c.seed);
}

/// Reads `[distill]` on top of the teacher's flow settings.
pub fn take_distill(doc: &mut ConfigDoc, flow: &FlowConfig) -> Result<DistillConfig> {
    let s = "distill";
    let d = DistillConfig::for_flow(flow);
    let cfg = DistillConfig {
        dt: doc.take_or(s, "dt", d.dt)?,
        lambda_align: doc.take_or(s, "lambda_align", d.lambda_align)?,
        lambda_bc: doc.take_or(s, "lambda_bc", d.lambda_bc)?,
        variant: DistillVariant::parse(&doc.take_or(s, "variant", d.variant.name().to_string())?)?,
        slope: SolverKind::parse(&doc.take_or(s, "slope", d.slope.name().to_string())?)?,
        t_min: doc.take_or(s, "t_min", d.t_min)?,
        t_max: doc.take_or(s, "t_max", d.t_max)?,
        batch: doc.take_or(s, "batch", d.batch)?,
        iterations: doc.take_or(s, "iterations", d.iterations)?,
        lr: doc.take_or(s, "lr", d.lr)?,
        warmup: doc.take_or(s, "warmup", d.warmup)?,
        ema_ratio: doc.take_or(s, "ema", d.ema_ratio)?,
        seed: doc.take_or(s, "seed", d.seed)?,
        ..d
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Writes a dataset spec under `[data]`.
pub fn write_data(doc: &mut ConfigDoc, d: &DatasetSpec) {
    let s = "data";
    doc.set(s, "kind", d.kind.name());
    doc.set(s, "count", d.count);
    doc.set(s, "side", d.side);
    doc.set(s, "scale", d.scale);
    doc.set(s, "components", d.components);
    doc.set(s, "blobs", d.blobs);
    doc.set(s, "seed", d.seed);
}

/// Reads `[data]`; `kind` and `count` are required, the rest default per kind.
pub fn take_data(doc: &mut ConfigDoc) -> Result<DatasetSpec> {
    let s = "data";
    let kind = DatasetKind::parse(&doc.take_required(s, "kind")?)?;
    let count = doc.take_or(s, "count", 0)?;
    let seed = doc.take_or(s, "seed", 0)?;
    let d = match kind {
        DatasetKind::Toy2d => DatasetSpec::toy2d(count, seed),
        DatasetKind::Textures => DatasetSpec::textures(count, seed),
    };
    let spec = DatasetSpec {
        side: doc.take_or(s, "side", d.side)?,
        scale: doc.take_or(s, "scale", d.scale)?,
        components: doc.take_or(s, "components", d.components)?,
        blobs: doc.take_or(s, "blobs", d.blobs)?,
        ..d
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Teacher,
    Distill,
}

/// A training run read from a config file.
#[derive(Debug, Clone, PartialEq)]
pub enum RunConfig {
    Teacher { data: PathBuf, output: PathBuf, arch: ArchChoice, flow: FlowConfig },
    /// `distill` holds only the `[distill]` keys; conditioning comes from the teacher.
    Distill { data: PathBuf, output: PathBuf, teacher: PathBuf, distill: ConfigDoc },
}

impl RunConfig {
    pub fn stage(&self) -> Stage {
        match self {
            RunConfig::Teacher { .. } => Stage::Teacher,
            RunConfig::Distill { .. } => Stage::Distill,
        }
    }

    /// Parses a run config; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut doc = ConfigDoc::parse(text)?;
        let path = |doc: &mut ConfigDoc, key: &str| -> Result<PathBuf> {
            let p = PathBuf::from(doc.take_required("run", key)?);
            Ok(if p.is_absolute() { p } else { base.join(p) })
        };
        let stage = doc.take_required("run", "stage")?;
        let data = path(&mut doc, "data")?;
        let output = path(&mut doc, "output")?;
        let run = match stage.as_str() {
            "teacher" => {
                let arch = take_arch_choice(&mut doc)?;
                let flow = take_flow(&mut doc)?;
                RunConfig::Teacher { data, output, arch, flow }
            }
            "distill" => {
                let teacher = path(&mut doc, "teacher")?;
                let mut distill = ConfigDoc::new();
                let keys: Vec<String> = doc.sections.get("distill").map(|m| m.keys().cloned().collect()).unwrap_or_default();
                for k in keys {
                    let v = doc.take("distill", &k).expect("listed key");
                    distill.set("distill", &k, v);
                }
                // check the keys now against neutral flow settings
                let mut probe = distill.clone();
                take_distill(&mut probe, &FlowConfig::default())?;
                probe.finish()?;
                RunConfig::Distill { data, output, teacher, distill }
            }
            other => return Err(Error::Config(format!("stage must be teacher or distill, got {other:?}"))),
        };
        doc.finish()?;
        Ok(run)
    }

    /// Reads and parses `path`, then checks that the input files exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let run = Self::parse(&text, path.parent().unwrap_or(Path::new(".")))?;
        let inputs = match &run {
            RunConfig::Teacher { data, .. } => vec![data],
            RunConfig::Distill { data, teacher, .. } => vec![data, teacher],
        };
        if let Some(missing) = inputs.into_iter().find(|p| !p.is_file()) {
            return Err(Error::Config(format!("referenced file {} does not exist", missing.display())));
        }
        Ok(run)
    }
}
