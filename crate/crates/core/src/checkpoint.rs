//! The tensor container used for checkpoints and datasets.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FLSR"  u16 version
//! u32 config_len, config_len bytes of UTF-8 config text
//! u32 n_params, then n_params records
//! u32 n_ema,    then n_ema records
//! record: u32 name_len, name, u32 rank, rank × u64 dims, numel × f64
//! ```
//!
//! Model checkpoints keep the architecture (and the training settings that
//! produced them) in the config text; datasets store a single `samples`
//! record and no EMA records.

use std::path::Path;

use crate::config::{take_arch, write_arch, ConfigDoc};
use crate::error::{Error, Result};
use crate::model::{ParamSet, VelocityModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FLSR";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub config: String,
    pub params: Vec<(String, Tensor)>,
    pub ema: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("length fits u32").to_le_bytes());
}

fn put_records(out: &mut Vec<u8>, records: &[(String, Tensor)]) {
    put_u32(out, records.len());
    for (name, t) in records {
        put_u32(out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.rank());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode(c: &Container) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, c.config.len());
    out.extend_from_slice(c.config.as_bytes());
    put_records(&mut out, &c.params);
    put_records(&mut out, &c.ema);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn records(&mut self, what: &str) -> Result<Vec<(String, Tensor)>> {
        let n = self.u32(what)?;
        let mut out = Vec::new();
        for _ in 0..n {
            let len = self.u32("record name length")?;
            let name = String::from_utf8(self.take(len, "record name")?.to_vec())
                .map_err(|_| Error::Corrupt("record name is not UTF-8".into()))?;
            let rank = self.u32("record rank")?;
            let mut shape = Vec::with_capacity(rank.min(16));
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(self.u64("record dims")?)
                    .map_err(|_| Error::Corrupt(format!("dimension of {name} too large")))?;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::Corrupt(format!("shape of {name} overflows")))?;
                shape.push(d);
            }
            let bytes = numel
                .checked_mul(8)
                .ok_or_else(|| Error::Corrupt(format!("payload of {name} overflows")))?;
            let raw = self.take(bytes, "record payload")?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Corrupt(format!("record {name}: {e}")))?;
            out.push((name, t));
        }
        Ok(out)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not an FLSR container (bad magic)".into()));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let len = r.u32("config length")?;
    let config = String::from_utf8(r.take(len, "config text")?.to_vec())
        .map_err(|_| Error::Corrupt("config text is not UTF-8".into()))?;
    let params = r.records("parameter count")?;
    let ema = r.records("EMA count")?;
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Container { config, params, ema })
}

pub fn write_container(path: &Path, c: &Container) -> Result<()> {
    std::fs::write(path, encode(c))?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container> {
    decode(&std::fs::read(path)?)
}

fn to_records(p: &ParamSet) -> Vec<(String, Tensor)> {
    p.iter().map(|(n, t)| (n.clone(), t.clone())).collect()
}

/// Container for a model; `extra` adds sections such as the training settings.
pub fn model_container(model: &VelocityModel, extra: &ConfigDoc) -> Container {
    let mut doc = extra.clone();
    write_arch(&mut doc, model.arch());
    doc.set("model", "frozen", model.is_frozen());
    Container { config: doc.to_text(), params: to_records(model.params()), ema: to_records(model.ema()) }
}

pub fn save_checkpoint(model: &VelocityModel, extra: &ConfigDoc, path: &Path) -> Result<()> {
    write_container(path, &model_container(model, extra))
}

/// Rebuilds a model; returns it with the remaining config sections.
pub fn model_from_container(c: Container) -> Result<(VelocityModel, ConfigDoc)> {
    let mut doc = ConfigDoc::parse(&c.config).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let arch = take_arch(&mut doc).map_err(|e| Error::Format(format!("checkpoint architecture: {e}")))?;
    let frozen: bool = doc.take_or("model", "frozen", false)?;
    let params: ParamSet = c.params.into_iter().collect();
    let ema: ParamSet = c.ema.into_iter().collect();
    let model = VelocityModel::from_parts(arch, params, ema, frozen)
        .map_err(|e| Error::Format(format!("shape table does not match architecture: {e}")))?;
    Ok((model, doc))
}

pub fn load_checkpoint(path: &Path) -> Result<(VelocityModel, ConfigDoc)> {
    model_from_container(read_container(path)?)
}

pub const SAMPLES: &str = "samples";

pub fn save_dataset(path: &Path, config: &ConfigDoc, samples: &Tensor) -> Result<()> {
    let c = Container { config: config.to_text(), params: vec![(SAMPLES.into(), samples.clone())], ema: Vec::new() };
    write_container(path, &c)
}

pub fn load_dataset(path: &Path) -> Result<(Tensor, ConfigDoc)> {
    let c = read_container(path)?;
    let doc = ConfigDoc::parse(&c.config).map_err(|e| Error::Format(format!("dataset config: {e}")))?;
    let samples = c
        .params
        .into_iter()
        .find(|(n, _)| n == SAMPLES)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Format(format!("dataset has no {SAMPLES:?} record")))?;
    if samples.rank() != 4 {
        return Err(Error::Format(format!("dataset samples must be [N, C, H, W], got {:?}", samples.shape())));
    }
    Ok((samples, doc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchSpec;

    fn model() -> VelocityModel {
        VelocityModel::init(ArchSpec::mlp(2, 2, vec![8, 4], 4), 3).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut extra = ConfigDoc::new();
        extra.set("flow", "sigma_p", 0.1);
        let bytes = encode(&model_container(&model(), &extra));
        let (m, doc) = model_from_container(decode(&bytes).unwrap()).unwrap();
        assert_eq!(m, model());
        assert_eq!(doc.get("flow", "sigma_p"), Some("0.1"));
        assert_eq!(encode(&model_container(&m, &doc)), bytes);
    }

    #[test]
    fn typed_errors() {
        let bytes = encode(&model_container(&model(), &ConfigDoc::new()));
        for cut in [5, 20, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode(&v2), Err(Error::Version(2))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Corrupt(_))));
    }

    #[test]
    fn shape_table_checked() {
        let mut c = model_container(&model(), &ConfigDoc::new());
        c.params.pop();
        assert!(matches!(model_from_container(c), Err(Error::Format(_))));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.fsr");
        let x = Tensor::from_fn(&[3, 2, 1, 1], |i| i as f64 * 0.1);
        let mut doc = ConfigDoc::new();
        doc.set("data", "kind", "toy2d-gmm");
        save_dataset(&p, &doc, &x).unwrap();
        let (y, d) = load_dataset(&p).unwrap();
        assert_eq!(x, y);
        assert_eq!(d, doc);
    }
}
