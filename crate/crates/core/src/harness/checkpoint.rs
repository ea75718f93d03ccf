//! Versioned binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "PLCK" | u32 version | u64 seed | [u8; 32] sha256(config json)
//! u32 config length | config json
//! u32 section count | sections…
//!
//! section: u8 tag | u16 name length | name | u64 payload length | payload
//!   tag 1, dense tensor:   u32 rows | u32 cols | u8 trainable | rows·cols × f64
//!   tag 2, quantized base: one PQT1 block
//!   tag 3, AdaLoRA state:  u32 rank | rank × u8 mask | u64 schedule step
//! ```
//!
//! Loading parses and checks the whole file before any state is built, so a
//! truncated or corrupt file never yields a partially restored model.

use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::run::build_skeleton;
use crate::error::{Error, Result};
use crate::model::{BaseWeight, ToyTransformer};
use crate::quant::QuantizedTensor;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const TAG_DENSE: u8 = 1;
const TAG_QUANTIZED: u8 = 2;
const TAG_ADALORA: u8 = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum SectionData {
    Dense { tensor: Tensor, trainable: bool },
    Quantized(QuantizedTensor),
    AdaLora { mask: Vec<bool>, schedule_step: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub data: SectionData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub config: ExperimentConfig,
    pub sections: Vec<Section>,
}

impl Checkpoint {
    /// Snapshot of every dense parameter, quantized base, and AdaLoRA
    /// mask/schedule position in `model`.
    pub fn capture(config: &ExperimentConfig, model: &ToyTransformer) -> Self {
        let mut sections = Vec::new();
        for (_, name, t) in model.params.iter() {
            if t.is_empty() {
                continue;
            }
            let mut tensor = Tensor::from_vec(t.rows(), t.cols(), t.data().to_vec()).expect("shape");
            tensor.set_requires_grad(false);
            sections.push(Section {
                name: name.to_string(),
                data: SectionData::Dense {
                    tensor,
                    trainable: t.requires_grad(),
                },
            });
        }
        for p in model.projections() {
            if let BaseWeight::Quantized(q) = &p.base {
                sections.push(Section {
                    name: p.name.clone(),
                    data: SectionData::Quantized((**q).clone()),
                });
            }
        }
        for (name, a) in model.adapters() {
            if let Some(a) = a.as_adalora() {
                sections.push(Section {
                    name: name.to_string(),
                    data: SectionData::AdaLora {
                        mask: a.mask().to_vec(),
                        schedule_step: a.schedule.step,
                    },
                });
            }
        }
        Self {
            seed: config.seed,
            config: config.clone(),
            sections,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = self.config.to_json();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&Sha256::digest(json.as_bytes()));
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            let (tag, payload) = match &s.data {
                SectionData::Dense { tensor, trainable } => {
                    let mut p = Vec::with_capacity(9 + tensor.len() * 8);
                    p.extend_from_slice(&(tensor.rows() as u32).to_le_bytes());
                    p.extend_from_slice(&(tensor.cols() as u32).to_le_bytes());
                    p.push(u8::from(*trainable));
                    for v in tensor.data() {
                        p.extend_from_slice(&v.to_le_bytes());
                    }
                    (TAG_DENSE, p)
                }
                SectionData::Quantized(q) => (TAG_QUANTIZED, q.to_bytes()),
                SectionData::AdaLora { mask, schedule_step } => {
                    let mut p = Vec::with_capacity(12 + mask.len());
                    p.extend_from_slice(&(mask.len() as u32).to_le_bytes());
                    p.extend(mask.iter().map(|&m| u8::from(m)));
                    p.extend_from_slice(&(*schedule_step as u64).to_le_bytes());
                    (TAG_ADALORA, p)
                }
            };
            out.push(tag);
            out.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad magic, expected PLCK"));
        }
        let version_at = r.pos;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                version_at,
                format!("unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
            ));
        }
        let seed = r.u64("seed")?;
        let hash: [u8; 32] = r.take(32, "config hash")?.try_into().unwrap();
        let len = r.u32("config length")? as usize;
        let json_at = r.pos;
        let json = r.take(len, "config")?;
        if Sha256::digest(json).as_slice() != hash {
            return Err(Error::format(json_at, "config hash mismatch"));
        }
        let text = std::str::from_utf8(json).map_err(|_| Error::format(json_at, "config is not UTF-8"))?;
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::format(json_at, format!("config: {e}")))?;

        let count = r.u32("section count")? as usize;
        let mut sections = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let tag_at = r.pos;
            let tag = r.u8("section tag")?;
            let name_len = r.u16("name length")? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "section name")?)
                .map_err(|_| Error::format(name_at, "section name is not UTF-8"))?
                .to_string();
            let payload_len = r.u64("payload length")? as usize;
            let payload_at = r.pos;
            let payload = r.take(payload_len, "section payload")?;
            let data = match tag {
                TAG_DENSE => parse_dense(payload, payload_at)?,
                TAG_QUANTIZED => SectionData::Quantized(QuantizedTensor::from_bytes(payload).map_err(|e| match e {
                    Error::Format { offset, reason } => Error::format(payload_at + offset, reason),
                    other => other,
                })?),
                TAG_ADALORA => parse_adalora(payload, payload_at)?,
                other => return Err(Error::format(tag_at, format!("unknown section tag {other}"))),
            };
            sections.push(Section { name, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos, "trailing bytes after last section"));
        }
        Ok(Self {
            seed,
            config,
            sections,
        })
    }

    /// Rebuilds the model: the architecture comes from the stored config and
    /// every stored section overwrites its counterpart. The section set must
    /// match the architecture exactly.
    pub fn restore(&self) -> Result<ToyTransformer> {
        let (mut model, _) = build_skeleton(&self.config)?;
        let mut dense_seen = 0;
        for s in &self.sections {
            match &s.data {
                SectionData::Dense { tensor, trainable } => {
                    let id = model
                        .params
                        .find(&s.name)
                        .ok_or_else(|| Error::Integrity(format!("checkpoint tensor '{}' unknown to model", s.name)))?;
                    let slot = model.params.get_mut(id);
                    if slot.shape() != tensor.shape() {
                        return Err(Error::Integrity(format!(
                            "tensor '{}' has shape {:?}, model expects {:?}",
                            s.name,
                            tensor.shape(),
                            slot.shape()
                        )));
                    }
                    slot.data_mut().copy_from_slice(tensor.data());
                    model.params.set_trainable(id, *trainable);
                    dense_seen += 1;
                }
                SectionData::Quantized(q) => {
                    let proj = model
                        .projection_by_name_mut(&s.name)
                        .ok_or_else(|| Error::Integrity(format!("quantized weight '{}' unknown to model", s.name)))?;
                    match &proj.base {
                        BaseWeight::Quantized(old) if old.shape() == q.shape() => {}
                        _ => {
                            return Err(Error::Integrity(format!(
                                "'{}' is not a quantized base of shape {:?}",
                                s.name,
                                q.shape()
                            )))
                        }
                    }
                    proj.base = BaseWeight::Quantized(Arc::new(q.clone()));
                }
                SectionData::AdaLora { mask, schedule_step } => {
                    let mut store = std::mem::take(&mut model.params);
                    let applied = (|| {
                        let proj = model
                            .projection_by_name_mut(&s.name)
                            .ok_or_else(|| Error::Integrity(format!("adapter '{}' unknown to model", s.name)))?;
                        let a = proj
                            .adapter
                            .as_mut()
                            .and_then(|a| a.as_adalora_mut())
                            .ok_or_else(|| Error::Integrity(format!("'{}' has no AdaLoRA adapter", s.name)))?;
                        a.set_mask(&mut store, mask.clone())?;
                        a.schedule.step = *schedule_step;
                        Ok::<_, Error>(())
                    })();
                    model.params = store;
                    applied?;
                }
            }
        }
        let expected = model.params.iter().filter(|(_, _, t)| !t.is_empty()).count();
        if dense_seen != expected {
            return Err(Error::Integrity(format!(
                "checkpoint holds {dense_seen} dense tensors, model has {expected}"
            )));
        }
        Ok(model)
    }
}

fn parse_dense(p: &[u8], base: usize) -> Result<SectionData> {
    let mut r = Reader { bytes: p, pos: 0 };
    let rows = r.u32("rows").map_err(|e| shift(e, base))? as usize;
    let cols = r.u32("cols").map_err(|e| shift(e, base))? as usize;
    let trainable = r.u8("trainable flag").map_err(|e| shift(e, base))? != 0;
    if p.len() != 9 + rows * cols * 8 {
        return Err(Error::format(base, format!("dense payload of {} bytes for {rows}×{cols}", p.len())));
    }
    let data = p[9..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(SectionData::Dense {
        tensor: Tensor::from_vec(rows, cols, data)?,
        trainable,
    })
}

fn parse_adalora(p: &[u8], base: usize) -> Result<SectionData> {
    let mut r = Reader { bytes: p, pos: 0 };
    let rank = r.u32("rank").map_err(|e| shift(e, base))? as usize;
    let mask_at = r.pos;
    let mask = r.take(rank, "mask").map_err(|e| shift(e, base))?;
    if let Some(i) = mask.iter().position(|&m| m > 1) {
        return Err(Error::format(base + mask_at + i, "mask byte must be 0 or 1"));
    }
    let mask = mask.iter().map(|&m| m == 1).collect();
    let step = r.u64("schedule step").map_err(|e| shift(e, base))? as usize;
    if r.pos != p.len() {
        return Err(Error::format(base + r.pos, "trailing bytes in AdaLoRA section"));
    }
    Ok(SectionData::AdaLora {
        mask,
        schedule_step: step,
    })
}

fn shift(e: Error, base: usize) -> Error {
    match e {
        Error::Format { offset, reason } => Error::format(base + offset, reason),
        other => other,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(path: &Path, config: &ExperimentConfig, model: &ToyTransformer) -> Result<()> {
    std::fs::write(path, Checkpoint::capture(config, model).to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ExperimentConfig, ToyTransformer)> {
    let ck = Checkpoint::from_bytes(&std::fs::read(path)?)?;
    let model = ck.restore()?;
    Ok((ck.config, model))
}
