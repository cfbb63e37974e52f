//! Model checkpoints.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic     4 bytes  "DCSM"
//! version   u32      1
//! config    u32 length + UTF-8 model config (`key = value` lines)
//! meta      u32 length + UTF-8 JSON (training position, normalization)
//! count     u32      number of tensors
//! tensors   count × (u32 name length, name, tensor block)
//! ```
//!
//! Parameters are stored as `param.<name>`, optimizer moments as
//! `optim.m.<name>` / `optim.v.<name>`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::Optimizer;
use crate::tensor::Tensor;
use crate::train::{TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCSM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Next epoch to run.
    pub epoch: usize,
    pub seed: u64,
    pub optimizer: String,
    pub optimizer_step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm: Option<NormStats>,
    #[serde(default)]
    pub classes: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
    /// `(m, v)` moments in parameter order, when saved.
    pub optimizer_moments: Option<(Vec<Tensor>, Vec<Tensor>)>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, norm: Option<NormStats>, classes: Vec<String>) -> Self {
        Self {
            model: state.model.clone(),
            meta: CheckpointMeta {
                epoch: state.epoch,
                seed: state.seed,
                optimizer: state.optimizer.kind.name().to_string(),
                optimizer_step: state.optimizer.step,
                norm,
                classes,
            },
            optimizer_moments: Some((state.optimizer.m.clone(), state.optimizer.v.clone())),
        }
    }

    /// Restores a training state; the optimizer kind comes from `cfg` and
    /// must match the saved one.
    pub fn into_state(self, cfg: &TrainConfig) -> Result<TrainState> {
        let kind = cfg.optimizer_kind();
        if kind.name() != self.meta.optimizer {
            return Err(Error::Config(format!(
                "checkpoint optimizer {} does not match configured {}",
                self.meta.optimizer,
                kind.name()
            )));
        }
        let mut optimizer = Optimizer::new(kind, &self.model.params);
        let (m, v) = self
            .optimizer_moments
            .ok_or_else(|| Error::Config("checkpoint has no optimizer state".into()))?;
        if m.len() != optimizer.m.len() || v.len() != optimizer.v.len() {
            return Err(Error::Version {
                what: "checkpoint optimizer state",
                found: m.len() as u32,
                expected: optimizer.m.len() as u32,
            });
        }
        optimizer.m = m;
        optimizer.v = v;
        optimizer.step = self.meta.optimizer_step;
        Ok(TrainState {
            model: self.model,
            optimizer,
            epoch: self.meta.epoch,
            seed: self.meta.seed,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        write_str(&mut out, &self.model.cfg.to_text());
        write_str(&mut out, &serde_json::to_string(&self.meta)?);
        let params = &self.model.params;
        let mut entries: Vec<(String, &Tensor)> = params.iter().map(|(n, t)| (format!("param.{n}"), t)).collect();
        if let Some((m, v)) = &self.optimizer_moments {
            entries.extend(params.names().iter().zip(m).map(|(n, t)| (format!("optim.m.{n}"), t)));
            entries.extend(params.names().iter().zip(v).map(|(n, t)| (format!("optim.v.{n}"), t)));
        }
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in entries {
            write_str(&mut out, &name);
            t.write_to(&mut out).expect("writing to a Vec cannot fail");
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        let mut r = bytes;
        let fmt = |r: &[u8], reason: String| Error::Format {
            context: context.to_string(),
            offset: bytes.len() - r.len(),
            reason,
        };
        let magic = take(&mut r, 4).map_err(|e| fmt(r, e))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(fmt(bytes, "not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r).map_err(|e| fmt(r, e))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let cfg_text = read_str(&mut r).map_err(|e| fmt(r, e))?;
        let cfg = ModelConfig::from_text(&cfg_text)?;
        let meta_text = read_str(&mut r).map_err(|e| fmt(r, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&meta_text)?;
        let count = read_u32(&mut r).map_err(|e| fmt(r, e))? as usize;
        let mut tensors = std::collections::HashMap::with_capacity(count);
        for _ in 0..count {
            let name = read_str(&mut r).map_err(|e| fmt(r, e))?;
            let at = bytes.len() - r.len();
            let t = Tensor::read_from(&mut r, context).map_err(|e| match e {
                Error::Format { context, offset, reason } => Error::Format {
                    context,
                    offset: at + offset,
                    reason,
                },
                other => other,
            })?;
            tensors.insert(name, t);
        }
        let mut model = Model::new(cfg, 0)?;
        let names: Vec<String> = model.params.names().to_vec();
        let mismatch = |name: &str| {
            log::error!("checkpoint tensor {name:?} is missing, unexpected or mis-shaped");
            Error::Version {
                what: "checkpoint parameter table",
                found: count as u32,
                expected: names.len() as u32,
            }
        };
        for n in &names {
            let t = tensors.remove(&format!("param.{n}")).ok_or_else(|| mismatch(n))?;
            model.params.set(n, t).map_err(|_| mismatch(n))?;
        }
        let moments = if tensors.is_empty() {
            None
        } else {
            let mut m = Vec::with_capacity(names.len());
            let mut v = Vec::with_capacity(names.len());
            for n in &names {
                m.push(tensors.remove(&format!("optim.m.{n}")).ok_or_else(|| mismatch(n))?);
                if let Some(t) = tensors.remove(&format!("optim.v.{n}")) {
                    v.push(t);
                }
            }
            Some((m, v))
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(mismatch(extra));
        }
        Ok(Self {
            model,
            meta,
            optimizer_moments: moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> std::result::Result<&'a [u8], String> {
    if r.len() < n {
        return Err(format!("truncated: needed {n} bytes, {} left", r.len()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_u32(r: &mut &[u8]) -> std::result::Result<u32, String> {
    Ok(u32::from_le_bytes(take(r, 4)?.try_into().unwrap()))
}

fn read_str(r: &mut &[u8]) -> std::result::Result<String, String> {
    let n = read_u32(r)? as usize;
    let raw = take(r, n)?;
    String::from_utf8(raw.to_vec()).map_err(|e| format!("invalid UTF-8: {e}"))
}
