//! Versioned checkpoint container.
//!
//! Layout: magic `GFCK`, version u32, header-length u32, JSON header, then
//! tensor records (name length + name, dtype byte, ndim + dims, little-
//! endian payload). Parameters and optimizer moments are stored under the
//! prefixes `param.`, `adam_m.`, `adam_v.`. Training checkpoints are
//! written in f64 so resuming reproduces the next step bitwise; readers
//! accept both dtypes.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamStore;
use crate::train::adamw::{AdamW, AdamWConfig};
use crate::vae::LatentStats;

pub const CKPT_MAGIC: &[u8; 4] = b"GFCK";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Vae,
    Denoiser,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    config: serde_json::Value,
    adamw: Option<AdamWConfig>,
    opt_step: u64,
    latent_stats: Option<LatentStats>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    /// Echo of the model configuration that produced the parameters.
    pub config: serde_json::Value,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
    pub latent_stats: Option<LatentStats>,
}

impl Checkpoint {
    pub fn config_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: self.kind,
            config: self.config.clone(),
            adamw: self.optimizer.as_ref().map(|o| o.config),
            opt_step: self.optimizer.as_ref().map(|o| o.step).unwrap_or(0),
            latent_stats: self.latent_stats.clone(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header_json);

        let mut tensors: Vec<(String, &ArrayD<f64>)> = Vec::new();
        for (name, value) in self.params.iter() {
            tensors.push((format!("param.{name}"), value));
        }
        if let Some(opt) = &self.optimizer {
            for (name, value) in opt.m.iter() {
                tensors.push((format!("adam_m.{name}"), value));
            }
            for (name, value) in opt.v.iter() {
                tensors.push((format!("adam_v.{name}"), value));
            }
        }
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, value) in tensors {
            let name_bytes = name.as_bytes();
            buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
            buf.extend_from_slice(name_bytes);
            buf.push(1); // dtype f64
            buf.extend_from_slice(&(value.ndim() as u32).to_le_bytes());
            for &d in value.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in value.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Truncated(format!(
                    "{}: needed {n} bytes at {}",
                    path.display(),
                    *pos
                )));
            }
            let out = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(out)
        };
        if take(&mut pos, 4)? != CKPT_MAGIC {
            return Err(Error::Format(format!(
                "{}: not a checkpoint file",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(Error::Format(format!(
                "{}: checkpoint version {version}",
                path.display()
            )));
        }
        let header_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(take(&mut pos, header_len)?)?;
        let n_tensors = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;

        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for _ in 0..n_tensors {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Format(format!("{}: non-UTF8 tensor name", path.display())))?;
            let dtype = take(&mut pos, 1)?[0];
            let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = dims.iter().product();
            let values: Vec<f64> = match dtype {
                0 => {
                    let raw = take(&mut pos, numel * 4)?;
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                        .collect()
                }
                1 => {
                    let raw = take(&mut pos, numel * 8)?;
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect()
                }
                other => {
                    return Err(Error::Format(format!(
                        "{}: unknown dtype {other}",
                        path.display()
                    )))
                }
            };
            let tensor = ArrayD::from_shape_vec(IxDyn(&dims), values)
                .map_err(|e| Error::HeaderMismatch(format!("{}: {e}", path.display())))?;
            if let Some(rest) = name.strip_prefix("param.") {
                params.insert(rest, tensor);
            } else if let Some(rest) = name.strip_prefix("adam_m.") {
                m.insert(rest, tensor);
            } else if let Some(rest) = name.strip_prefix("adam_v.") {
                v.insert(rest, tensor);
            } else {
                return Err(Error::Format(format!(
                    "{}: unknown tensor section in {name}",
                    path.display()
                )));
            }
        }
        if pos != bytes.len() {
            return Err(Error::HeaderMismatch(format!(
                "{}: trailing bytes",
                path.display()
            )));
        }
        let optimizer = header.adamw.map(|cfg| {
            let mut opt = AdamW::new(cfg);
            opt.m = m;
            opt.v = v;
            opt.step = header.opt_step;
            opt
        });
        Ok(Self {
            kind: header.kind,
            config: header.config,
            params,
            optimizer,
            latent_stats: header.latent_stats,
        })
    }
}
