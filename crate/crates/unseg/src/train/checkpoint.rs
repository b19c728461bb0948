//! Versioned binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "UNSG"
//! version    u32      currently 1
//! preset     u32 len + UTF-8 bytes
//! input_h    u32
//! input_w    u32
//! epoch      u32
//! val_loss   f64
//! dice       f64
//! jaccard    f64
//! rng_seed   u64      master seed; with `epoch` this pins every derived rng stream
//! n_tensors  u32
//! tensor*    u32 name len + UTF-8, u32 ndim, u32 dims[ndim], f32 data (row-major)
//! ```
//!
//! The tensor table covers parameters and norm buffers, so a restore
//! reproduces eval-mode behavior bit-for-bit. On-disk data is always f32;
//! f64 models are converted on save and load. Writes go to a temp file and
//! rename into place.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::elem::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::unet::UNet;

pub const MAGIC: [u8; 4] = *b"UNSG";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: u32,
    pub val_loss: f64,
    pub dice: f64,
    pub jaccard: f64,
    pub rng_seed: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub preset: String,
    pub input_size: (usize, usize),
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Snapshot a model's tensor table.
    pub fn from_model<E: Element>(model: &mut UNet<E>, meta: CheckpointMeta) -> Self {
        let mut tensors = Vec::new();
        model.visit_tensors(&mut |name, _, t| {
            tensors.push((name.to_string(), t.cast::<f32>()));
        });
        Self {
            preset: model.preset_name().to_string(),
            input_size: model.config.input_size,
            meta,
            tensors,
        }
    }

    /// Write atomically: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        write_string(&mut buf, &self.preset);
        buf.extend_from_slice(&(self.input_size.0 as u32).to_le_bytes());
        buf.extend_from_slice(&(self.input_size.1 as u32).to_le_bytes());
        buf.extend_from_slice(&self.meta.epoch.to_le_bytes());
        buf.extend_from_slice(&self.meta.val_loss.to_le_bytes());
        buf.extend_from_slice(&self.meta.dice.to_le_bytes());
        buf.extend_from_slice(&self.meta.jaccard.to_le_bytes());
        buf.extend_from_slice(&self.meta.rng_seed.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            write_string(&mut buf, name);
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }

        let tmp = temp_path(path);
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor {
            bytes: &bytes,
            pos: 0,
        };

        if cur.take(4)? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch(version));
        }
        let preset = cur.string()?;
        let input_h = cur.u32()? as usize;
        let input_w = cur.u32()? as usize;
        let meta = CheckpointMeta {
            epoch: cur.u32()?,
            val_loss: cur.f64()?,
            dice: cur.f64()?,
            jaccard: cur.f64()?,
            rng_seed: cur.u64()?,
        };
        let n_tensors = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = cur.string()?;
            let ndim = cur.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(cur.u32()? as usize);
            }
            let numel: usize = dims.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(cur.f32()?);
            }
            let t = Tensor::new(dims, data).map_err(|_| Error::TruncatedFile)?;
            tensors.push((name, t));
        }
        Ok(Self {
            preset,
            input_size: (input_h, input_w),
            meta,
            tensors,
        })
    }

    /// Copy the tensor table into an existing model. The model's preset must
    /// match and the name sets must agree exactly.
    pub fn restore_into<E: Element>(&self, model: &mut UNet<E>) -> Result<()> {
        if model.preset_name() != self.preset {
            return Err(Error::PresetMismatch {
                found: self.preset.clone(),
                expected: model.preset_name().to_string(),
            });
        }
        let table: std::collections::HashMap<&str, &Tensor<f32>> = self
            .tensors
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        let mut missing: Vec<String> = Vec::new();
        let mut used = 0usize;
        let mut shape_err: Option<String> = None;
        model.visit_tensors(&mut |name, _, t| {
            match table.get(name) {
                Some(stored) => {
                    if stored.shape() != t.shape() {
                        shape_err.get_or_insert_with(|| {
                            format!(
                                "tensor '{name}': stored {:?} vs model {:?}",
                                stored.shape(),
                                t.shape()
                            )
                        });
                    } else {
                        *t = stored.cast::<E>();
                        used += 1;
                    }
                }
                None => missing.push(name.to_string()),
            }
        });
        if let Some(err) = shape_err {
            return Err(Error::TensorTableMismatch(err));
        }
        if !missing.is_empty() {
            return Err(Error::TensorTableMismatch(format!(
                "missing tensors: {missing:?}"
            )));
        }
        if used != self.tensors.len() {
            return Err(Error::TensorTableMismatch(format!(
                "checkpoint has {} tensors, model consumed {used}",
                self.tensors.len()
            )));
        }
        Ok(())
    }

    /// Construct a fresh model of the stored preset and restore into it.
    pub fn build_model<E: Element>(&self) -> Result<UNet<E>> {
        let preset = crate::encoders::preset(&self.preset)?;
        let config = crate::unet::UNetConfig::for_preset(preset, Some(self.input_size));
        let mut model = UNet::new(config, self.meta.rng_seed)?;
        self.restore_into(&mut model)?;
        Ok(model)
    }
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

fn write_string(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::TruncatedFile);
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::TruncatedFile)
    }
}
