//! Versioned binary checkpoints: named f32 parameter tensors plus the model
//! configuration echoed as text.
//!
//! Layout (all integers little-endian u32 unless noted):
//!
//! ```text
//! magic "OTCK" | version | config_len | config utf-8 | param_count
//! then per parameter: name_len | name | ndim | dims... | f32 data
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::KvMap;
use crate::detector::model::{build_model, Model};
use crate::detector::ModelConfig;
use crate::error::{Error, Result};
use crate::numkit::tensor::Tensor;
use crate::rng::Rng;

const MAGIC: &[u8; 4] = b"OTCK";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, model: &Model<f32>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let config_text = model.config.to_kv().to_text();
    buf.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_text.as_bytes());
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, p) in model.params.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Data(format!("{}: truncated checkpoint", self.path)));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parsed checkpoint: configuration echo plus named tensors.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
        path: path.display().to_string(),
    };
    if r.take(4)? != MAGIC {
        return Err(Error::Data(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let config_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| Error::Data(format!("{}: bad config block", path.display())))?;
    let kv = KvMap::parse(config_text, &format!("{}#config", path.display()))?;
    let config = ModelConfig::from_kv(&kv)?;

    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Data(format!("{}: bad tensor name", path.display())))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(Checkpoint { config, tensors })
}

/// Rebuild the exact model stored in a checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model<f32>> {
    let mut rng = Rng::seed_from(0);
    let mut model: Model<f32> = build_model(&ckpt.config, &mut rng)?;
    let transferred = load_overlapping(&mut model, &ckpt.tensors);
    if transferred != model.params.len() {
        return Err(Error::Data(format!(
            "checkpoint restores {transferred} of {} parameters",
            model.params.len()
        )));
    }
    Ok(model)
}

/// Copy tensors whose name and shape match; returns how many transferred.
/// This is the warm-start mechanism for the baseline -> temporal ->
/// temporal+CBAM chain.
pub fn load_overlapping(model: &mut Model<f32>, tensors: &[(String, Tensor<f32>)]) -> usize {
    let mut transferred = 0;
    for (name, tensor) in tensors {
        if let Some(id) = model.params.by_name(name) {
            let p = model.params.get_mut(id);
            if p.value.shape() == tensor.shape() {
                p.value = tensor.clone();
                transferred += 1;
            }
        }
    }
    transferred
}
