//! Single-file checkpoint container.
//!
//! Layout (little-endian): magic `LTMCKPT\0`, `u32` format version, `u64`
//! header length, JSON header, `u32` array count, then per array: `u32`
//! name length, UTF-8 name, `u32` rank, `u64` dims, `f32` payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamWConfig;
use super::params::{ClassifierHead, ModelConfig, ParameterSet, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LTMCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    #[serde(default)]
    pub adam: Option<AdamWConfig>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub arrays: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let hlen = r.len()?;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let count = r.u32()?;
        let mut arrays = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint("shape overflow".into()))?;
            let bytes = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("shape overflow".into()))?)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            arrays.push((name, Tensor { shape, data }));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes after last array".into()));
        }
        Ok(Self { header, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn take_into(&self, prefix: &str, names: &[String], targets: Vec<&mut Tensor<f32>>) -> Result<()> {
        for (name, target) in names.iter().zip(targets) {
            let key = format!("{prefix}{name}");
            let t = self.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing array {key}")))?;
            if t.shape != target.shape {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {key}: checkpoint {:?}, model {:?}",
                    t.shape, target.shape
                )));
            }
            target.data.clone_from(&t.data);
        }
        Ok(())
    }

    /// Encoder parameters stored under `prefix`, shaped by the header config.
    pub fn params(&self, prefix: &str) -> Result<ParameterSet<f32>> {
        let mut p = ParameterSet::zeros(&self.header.config);
        let names = p.names();
        self.take_into(prefix, &names, p.tensors_mut())?;
        if !p.all_finite() {
            return Err(Error::Checkpoint("non-finite parameter values".into()));
        }
        Ok(p)
    }

    pub fn classifier(&self, n_classes: usize) -> Result<ClassifierHead<f32>> {
        let d = self.header.config.d_model;
        let mut h = ClassifierHead {
            weight: Tensor::zeros(&[d, n_classes]),
            bias: Tensor::zeros(&[n_classes]),
        };
        let names: Vec<String> = h.names().iter().map(|s| s.to_string()).collect();
        self.take_into("", &names, h.tensors_mut())?;
        Ok(h)
    }
}

pub fn push_params(arrays: &mut Vec<(String, Tensor<f32>)>, prefix: &str, p: &ParameterSet<f32>) {
    for (name, t) in p.names().into_iter().zip(p.tensors()) {
        arrays.push((format!("{prefix}{name}"), t.clone()));
    }
}

/// Loads encoder weights, requiring the architecture to equal `expected`.
pub fn load_encoder(path: &Path, expected: &ModelConfig) -> Result<ParameterSet<f32>> {
    let ck = Checkpoint::load(path)?;
    let found = &ck.header.config;
    if found.vocab_size != expected.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary size mismatch: checkpoint {}, expected {}",
            found.vocab_size, expected.vocab_size
        )));
    }
    if found != expected {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch: checkpoint {found:?}, expected {expected:?}"
        )));
    }
    ck.params("")
}
