//! Versioned little-endian checkpoint container.
//!
//! ```text
//! magic      8 bytes  "CDDCKPT\0"
//! version    u32      currently 1
//! step       u64      optimizer step counter
//! n_meta     u32
//!   key      str
//!   value    str
//! n_tensors  u32
//!   name     str
//!   ndim     u32
//!   dims     u64 × ndim
//!   data     f64 × prod(dims), row-major
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8 bytes. Metadata and tensors
//! are written in ascending key order, so equal contents give equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::network::Model;
use crate::tensor::Tensor;
use crate::training::OptimizerState;

pub const MAGIC: [u8; 8] = *b"CDDCKPT\0";
pub const VERSION: u32 = 1;

/// Metadata key holding the run configuration as TOML.
pub const META_CONFIG: &str = "config";
/// Metadata key naming what the file holds (teacher, student, slim).
pub const META_KIND: &str = "kind";
/// Metadata key for the training mode that produced a student.
pub const META_MODE: &str = "mode";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Model tensors plus the run configuration they were trained under.
    pub fn from_model(model: &Model, run: &RunConfig, kind: &str, step: u64) -> Self {
        let mut meta = BTreeMap::new();
        meta.insert(META_CONFIG.to_string(), run.to_toml());
        meta.insert(META_KIND.to_string(), kind.to_string());
        Self {
            step,
            meta,
            tensors: model.to_named_tensors().into_iter().collect(),
        }
    }

    pub fn with_optimizer(mut self, opt: &OptimizerState) -> Self {
        self.step = opt.step;
        self.tensors.extend(opt.to_named_tensors());
        self
    }

    pub fn kind(&self) -> Option<&str> {
        self.meta.get(META_KIND).map(String::as_str)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let text = self
            .meta
            .get(META_CONFIG)
            .ok_or_else(|| Error::Compat("checkpoint carries no run configuration".into()))?;
        RunConfig::from_toml(text)
    }

    /// Rebuild the stored model. Layer widths come from the tensor shapes,
    /// so slim models load as well.
    pub fn model(&self) -> Result<Model> {
        let run = self.run_config()?;
        Model::from_named_tensors(&run.model_config(false), &self.tensors)
    }

    pub fn optimizer(&self, model: &Model) -> Result<OptimizerState> {
        OptimizerState::from_named_tensors(model, self.step, &self.tensors)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_u32(&mut out, self.meta.len());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parse a container; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).map_err(&fail)? != MAGIC {
            return Err(fail("bad magic".into()));
        }
        let version = r.u32().map_err(&fail)?;
        if version != VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let step = r.u64().map_err(&fail)?;
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32().map_err(&fail)? {
            let k = r.string().map_err(&fail)?;
            let v = r.string().map_err(&fail)?;
            meta.insert(k, v);
        }
        let mut tensors = BTreeMap::new();
        for _ in 0..r.u32().map_err(&fail)? {
            let name = r.string().map_err(&fail)?;
            let ndim = r.u32().map_err(&fail)? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(
                    usize::try_from(r.u64().map_err(&fail)?)
                        .map_err(|_| fail(format!("{name}: extent overflow")))?,
                );
            }
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&c| c <= (bytes.len() - r.pos) / 8)
                .ok_or_else(|| fail(format!("{name}: shape {shape:?} exceeds file")))?;
            let raw = r.take(count * 8).map_err(&fail)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| fail(format!("{name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(fail(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            step,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_u32(out: &mut Vec<u8>, n: usize) {
    let n = u32::try_from(n).expect("container field exceeds u32");
    out.extend_from_slice(&n.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "string is not UTF-8".to_string())
    }
}
