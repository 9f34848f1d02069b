//! Versioned binary container for parameters and optimizer state.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes   "ARDCKPT\0"
//! version      u32
//! meta_count   u32       then meta_count x (key: str, value: str)
//! param_count  u32       then param_count x (name: str, rank: u32, dims: rank x u64, values: n x f64)
//! opt_tag      u8        0 = none, 1 = sgd, 2 = adam
//!   step       u64       (tag 1, 2)
//!   beta1, beta2, eps    f64 (tag 2)
//!   moments    per param: first moment n x f64, then second moment n x f64 (tag 2)
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8 bytes.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Optimizer, OptimizerKind, ParamSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ARDCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParamSet,
    pub optimizer: Option<Optimizer>,
}

pub(crate) struct ByteWriter(pub Vec<u8>);

impl ByteWriter {
    pub fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64s(&mut self, vs: &[f64]) {
        vs.iter().for_each(|&v| self.f64(v));
    }
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated input at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
    pub fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }
}

impl Checkpoint {
    pub fn new(params: ParamSet) -> Self {
        Self {
            meta: BTreeMap::new(),
            params,
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(self.meta.len() as u32);
        for (k, v) in &self.meta {
            w.str(k);
            w.str(v);
        }
        w.u32(self.params.len() as u32);
        for (_, name, t) in self.params.iter() {
            w.str(name);
            w.u32(t.shape().len() as u32);
            t.shape().iter().for_each(|&d| w.u64(d as u64));
            w.f64s(t.values());
        }
        match &self.optimizer {
            None => w.u8(0),
            Some(opt) => match opt.kind {
                OptimizerKind::Sgd => {
                    w.u8(1);
                    w.u64(opt.step);
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    w.u8(2);
                    w.u64(opt.step);
                    w.f64(beta1);
                    w.f64(beta2);
                    w.f64(eps);
                    for (m, v) in opt.first_moment.iter().zip(&opt.second_moment) {
                        w.f64s(m);
                        w.f64s(v);
                    }
                }
            },
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.str()?;
            meta.insert(k, r.str()?);
        }
        let mut params = ParamSet::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape.iter().product();
            let values = r.f64s(n)?;
            params.insert(name, Tensor::new(shape, values)?)?;
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let mut opt = Optimizer::sgd(&params);
                opt.step = r.u64()?;
                Some(opt)
            }
            2 => {
                let step = r.u64()?;
                let kind = OptimizerKind::Adam {
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                };
                let mut opt = Optimizer::new(kind, &params);
                opt.step = step;
                for i in 0..params.len() {
                    let n = opt.first_moment[i].len();
                    opt.first_moment[i] = r.f64s(n)?;
                    opt.second_moment[i] = r.f64s(n)?;
                }
                Some(opt)
            }
            t => return Err(Error::Format(format!("unknown optimizer tag {t}"))),
        };
        if !r.finished() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            meta,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
