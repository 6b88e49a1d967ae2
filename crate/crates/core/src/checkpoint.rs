//! Versioned binary parameter container.
//!
//! Layout (little-endian): magic `CAPSRCKP`, `u32` version, model kind,
//! fingerprint, `u32` input height and width, `u32` tensor count, then per
//! tensor its name, `u32` rank, `u32` dims and `f64` values. Strings are a
//! `u32` byte length followed by UTF-8.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Model, ModelKind};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CAPSRCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub fingerprint: String,
    pub input_dims: (usize, usize),
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self {
            kind: model.kind(),
            fingerprint: model.fingerprint(),
            input_dims: model.input_dims(),
            tensors: model
                .param_names()
                .iter()
                .zip(model.tensors())
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, self.kind.as_str());
        put_str(&mut out, &self.fingerprint);
        put_u32(&mut out, self.input_dims.0 as u32);
        put_u32(&mut out, self.input_dims.1 as u32);
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                "checkpoint",
                format!("version {version}, expected {VERSION}"),
            ));
        }
        let kind: ModelKind = r.string()?.parse()?;
        let fingerprint = r.string()?;
        let input_dims = (r.u32()? as usize, r.u32()? as usize);
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(
                len.checked_mul(8)
                    .ok_or_else(|| Error::format("checkpoint", "tensor too large"))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(&shape, data)
                .map_err(|_| Error::format("checkpoint", format!("tensor `{name}` has shape {shape:?}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Self {
            kind,
            fingerprint,
            input_dims,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Copies the stored parameters into `model` after checking that it has
    /// the same architecture fingerprint and tensor layout.
    pub fn restore(&self, model: &mut Model) -> Result<()> {
        let found = model.fingerprint();
        if found != self.fingerprint || model.kind() != self.kind {
            return Err(Error::Fingerprint {
                expected: self.fingerprint.clone(),
                found,
            });
        }
        let names = model.param_names();
        if names.len() != self.tensors.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} tensors stored, model has {}", self.tensors.len(), names.len()),
            ));
        }
        for ((name, stored), (&expected, target)) in self.tensors.iter().zip(names.iter().zip(model.tensors_mut())) {
            if name != expected || stored.shape() != target.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!(
                        "tensor `{name}` {:?} does not match `{expected}` {:?}",
                        stored.shape(),
                        target.shape()
                    ),
                ));
            }
            target.data_mut().copy_from_slice(stored.data());
        }
        Ok(())
    }

    /// Rebuilds a model with the published architecture for the stored input
    /// size and loads the parameters into it.
    pub fn into_model(&self) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(self.kind, self.input_dims.0, self.input_dims.1, &mut rng)?;
        self.restore(&mut model)?;
        Ok(model)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format("checkpoint", "truncated"));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("checkpoint", "invalid UTF-8"))
    }
}
