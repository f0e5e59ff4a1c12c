//! Binary tensor table.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"NFCC0001"
//! count   u64
//! entry*  u32 name_len | name (UTF-8) | u32 ndim | u64 dim* | f64 value*
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::adam::AdamState;
use super::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NFCC0001";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::invalid(format!("checkpoint has no tensor {name}")))
    }

    /// Adds every parameter of `store` under its own name.
    pub fn push_store(&mut self, store: &ParamStore) {
        for (_, name, t) in store.iter() {
            let mut t = t.clone();
            t.zero_grad();
            self.push(name, t);
        }
    }

    /// Adds the optimizer state: `adam/step`, `adam/hyper` and per-parameter
    /// `adam/m/<name>`, `adam/v/<name>`.
    pub fn push_adam(&mut self, store: &ParamStore, adam: &AdamState) {
        self.push("adam/step", Tensor::scalar(adam.step as f64));
        self.push("adam/hyper", Tensor::new(vec![4], adam.hyper().to_vec()).expect("4 values"));
        let (m, v) = adam.moments();
        for (id, name, t) in store.iter() {
            let shape = t.shape().to_vec();
            self.push(format!("adam/m/{name}"), Tensor::new(shape.clone(), m[id.index()].clone()).expect("shape"));
            self.push(format!("adam/v/{name}"), Tensor::new(shape, v[id.index()].clone()).expect("shape"));
        }
    }

    /// Copies values for every parameter in `store` from the checkpoint.
    pub fn restore_store(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let t = self.require(&name)?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::shape(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            store.get_mut(id).values_mut().copy_from_slice(t.values());
        }
        Ok(())
    }

    pub fn restore_adam(&self, store: &ParamStore) -> Result<AdamState> {
        let step = self.require("adam/step")?.values()[0] as u64;
        let hyper = self.require("adam/hyper")?.values();
        if hyper.len() != 4 {
            return Err(Error::shape("adam/hyper needs 4 values"));
        }
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (_, name, t) in store.iter() {
            let mt = self.require(&format!("adam/m/{name}"))?;
            let vt = self.require(&format!("adam/v/{name}"))?;
            if mt.len() != t.len() || vt.len() != t.len() {
                return Err(Error::shape(format!("optimizer moments for {name} have wrong length")));
            }
            m.push(mt.values().to_vec());
            v.push(vt.values().to_vec());
        }
        Ok(AdamState::from_parts(step, [hyper[0], hyper[1], hyper[2], hyper[3]], m, v))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| "file too short for magic".to_string())?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(format!("bad magic {:?}, expected NFCC0001", String::from_utf8_lossy(&magic)));
        }
        let count = read_u64(&mut r)?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            if len > r.len() {
                return Err("truncated tensor name".into());
            }
            let (name, rest) = r.split_at(len);
            let name = String::from_utf8(name.to_vec()).map_err(|_| "tensor name is not UTF-8".to_string())?;
            r = rest;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            if n.checked_mul(8).is_none_or(|b| b > r.len()) {
                return Err(format!("truncated values for {name}"));
            }
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|e| e.to_string())?;
                values.push(f64::from_le_bytes(b));
            }
            entries.push((name, Tensor::new(shape, values).map_err(|e| e.to_string())?));
        }
        if !r.is_empty() {
            return Err(format!("{} trailing bytes", r.len()));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| Error::format(path, m))
    }
}

fn read_u32(r: &mut &[u8]) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| "unexpected end of file".to_string())?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> std::result::Result<u64, String> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| "unexpected end of file".to_string())?;
    Ok(u64::from_le_bytes(b))
}
