//! Checkpoint file: `AMLB | u32 version | meta | norm | u64 step | params`.
//!
//! Meta is a length-prefixed list of key/value strings holding the model
//! hyperparameters. Each parameter is `name | ndim | dims (u64) | f64 data`.
//! All integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};
use crate::world::dataset::{Reader, Writer};
use crate::world::NormStats;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AMLB";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub norm: NormStats,
    pub step: u64,
    pub params: Vec<NamedTensor>,
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    Writer(buf).u32(s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut Reader) -> Result<String> {
    let n = r.u32()? as usize;
    String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
}

impl Checkpoint {
    pub fn from_store(meta: Vec<(String, String)>, store: &ParamStore<f64>, norm: NormStats, step: u64) -> Self {
        let params = store
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            })
            .collect();
        Self { meta, norm, step, params }
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint lacks `{key}`")))
    }

    pub fn meta_parse<X: std::str::FromStr>(&self, key: &str) -> Result<X> {
        let v = self.meta(key)?;
        v.parse()
            .map_err(|_| Error::Format(format!("checkpoint field `{key}` has bad value `{v}`")))
    }

    /// Copies every stored tensor into the parameter of the same name.
    /// The store must have exactly the same parameter names and shapes.
    pub fn load_into(&self, store: &mut ParamStore<f64>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for t in &self.params {
            let id = store
                .by_name(&t.name)
                .ok_or_else(|| Error::Format(format!("model has no parameter `{}`", t.name)))?;
            store.set_value(id, Tensor::new(t.shape.clone(), t.data.clone())?)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        Writer(&mut buf).u32(CHECKPOINT_VERSION);
        Writer(&mut buf).u32(self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_str(&mut buf, k);
            put_str(&mut buf, v);
        }
        let mut w = Writer(&mut buf);
        w.vec(&self.norm.mean);
        w.vec(&self.norm.std);
        w.u64(self.step);
        w.u32(self.params.len() as u32);
        for t in &self.params {
            put_str(&mut buf, &t.name);
            let mut w = Writer(&mut buf);
            w.u32(t.shape.len() as u32);
            for &d in &t.shape {
                w.u64(d as u64);
            }
            w.f64s(&t.data);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not an AMLB checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let n_meta = r.u32()? as usize;
        let mut meta = Vec::with_capacity(n_meta);
        for _ in 0..n_meta {
            meta.push((get_str(&mut r)?, get_str(&mut r)?));
        }
        let norm = NormStats {
            mean: r.vec()?,
            std: r.vec()?,
        };
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = get_str(&mut r)?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let data = r.f64s(shape.iter().product())?;
            params.push(NamedTensor { name, shape, data });
        }
        if !r.done() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { meta, norm, step, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::from_f64(&[2, 3], &[1.0, -2.5, 3.0, 0.1, f64::MIN_POSITIVE, -0.0]).unwrap()).unwrap();
        store.add("a.b", Tensor::from_f64(&[1, 3], &[0.0, 1e300, -7.0]).unwrap()).unwrap();
        Checkpoint::from_store(vec![("kind".into(), "action".into())], &store, NormStats::identity(3), 42)
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.meta("kind").unwrap(), "action");
    }

    #[test]
    fn version_and_truncation_rejected() {
        let mut bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version { expected: 1, found: 9 })));
    }
}
