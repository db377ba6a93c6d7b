//! The VLKC checkpoint container.
//!
//! Layout (little-endian): `"VLKC"`, `u8` version, `u32` tensor count, then per
//! tensor: `u16` name length, UTF-8 name, `u8` dtype tag, `u8` rank,
//! `rank x u32` dims, row-major payload. Tag 0 is `f32`; tag 1 is raw bytes and
//! carries the JSON metadata under [`CONFIG_TENSOR`].

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"VLKC";
pub const VERSION: u8 = 1;
pub const CONFIG_TENSOR: &str = "__config__";

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32 { dims: Vec<usize>, data: Vec<f32> },
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub tensors: Vec<(String, TensorData)>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: TensorData) {
        let name = name.into();
        match self.tensors.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.tensors.push((name, t)),
        }
    }

    pub fn insert_matrix<T: Scalar>(&mut self, name: impl Into<String>, m: &Array2<T>) {
        self.insert(
            name,
            TensorData::F32 {
                dims: vec![m.nrows(), m.ncols()],
                data: m.iter().map(|v| v.to_f32_lossy()).collect(),
            },
        );
    }

    pub fn matrix<T: Scalar>(&self, name: &str) -> Result<Array2<T>> {
        match self.get(name) {
            Some(TensorData::F32 { dims, data }) if dims.len() == 2 => {
                Ok(Array2::from_shape_vec((dims[0], dims[1]), data.iter().map(|&v| T::of(v as f64)).collect())
                    .expect("dims match payload"))
            }
            Some(_) => Err(Error::Config(format!("tensor {name:?} is not a rank-2 f32 matrix"))),
            None => Err(Error::Config(format!("checkpoint has no tensor {name:?}"))),
        }
    }

    pub fn set_config<C: Serialize>(&mut self, meta: &C) -> Result<()> {
        self.insert(CONFIG_TENSOR, TensorData::U8(serde_json::to_vec(meta)?));
        Ok(())
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        match self.get(CONFIG_TENSOR) {
            Some(TensorData::U8(bytes)) => Ok(serde_json::from_slice(bytes)?),
            _ => Err(Error::Config(format!("checkpoint has no {CONFIG_TENSOR} tensor"))),
        }
    }

    /// Adds every parameter of `p` under `prefix`.
    pub fn insert_params<T: Scalar, P: Parameters<T>>(&mut self, prefix: &str, p: &P) {
        p.visit(prefix, &mut |name, a| self.insert_matrix(name, a));
    }

    /// Overwrites every parameter of `p` from the tensor of the same name.
    pub fn fill_params<T: Scalar, P: Parameters<T>>(&self, prefix: &str, p: &mut P) -> Result<()> {
        let mut result = Ok(());
        p.visit_mut(prefix, &mut |name, a| {
            if result.is_err() {
                return;
            }
            match self.matrix::<T>(&name) {
                Ok(m) if m.dim() == a.dim() => a.assign(&m),
                Ok(m) => {
                    result = Err(Error::ShapeMismatch {
                        expected: format!("{name} {:?}", a.dim()),
                        got: format!("{:?}", m.dim()),
                    })
                }
                Err(e) => result = Err(e),
            }
        });
        result
    }
}

pub fn encode_container(c: &Container) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(c.tensors.len() as u32).to_le_bytes());
    for (name, t) in &c.tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        match t {
            TensorData::F32 { dims, data } => {
                out.push(DTYPE_F32);
                out.push(dims.len() as u8);
                for &d in dims {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            TensorData::U8(bytes) => {
                out.push(DTYPE_U8);
                out.push(1);
                out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
                out.extend_from_slice(bytes);
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                offset: self.bytes.len(),
            }),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::BadMagic { offset: 0 });
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            offset: 4,
        });
    }
    let count = r.u32()?;
    let mut c = Container::default();
    for _ in 0..count {
        let name_at = r.pos;
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format {
                offset: name_at + 2,
                message: "tensor name is not UTF-8".into(),
            })?
            .to_owned();
        let tag_at = r.pos;
        let tag = r.u8()?;
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(Error::Format {
            offset: tag_at + 2,
            message: "shape overflows".into(),
        })?;
        let t = match tag {
            DTYPE_F32 => {
                let start = r.pos;
                let raw = r.take(n.checked_mul(4).ok_or(Error::Truncated { offset: bytes.len() })?)?;
                let mut data = Vec::with_capacity(n);
                for (k, chunk) in raw.chunks_exact(4).enumerate() {
                    let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
                    if !v.is_finite() {
                        return Err(Error::NonFiniteValue { offset: start + 4 * k });
                    }
                    data.push(v);
                }
                TensorData::F32 { dims, data }
            }
            DTYPE_U8 if rank == 1 => TensorData::U8(r.take(n)?.to_vec()),
            _ => {
                return Err(Error::Format {
                    offset: tag_at,
                    message: format!("unsupported dtype tag {tag} with rank {rank}"),
                })
            }
        };
        if c.get(&name).is_some() {
            return Err(Error::Format {
                offset: name_at,
                message: format!("duplicate tensor {name:?}"),
            });
        }
        c.tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos,
            message: "trailing bytes after last tensor".into(),
        });
    }
    Ok(c)
}

/// Writes via a temporary sibling and a rename so readers never see a partial file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_container(path: impl AsRef<Path>, c: &Container) -> Result<()> {
    write_atomic(path, &encode_container(c))
}

pub fn load_container(path: impl AsRef<Path>) -> Result<Container> {
    decode_container(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::layers::Linear;
    use crate::rng;
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut c = Container::default();
        c.set_config(&serde_json::json!({"stage": "teacher", "step": 3})).unwrap();
        c.insert_params("layer", &Linear::<f32>::init(&mut rng::derive(0, &[]), 3, 2));
        c.insert("vec", TensorData::F32 { dims: vec![4], data: vec![1.0, -2.5, 0.0, 1e-30] });
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = encode_container(&c);
        let back = decode_container(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_container(&back), bytes);
        let meta: serde_json::Value = back.config().unwrap();
        assert_eq!(meta["step"], 3);
    }

    #[test]
    fn params_fill_back() {
        let a = Linear::<f32>::init(&mut rng::derive(1, &[]), 3, 2);
        let mut c = Container::default();
        c.insert_params("x", &a);
        let mut b = Linear::<f32>::init(&mut rng::derive(2, &[]), 3, 2);
        c.fill_params("x", &mut b).unwrap();
        assert_eq!(a, b);
        let mut wrong = Linear::<f32>::init(&mut rng::derive(2, &[]), 2, 2);
        assert!(matches!(c.fill_params("x", &mut wrong), Err(Error::ShapeMismatch { .. })));
        assert!(c.fill_params("y", &mut b).is_err());
    }

    #[test]
    fn malformed_headers_are_named() {
        let bytes = encode_container(&sample());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let e = decode_container(&bad).unwrap_err();
        assert!(e.to_string().starts_with("bad magic"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_container(&bad), Err(Error::VersionMismatch { found: 9, offset: 4 })));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_container(cut), Err(Error::Truncated { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_container(&long), Err(Error::Format { .. })));
        assert!(matches!(decode_container(b"VL"), Err(Error::Truncated { offset: 2 })));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vlkc");
        save_container(&path, &sample()).unwrap();
        assert!(!dir.path().join("model.vlkc.tmp").exists());
        assert_eq!(load_container(&path).unwrap(), sample());
    }

    proptest! {
        #[test]
        fn arbitrary_matrices_round_trip(rows in 0usize..5, cols in 0usize..5, seed in 0u64..1000) {
            let m = crate::encoder::layers::trunc_normal::<f32, _>(&mut rng::derive(seed, &[]), (rows, cols), 3.0);
            let mut c = Container::default();
            c.insert_matrix("m", &m);
            let bytes = encode_container(&c);
            let back = decode_container(&bytes).unwrap();
            prop_assert_eq!(back.matrix::<f32>("m").unwrap(), m);
            prop_assert_eq!(encode_container(&back), bytes);
        }
    }
}
