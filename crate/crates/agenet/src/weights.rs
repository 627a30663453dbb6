//! Binary tensor containers.
//!
//! Weight files ("AAGW") hold a JSON model spec plus named tensors and are
//! loadable with no external schema. Checkpoints ("AAGC") reuse the same
//! record layout with a richer JSON header and extra optimizer tensors.
//!
//! Layout: magic (4 bytes), format version (u32 LE), header JSON
//! (u32 LE length + UTF-8), tensor count (u32 LE), then per tensor:
//! name length (u32 LE), UTF-8 dotted name, dtype code (u8), rank (u32 LE),
//! dims (u64 LE each), raw little-endian scalar payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{build_model, MultiTaskModel, MultiTaskModelSpec};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const WEIGHT_MAGIC: [u8; 4] = *b"AAGW";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AAGC";
pub const FORMAT_VERSION: u32 = 1;

/// A tensor record in serialized form.
#[derive(Debug, Clone)]
pub struct RawTensor {
    pub name: String,
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

impl RawTensor {
    pub fn from_tensor<S: Scalar>(name: &str, t: &Tensor<S>) -> RawTensor {
        let mut payload = Vec::with_capacity(t.numel() * S::DTYPE.size_bytes());
        for &v in t.data().iter() {
            v.write_le(&mut payload);
        }
        RawTensor { name: name.to_string(), dtype: S::DTYPE, dims: t.dims().to_vec(), payload }
    }

    /// Decoded values at the runtime scalar type; converts across precisions.
    pub fn values<S: Scalar>(&self) -> Vec<S> {
        let sz = self.dtype.size_bytes();
        self.payload
            .chunks_exact(sz)
            .map(|chunk| match self.dtype {
                Dtype::F32 => S::from_f64(f32::read_le(chunk).as_f64()),
                Dtype::F64 => S::from_f64(f64::read_le(chunk)),
            })
            .collect()
    }

    /// Copies values into an existing tensor, checking dims.
    pub fn load_into<S: Scalar>(&self, t: &Tensor<S>) -> Result<()> {
        if t.dims() != self.dims.as_slice() {
            return Err(Error::Format(format!(
                "tensor '{}': file dims {:?} do not match model dims {:?}",
                self.name,
                self.dims,
                t.dims()
            )));
        }
        let values = self.values::<S>();
        t.data_mut().copy_from_slice(&values);
        Ok(())
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated file: needed {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn encode_container(magic: &[u8; 4], header_json: &str, tensors: &[RawTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    push_u32(&mut out, FORMAT_VERSION);
    push_u32(&mut out, header_json.len() as u32);
    out.extend_from_slice(header_json.as_bytes());
    push_u32(&mut out, tensors.len() as u32);
    for t in tensors {
        push_u32(&mut out, t.name.len() as u32);
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dtype as u8);
        push_u32(&mut out, t.dims.len() as u32);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&t.payload);
    }
    out
}

pub fn decode_container(bytes: &[u8], magic: &[u8; 4]) -> Result<(String, Vec<RawTensor>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let got = r.take(4)?;
    if got != magic {
        return Err(Error::Format(format!(
            "bad magic: expected {:?}, got {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(got)
        )));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unknown format version {} (this build reads version {})",
            version, FORMAT_VERSION
        )));
    }
    let header_len = r.u32()? as usize;
    let header = String::from_utf8(r.take(header_len)?.to_vec())
        .map_err(|e| Error::Format(format!("header is not UTF-8: {}", e)))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {}", e)))?;
        let code = r.take(1)?[0];
        let dtype = Dtype::from_code(code)
            .ok_or_else(|| Error::Format(format!("tensor '{}': unknown dtype code {}", name, code)))?;
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let numel: usize = dims.iter().product();
        let payload = r.take(numel * dtype.size_bytes())?.to_vec();
        tensors.push(RawTensor { name, dtype, dims, payload });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor record",
            bytes.len() - r.pos
        )));
    }
    Ok((header, tensors))
}

/// Writes a weight file: model spec header plus every model tensor
/// (trainable parameters and batch-norm running statistics).
pub fn save_model<S: Scalar>(path: &Path, model: &MultiTaskModel<S>) -> Result<()> {
    let header = serde_json::to_string(&model.spec)?;
    let tensors: Vec<RawTensor> = model
        .named_tensors()
        .iter()
        .map(|(name, t, _)| RawTensor::from_tensor(name, t))
        .collect();
    fs::write(path, encode_container(&WEIGHT_MAGIC, &header, &tensors))?;
    Ok(())
}

/// Reads back a model from a weight file alone: the header spec rebuilds the
/// architecture, then every tensor is filled by name.
pub fn load_model<S: Scalar>(path: &Path) -> Result<MultiTaskModel<S>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Format(format!("cannot read '{}': {}", path.display(), e)))?;
    let (header, raw) = decode_container(&bytes, &WEIGHT_MAGIC)?;
    let spec: MultiTaskModelSpec = serde_json::from_str(&header)?;
    let model = build_model::<S>(&spec, 0)?;
    fill_model(&model, &raw)?;
    Ok(model)
}

pub fn fill_model<S: Scalar>(model: &MultiTaskModel<S>, raw: &[RawTensor]) -> Result<()> {
    let mut by_name: std::collections::HashMap<&str, &RawTensor> =
        raw.iter().map(|t| (t.name.as_str(), t)).collect();
    for (name, tensor, _) in model.named_tensors() {
        let rec = by_name.remove(name.as_str()).ok_or_else(|| {
            Error::Format(format!("weight file is missing tensor '{}'", name))
        })?;
        rec.load_into(&tensor)?;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Format(format!("weight file has unknown tensor '{}'", extra)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_resnet_lite, BackboneKind};

    #[test]
    fn round_trip_is_byte_identical() {
        let spec = MultiTaskModelSpec::new(BackboneKind::ResnetLite, 32, 11);
        let model = build_resnet_lite::<f32>(&spec, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.aagw");
        let p2 = dir.path().join("b.aagw");
        save_model(&p1, &model).unwrap();
        let loaded = load_model::<f32>(&p1).unwrap();
        save_model(&p2, &loaded).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.aagw");
        fs::write(&p, b"NOPE0000").unwrap();
        let err = match load_model::<f32>(&p) {
            Err(e) => e,
            Ok(_) => panic!("corrupt magic accepted"),
        };
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn unknown_version_rejected() {
        let spec = MultiTaskModelSpec::new(BackboneKind::ResnetLite, 32, 11);
        let model = build_resnet_lite::<f32>(&spec, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.aagw");
        save_model(&p, &model).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[4] = 99;
        fs::write(&p, &bytes).unwrap();
        let err = match load_model::<f32>(&p) {
            Err(e) => e,
            Ok(_) => panic!("unknown version accepted"),
        };
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let spec = MultiTaskModelSpec::new(BackboneKind::ResnetLite, 32, 11);
        let model = build_resnet_lite::<f32>(&spec, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.aagw");
        save_model(&p, &model).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.push(0);
        fs::write(&p, &bytes).unwrap();
        assert!(load_model::<f32>(&p).is_err());
    }

    #[test]
    fn cross_precision_load_converts() {
        let spec = MultiTaskModelSpec::new(BackboneKind::ResnetLite, 32, 11);
        let model = build_resnet_lite::<f32>(&spec, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.aagw");
        save_model(&p, &model).unwrap();
        let as_f64 = load_model::<f64>(&p).unwrap();
        let a = model.named_tensors();
        let b = as_f64.named_tensors();
        for ((_, ta, _), (_, tb, _)) in a.iter().zip(b.iter()) {
            for (x, y) in ta.to_f64_vec().iter().zip(tb.to_f64_vec().iter()) {
                assert_eq!(x, y);
            }
        }
    }
}
