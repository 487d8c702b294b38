//! `VCAM` model checkpoints: architecture JSON followed by named f32 tensors.
//!
//! Layout (little-endian): `b"VCAM"`, u32 version, u32 JSON length, config
//! JSON, u32 tensor count, then per tensor u32 name length, name bytes,
//! u32 ndim, u32 dims, f32 values.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::raster::vcat::Cursor;
use crate::unet::{UNetConfig, UNetModel};

pub const MAGIC: &[u8; 4] = b"VCAM";
pub const VERSION: u32 = 1;

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(model: &UNetModel<f32>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(model.config()).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + model.param_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    push_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    push_u32(&mut out, model.params().len())?;
    for (name, t) in model.param_names().iter().zip(model.params()) {
        push_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        push_u32(&mut out, t.dims().len())?;
        for &d in t.dims() {
            push_u32(&mut out, d)?;
        }
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<UNetModel<f32>> {
    let mut cur = Cursor::new(bytes);
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("missing VCAM magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported VCAM version {version}")));
    }
    let json_len = cur.u32()? as usize;
    let config: UNetConfig = serde_json::from_slice(cur.take(json_len)?)
        .map_err(|e| Error::Format(format!("bad checkpoint config: {e}")))?;
    let count = cur.u32()? as usize;
    let mut named = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = cur.u32()? as usize;
        let dims = (0..ndim)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor dims overflow".into()))?;
        named.push((name, Tensor::new(dims, cur.f32s(n)?)?));
    }
    if !cur.is_empty() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    UNetModel::from_params(config, named)
}

pub fn save(model: &UNetModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<UNetModel<f32>> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UNetModel<f32> {
        let cfg = UNetConfig {
            in_channels: 1,
            n_classes: 2,
            depth: 1,
            base_channels: 2,
            ..UNetConfig::default()
        };
        UNetModel::build(cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = tiny();
        let bytes = encode(&m).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.param_names(), m.param_names());
        for (a, b) in back.params().iter().zip(m.params()) {
            assert_eq!(a.values(), b.values());
        }
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&tiny()).unwrap();
        assert_eq!(&bytes[..4], b"VCAM");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let cfg: UNetConfig = serde_json::from_slice(&bytes[12..12 + json_len]).unwrap();
        assert_eq!(cfg.base_channels, 2);
        let count = u32::from_le_bytes(bytes[12 + json_len..16 + json_len].try_into().unwrap());
        assert_eq!(count as usize, tiny().params().len());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&tiny()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(decode(&magic).is_err());
    }
}
